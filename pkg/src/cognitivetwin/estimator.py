"""Scikit-learn style estimator wrapping normalization, batching and training."""
from __future__ import annotations

import logging
import math

import numpy as np
import torch
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from .data import (
    MMSE_INDEX, NormalizationStats, PatientRecord, apply_normalization,
    derive_forecast_target, fit_normalization, select_split, stratified_split,
)
from .dmm import GaussianBelief, predict_progression_probability
from .fusion import FusionConfig
from .model import VARIANT_MODALITIES, CognitiveTwinNet, NetConfig, check_variant, collate
from .training import TrainConfig, fit, validation_loss
from .validation import check_cohort

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CognitiveTwin(RegressorMixin, BaseEstimator):
    """Multi-modal fusion + Deep Markov Model forecaster of MMSE trajectories.

    ``X`` is a sequence of raw :class:`~cognitivetwin.data.PatientRecord`.
    ``fit`` z-scores features with statistics from the training patients and
    trains on the 24-month MMSE target, seeing only visits up to
    ``history_months``. ``predict`` returns MMSE points.

    Parameters
    ----------
    variant : {"full", "baseline", "no_dmm", "no_genetics", "cognitive_only"}
        Architecture / input switch for ablations.
    d_model, n_heads, n_layers, ff_dim, dropout
        Transformer fusion dimensions.
    latent_dim, rnn_hidden, rnn_layers, emission_dim
        Deep Markov Model dimensions.
    learning_rate, weight_decay, batch_size, max_epochs, patience, grad_clip, dmm_loss_scale
        Optimization settings; the cosine schedule spans ``t_max`` epochs.
    horizon_months, tolerance_months
        Forecast target matching.
    history_months
        Visits at or before this month are visible to the forecaster.
    step_months
        Latent time step used when rolling forward on the visit grid.
    n_forecast_samples
        Monte-Carlo trajectories for progression probabilities.
    dtype : {"float32", "float64"}
    random_state : int
    """

    def __init__(self, variant="full", d_model=256, n_heads=8, n_layers=4, ff_dim=512,
                 dropout=0.15, latent_dim=64, rnn_hidden=128, rnn_layers=3, emission_dim=256,
                 learning_rate=8e-4, weight_decay=1e-3, batch_size=32, max_epochs=150,
                 patience=10, grad_clip=1.0, dmm_loss_scale=0.1, t_max=150,
                 horizon_months=24.0, tolerance_months=3.0, history_months=12.0,
                 step_months=6.0, progression_threshold=3.0, progression_window=36.0,
                 n_forecast_samples=200, dtype="float32", random_state=0):
        self.variant = variant
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ff_dim = ff_dim
        self.dropout = dropout
        self.latent_dim = latent_dim
        self.rnn_hidden = rnn_hidden
        self.rnn_layers = rnn_layers
        self.emission_dim = emission_dim
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.grad_clip = grad_clip
        self.dmm_loss_scale = dmm_loss_scale
        self.t_max = t_max
        self.horizon_months = horizon_months
        self.tolerance_months = tolerance_months
        self.history_months = history_months
        self.step_months = step_months
        self.progression_threshold = progression_threshold
        self.progression_window = progression_window
        self.n_forecast_samples = n_forecast_samples
        self.dtype = dtype
        self.random_state = random_state

    # -- configuration -----------------------------------------------------

    def net_config(self) -> NetConfig:
        fusion = FusionConfig(self.d_model, self.n_heads, self.n_layers, self.ff_dim, self.dropout)
        return NetConfig(
            fusion=fusion, latent_dim=self.latent_dim, rnn_hidden=self.rnn_hidden,
            rnn_layers=self.rnn_layers, emission_dim=self.emission_dim, variant=self.variant,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            early_stop_patience=self.patience, grad_clip_max_norm=self.grad_clip,
            dmm_loss_scale=self.dmm_loss_scale, t_max=self.t_max, seed=self.random_state,
        )

    def _torch_dtype(self):
        try:
            return _DTYPES[self.dtype]
        except KeyError:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}") from None

    # -- data preparation --------------------------------------------------

    def history_length(self, patient: PatientRecord) -> int:
        months = patient.months
        n = int(np.sum(months <= self.history_months))
        return max(1, n)

    def forecast_steps(self, last_month: float, target_month: float) -> int:
        return max(1, int(round((target_month - last_month) / self.step_months)))

    def _targets(self, cohort, y=None):
        if y is not None:
            y = np.asarray(y, dtype=float).ravel()
            if y.size != len(cohort):
                raise ValueError(f"y has {y.size} entries for {len(cohort)} patients")
            return [None if np.isnan(v) else float(v) for v in y]
        out = []
        for p in cohort:
            t = derive_forecast_target(p, self.horizon_months, self.tolerance_months)
            out.append(None if t is None or t.visit_index < self.history_length(p) else t.target_mmse)
        return out

    def _batch(self, cohort, stats: NormalizationStats, y=None, with_targets=True, hist=None):
        targets = self._targets(cohort, y) if with_targets else [None] * len(cohort)
        if hist is None:
            hist = [self.history_length(p) for p in cohort]
        steps = [self.forecast_steps(p.visits[h - 1].months_since_baseline, self.horizon_months)
                 for p, h in zip(cohort, hist)]
        mu, sd = stats.mean[MMSE_INDEX], stats.std[MMSE_INDEX]
        z_targets = [None if t is None else (t - mu) / sd for t in targets]
        normed = apply_normalization(cohort, stats)
        return collate(normed, hist, steps, z_targets, VARIANT_MODALITIES[self.variant], self._torch_dtype())

    def _build_net(self) -> CognitiveTwinNet:
        check_variant(self.variant)
        torch.manual_seed(self.random_state)
        return CognitiveTwinNet(self.net_config()).to(self._torch_dtype())

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None, validation=None, resume=None, on_epoch=None):
        """Train on ``X``.

        Without ``validation``, patients tagged ``train``/``validation`` in
        ``X`` are used as such; untagged cohorts are split 85/15 (stratified).
        """
        check_variant(self.variant)
        cohort = check_cohort(X)
        if validation is None:
            if all(p.split is not None for p in cohort):
                train, validation = select_split(cohort, "train"), select_split(cohort, "validation")
            else:
                tagged = stratified_split(cohort, (0.85, 0.15, 0.0), seed=self.random_state)
                train, validation = select_split(tagged, "train"), select_split(tagged, "validation")
        else:
            train, validation = cohort, check_cohort(validation)
        if not train or not validation:
            raise ValueError("fit needs non-empty training and validation patients")
        if y is not None and len(train) != len(cohort):
            raise ValueError("explicit y requires an explicit validation cohort")
        stats = fit_normalization(train, split=None) if resume is None else \
            NormalizationStats.from_dict(resume["normalization"])
        self.stats_ = stats
        train_batch = self._batch(train, stats, y)
        val_batch = self._batch(validation, stats)
        if not bool(train_batch.has_target.any()):
            logger.warning("no training patient has a %g-month target", self.horizon_months)
        self.net_ = self._build_net()
        result = fit(self.net_, train_batch, val_batch, self.train_config(), resume=resume, on_epoch=on_epoch)
        self.net_.load_state_dict(result.best_state)
        self.net_.eval()
        self.fit_result_ = result
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_val_loss_ = result.best_val_loss
        with torch.no_grad():
            out = self.net_(train_batch, with_elbo=False)
        has = train_batch.has_target
        resid = (out.prediction - train_batch.target)[has]
        sd = float(resid.std()) if int(has.sum()) > 1 else 1.0
        self.residual_std_ = max(sd, 1e-3) * float(stats.std[MMSE_INDEX])
        return self

    def load(self, state_dict, stats: NormalizationStats, residual_std: float = 1.0):
        """Restore a fitted model from checkpoint contents."""
        self.stats_ = stats
        self.net_ = self._build_net()
        self.net_.load_state_dict(state_dict)
        self.net_.eval()
        self.residual_std_ = residual_std
        return self

    def _to_mmse(self, z):
        z = np.asarray(z, dtype=float)
        return z * self.stats_.std[MMSE_INDEX] + self.stats_.mean[MMSE_INDEX]

    def predict(self, X) -> np.ndarray:
        """Point forecast of MMSE at ``horizon_months`` for every patient."""
        check_is_fitted(self, "net_")
        cohort = check_cohort(X)
        batch = self._batch(cohort, self.stats_, with_targets=False)
        self.net_.eval()
        with torch.no_grad():
            out = self.net_(batch, with_elbo=False)
        return self._to_mmse(out.prediction.numpy())

    def targets(self, X) -> np.ndarray:
        """Observed 24-month target MMSE (NaN where absent)."""
        return np.array([np.nan if t is None else t for t in self._targets(check_cohort(X))])

    def score(self, X, y=None, sample_weight=None):
        """R^2 on patients with a target; ``y`` defaults to the derived targets."""
        y = self.targets(X) if y is None else np.asarray(y, dtype=float)
        keep = ~np.isnan(y)
        return r2_score(y[keep], self.predict(X)[keep], sample_weight=sample_weight)

    def validation_loss(self, X) -> float:
        """Recompute the validation-split total loss (as monitored during training)."""
        check_is_fitted(self, "net_")
        batch = self._batch(check_cohort(X), self.stats_)
        return float(validation_loss(self.net_, batch, self.train_config()).total)

    def history_beliefs(self, X, hist=None) -> GaussianBelief:
        """Posterior beliefs at each patient's last visible visit."""
        check_is_fitted(self, "net_")
        if not self.net_.uses_dmm:
            raise ValueError(f"variant {self.variant!r} has no latent dynamics")
        batch = self._batch(check_cohort(X), self.stats_, with_targets=False, hist=hist)
        with torch.no_grad():
            return self.net_.history_belief(batch)

    def predict_progression_proba(self, X, n_samples=None) -> np.ndarray:
        """P(decline > threshold within the window) per patient.

        DMM variants count Monte-Carlo trajectories; the static variants use a
        Gaussian with the training residual spread around the point forecast.
        """
        check_is_fitted(self, "net_")
        cohort = check_cohort(X)
        n_samples = n_samples or self.n_forecast_samples
        hist = [self.history_length(p) for p in cohort]
        probs = np.empty(len(cohort))
        if self.net_.uses_dmm:
            beliefs = self.history_beliefs(cohort)
            last = np.array([p.visits[h - 1].months_since_baseline for p, h in zip(cohort, hist)])
            n_w = max(1, int(math.floor((self.progression_window - last.min()) / self.step_months)))
            gen = torch.Generator().manual_seed(self.random_state)
            with torch.no_grad():
                res = self.net_.dmm.forecast(beliefs, n_w, n_samples, gen)
            samples = self._to_mmse(res.samples.numpy())  # (S, B, n_w)
        else:
            point = self.predict(cohort)
        for i, (p, h) in enumerate(zip(cohort, hist)):
            base = p.baseline_mmse
            follow = [v.mmse for v in p.visits[1:h]
                      if v.mmse is not None and v.months_since_baseline <= self.progression_window]
            hmin = min(follow) if follow else None
            if base is None:
                probs[i] = np.nan
            elif self.net_.uses_dmm:
                months = last[i] + self.step_months * np.arange(1, samples.shape[-1] + 1)
                probs[i] = predict_progression_probability(
                    samples[:, i, :], base, self.progression_threshold, self.progression_window,
                    months, hmin)
            elif hmin is not None and base - hmin > self.progression_threshold:
                probs[i] = 1.0
            else:
                z = (base - self.progression_threshold - point[i]) / self.residual_std_
                probs[i] = float(norm.cdf(z))
        return probs

    def forecast(self, patient: PatientRecord, horizon_steps: int, n_samples: int = 1000,
                 seed: int | None = None, condition_months: float | None = None) -> dict:
        """Monte-Carlo MMSE trajectory from the posterior at the last conditioning visit.

        Returns months, mean, lower/upper 95% bounds and the raw samples.
        """
        check_is_fitted(self, "net_")
        if not self.net_.uses_dmm:
            raise ValueError(f"variant {self.variant!r} has no latent dynamics to forecast")
        months = patient.months
        h = len(months) if condition_months is None else max(1, int(np.sum(months <= condition_months)))
        belief = self.history_beliefs([patient], hist=[h])
        gen = torch.Generator().manual_seed(self.random_state if seed is None else seed)
        with torch.no_grad():
            res = self.net_.dmm.forecast(belief.index(0), horizon_steps, n_samples, gen)
        samples = self._to_mmse(res.samples.numpy())
        return {
            "months": months[h - 1] + self.step_months * np.arange(1, horizon_steps + 1),
            "mean": samples.mean(axis=0),
            "lower": np.quantile(samples, 0.025, axis=0),
            "upper": np.quantile(samples, 0.975, axis=0),
            "samples": samples,
            "conditioned_visits": h,
        }
