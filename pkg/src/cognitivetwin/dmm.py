"""Deep Markov Model over fused visit representations.

Generative side: learnable initial prior, gated transition prior and a
3-layer emission with an MMSE projection. Inference side: a bidirectional GRU
context encoder and a combiner producing Gaussian posteriors
q(z_t | z_{t-1}, h_t). Variances are ``softplus(.) + floor`` throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

VARIANCE_FLOOR = 1e-4


@dataclass
class DMMConfig:
    input_dim: int = 256  # fused-representation dimension
    latent_dim: int = 64
    rnn_hidden: int = 128
    rnn_layers: int = 3
    combiner_hidden: int = 128
    emission_dim: int = 256
    var_floor: float = VARIANCE_FLOOR


@dataclass
class GaussianBelief:
    """Diagonal Gaussian; ``mean`` and ``var`` share shape (..., latent_dim)."""

    mean: torch.Tensor
    var: torch.Tensor

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        return sample_latent(self, noise)

    def index(self, idx) -> "GaussianBelief":
        return GaussianBelief(self.mean[idx], self.var[idx])


@dataclass
class ElboBreakdown:
    reconstruction_term: torch.Tensor  # per sequence, (B,)
    kl_term: torch.Tensor  # per sequence, (B,)
    observed_visits: torch.Tensor  # per sequence count of visits in the reconstruction term

    @property
    def negative_elbo(self) -> torch.Tensor:
        return self.reconstruction_term + self.kl_term


def positive_variance(raw: torch.Tensor, floor: float = VARIANCE_FLOOR) -> torch.Tensor:
    return F.softplus(raw) + floor


def _inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def sample_latent(belief: GaussianBelief, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mean + sqrt(var) * noise``."""
    return belief.mean + belief.var.sqrt() * noise


def kl_gaussian(q: GaussianBelief, p: GaussianBelief) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    ratio = q.var / p.var
    term = ratio + (q.mean - p.mean) ** 2 / p.var - 1.0 - torch.log(ratio)
    return 0.5 * term.sum(dim=-1)


class GatedTransition(nn.Module):
    """Prior p(z_t | z_{t-1}): gated mix of a linear and a ReLU map of the previous state."""

    def __init__(self, latent_dim: int, var_floor: float = VARIANCE_FLOOR):
        super().__init__()
        self.var_floor = var_floor
        self.gate = nn.Linear(latent_dim, latent_dim)
        self.trans = nn.Linear(latent_dim, latent_dim)
        self.lin = nn.Linear(latent_dim, latent_dim)
        self.var_head = nn.Linear(latent_dim, latent_dim)
        with torch.no_grad():
            self.lin.weight.copy_(torch.eye(latent_dim))
            self.lin.bias.zero_()

    def forward(self, z_prev: torch.Tensor) -> GaussianBelief:
        if not torch.isfinite(z_prev).all():
            raise ValueError("transition_prior received a non-finite state")
        g = torch.sigmoid(self.gate(z_prev))
        z_tilde = F.relu(self.trans(z_prev))
        mean = (1.0 - g) * self.lin(z_prev) + g * z_tilde
        return GaussianBelief(mean, positive_variance(self.var_head(z_tilde), self.var_floor))


class ContextEncoder(nn.Module):
    """Bidirectional multi-layer GRU over the fused sequence; h_t has size 2 * hidden."""

    def __init__(self, input_dim: int, hidden: int, layers: int):
        super().__init__()
        self.rnn = nn.GRU(input_dim, hidden, num_layers=layers, batch_first=True, bidirectional=True)

    def forward(self, fused: torch.Tensor, any_data: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = torch.where(any_data.unsqueeze(-1), fused, torch.zeros((), dtype=fused.dtype))
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.rnn(packed)
        h, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=fused.shape[1])
        return h


class PosteriorCombiner(nn.Module):
    """q(z_t | z_{t-1}, h_t) from an MLP on the concatenated inputs."""

    def __init__(self, latent_dim: int, context_dim: int, hidden: int, var_floor: float = VARIANCE_FLOOR):
        super().__init__()
        self.var_floor = var_floor
        self.hidden = nn.Linear(latent_dim + context_dim, hidden)
        self.to_mean = nn.Linear(hidden, latent_dim)
        self.to_var = nn.Linear(hidden, latent_dim)

    def forward(self, z_prev: torch.Tensor, h: torch.Tensor) -> GaussianBelief:
        a = torch.tanh(self.hidden(torch.cat([z_prev, h], dim=-1)))
        return GaussianBelief(self.to_mean(a), positive_variance(self.to_var(a), self.var_floor))


class Emitter(nn.Module):
    """3-layer MLP latent -> fused space, then a linear MMSE projection."""

    def __init__(self, latent_dim: int, emission_dim: int, output_dim: int):
        super().__init__()
        self.l1 = nn.Linear(latent_dim, emission_dim)
        self.l2 = nn.Linear(emission_dim, emission_dim)
        self.l3 = nn.Linear(emission_dim, output_dim)
        self.proj = nn.Linear(output_dim, 1)

    def forward(self, z: torch.Tensor):
        recon = self.l3(F.relu(self.l2(F.relu(self.l1(z)))))
        return recon, self.proj(recon).squeeze(-1)


@dataclass
class ForecastResult:
    samples: torch.Tensor  # (S, ..., horizon) emitted MMSE predictions (model units)
    mean: torch.Tensor
    lower: torch.Tensor
    upper: torch.Tensor


class DeepMarkovModel(nn.Module):
    def __init__(self, config: DMMConfig | None = None):
        super().__init__()
        # stop-gradient on the reconstruction target; switched off only to
        # gradient-check the objective as a plain function of the parameters
        self.detach_target = True
        self.config = c = config or DMMConfig()
        self.transition = GatedTransition(c.latent_dim, c.var_floor)
        self.context = ContextEncoder(c.input_dim, c.rnn_hidden, c.rnn_layers)
        self.combiner = PosteriorCombiner(c.latent_dim, 2 * c.rnn_hidden, c.combiner_hidden, c.var_floor)
        self.emitter = Emitter(c.latent_dim, c.emission_dim, c.input_dim)
        self.prior_mean = nn.Parameter(torch.zeros(c.latent_dim))
        self.prior_raw_var = nn.Parameter(torch.full((c.latent_dim,), _inverse_softplus(1.0 - c.var_floor)))
        self.z_q_0 = nn.Parameter(torch.zeros(c.latent_dim))

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def initial_prior(self, batch_shape=()) -> GaussianBelief:
        var = positive_variance(self.prior_raw_var, self.config.var_floor)
        return GaussianBelief(
            self.prior_mean.expand(*batch_shape, -1), var.expand(*batch_shape, -1)
        )

    def posterior_chain(self, fused, any_data, lengths, noise=None):
        """Run the combiner along each sequence.

        With ``noise`` (B, T, latent) the chain is driven by reparameterized
        samples; with ``noise=None`` by posterior means. Returns per-step
        beliefs and latent values, each stacked on dim 1.
        """
        h = self.context(fused, any_data, lengths)
        b, t_max, _ = fused.shape
        z_prev = self.z_q_0.expand(b, -1)
        means, vars_, zs = [], [], []
        for t in range(t_max):
            q = self.combiner(z_prev, h[:, t])
            z = q.mean if noise is None else q.sample(noise[:, t])
            means.append(q.mean)
            vars_.append(q.var)
            zs.append(z)
            z_prev = z
        return GaussianBelief(torch.stack(means, 1), torch.stack(vars_, 1)), torch.stack(zs, 1)

    def elbo(self, fused, any_data, lengths, noise=None) -> ElboBreakdown:
        """Per-sequence reconstruction error and KL chain.

        Reconstruction is the mean squared error over fused dimensions
        (against a detached target), summed over valid visits that carried
        data; the KL term covers every valid visit.
        """
        valid = torch.arange(fused.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
        q, z = self.posterior_chain(fused, any_data, lengths, noise)
        p0 = self.initial_prior((fused.shape[0], 1))
        p_rest = self.transition(z[:, :-1])
        p = GaussianBelief(torch.cat([p0.mean, p_rest.mean], 1), torch.cat([p0.var, p_rest.var], 1))
        kl = kl_gaussian(q, p)
        recon, _ = self.emitter(z)
        # the target is not back-propagated into: otherwise the encoder can
        # shrink the fused vectors toward a trivially reconstructible constant
        target = fused.detach() if self.detach_target else fused
        sq = ((recon - target) ** 2).mean(dim=-1)
        observed = valid & any_data
        zero = torch.zeros((), dtype=fused.dtype)
        return ElboBreakdown(
            reconstruction_term=torch.where(observed, sq, zero).sum(dim=1),
            kl_term=torch.where(valid, kl, zero).sum(dim=1),
            observed_visits=observed.sum(dim=1),
        )

    def last_posterior(self, fused, any_data, lengths) -> GaussianBelief:
        """Posterior belief at each sequence's last valid step (mean-driven chain)."""
        q, _ = self.posterior_chain(fused, any_data, lengths)
        idx = torch.arange(fused.shape[0])
        return GaussianBelief(q.mean[idx, lengths - 1], q.var[idx, lengths - 1])

    def mean_rollout(self, z: torch.Tensor, steps: int) -> torch.Tensor:
        """MMSE predictions (..., steps) along the transition-mean path from ``z``."""
        preds = []
        for _ in range(steps):
            z = self.transition(z).mean
            preds.append(self.emitter(z)[1])
        return torch.stack(preds, -1)

    def forecast(self, belief: GaussianBelief, horizon_steps: int, num_samples: int,
                 generator: torch.Generator | None = None) -> ForecastResult:
        """Monte-Carlo rollout of the transition prior from a posterior belief."""
        if horizon_steps < 1 or num_samples < 1:
            raise ValueError("need horizon_steps >= 1 and num_samples >= 1")
        shape = (num_samples,) + tuple(belief.mean.shape)
        dtype = belief.mean.dtype

        def noise():
            return torch.randn(shape, generator=generator, dtype=dtype)

        z = belief.sample(noise())
        preds = []
        for _ in range(horizon_steps):
            z = self.transition(z).sample(noise())
            preds.append(self.emitter(z)[1])
        samples = torch.stack(preds, -1)
        lo, hi = quantile_interval(samples)
        return ForecastResult(samples, samples.mean(0), lo, hi)


def quantile_interval(samples: torch.Tensor, level: float = 0.95):
    """Empirical (1-level)/2 and (1+level)/2 quantiles over the sample axis (linear interpolation)."""
    a = samples.detach().cpu().numpy()
    lo = np.quantile(a, (1.0 - level) / 2.0, axis=0)
    hi = np.quantile(a, (1.0 + level) / 2.0, axis=0)
    return torch.as_tensor(lo, dtype=samples.dtype), torch.as_tensor(hi, dtype=samples.dtype)


def predict_progression_probability(samples, baseline_mmse, threshold=3.0, window_months=36.0,
                                    step_months=None, history_min=None) -> float:
    """Fraction of sampled trajectories whose decline from baseline exceeds ``threshold``.

    ``samples``: (S, steps) MMSE trajectories; ``step_months`` gives each
    column's month (columns past the window are ignored). ``history_min``
    is the lowest already-observed follow-up MMSE inside the window, if any.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if step_months is not None:
        keep = np.asarray(step_months, dtype=float) <= window_months
        s = s[:, keep]
    lowest = s.min(axis=1) if s.shape[1] else np.full(s.shape[0], np.inf)
    if history_min is not None:
        lowest = np.minimum(lowest, history_min)
    return float(np.mean((baseline_mmse - lowest) > threshold))
