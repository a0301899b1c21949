"""Network assembly (fusion + DMM + task head) and tensor batching of cohorts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import MODALITIES, MODALITY_SLICES, N_FEATURES
from .dmm import DMMConfig, DeepMarkovModel, ElboBreakdown
from .fusion import FusionConfig, FusionEncoder

VARIANTS = ("full", "baseline", "no_dmm", "no_genetics", "cognitive_only")

# modalities kept visible to the network, per ablation variant
VARIANT_MODALITIES = {
    "full": MODALITIES,
    "baseline": MODALITIES,
    "no_dmm": MODALITIES,
    "no_genetics": ("cognitive", "biomarker", "imaging"),
    "cognitive_only": ("cognitive",),
}


def check_variant(tag: str) -> str:
    if tag not in VARIANTS:
        raise ValueError(f"unknown ablation variant {tag!r}; valid tags: {', '.join(VARIANTS)}")
    return tag


@dataclass
class Batch:
    """Padded tensors for a list of (normalized) patients.

    ``hist_lengths`` counts the visits the forecaster may see; ``steps`` is the
    number of grid steps from the last of them to the forecast target.
    """

    xs: list
    masks: list
    positions: torch.Tensor  # (B, T) visit index
    lengths: torch.Tensor  # (B,)
    hist_lengths: torch.Tensor  # (B,)
    steps: torch.Tensor  # (B,)
    target: torch.Tensor  # (B,) normalized target MMSE, 0 where absent
    has_target: torch.Tensor  # (B,) bool
    flat: torch.Tensor = field(default=None)  # (B, T, 64) values + masks, for the baseline

    @property
    def size(self) -> int:
        return int(self.lengths.shape[0])

    def subset(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        t = int(self.lengths[idx].max())
        return Batch(
            xs=[x[idx, :t] for x in self.xs], masks=[k[idx, :t] for k in self.masks],
            positions=self.positions[idx, :t], lengths=self.lengths[idx],
            hist_lengths=self.hist_lengths[idx], steps=self.steps[idx],
            target=self.target[idx], has_target=self.has_target[idx],
            flat=self.flat[idx, :t],
        )


def collate(patients, hist_lengths, steps, targets, keep_modalities=MODALITIES, dtype=torch.float32) -> Batch:
    """Pad normalized patients into a :class:`Batch`.

    Modalities outside ``keep_modalities`` are presented fully masked.
    """
    b = len(patients)
    t_max = max(len(p.visits) for p in patients)
    values = np.zeros((b, t_max, N_FEATURES))
    mask = np.zeros((b, t_max, N_FEATURES), dtype=bool)
    for i, p in enumerate(patients):
        for t, v in enumerate(p.visits):
            values[i, t] = v.values
            mask[i, t] = v.mask
    for m in MODALITIES:
        if m not in keep_modalities:
            mask[..., MODALITY_SLICES[m]] = False
    values = np.where(mask, values, 0.0)
    vt = torch.as_tensor(values, dtype=dtype)
    mt = torch.as_tensor(mask)
    target = np.array([np.nan if y is None else y for y in targets], dtype=float)
    has = ~np.isnan(target)
    return Batch(
        xs=[vt[..., MODALITY_SLICES[m]] for m in MODALITIES],
        masks=[mt[..., MODALITY_SLICES[m]] for m in MODALITIES],
        positions=torch.arange(t_max).expand(b, t_max),
        lengths=torch.tensor([len(p.visits) for p in patients]),
        hist_lengths=torch.as_tensor(np.asarray(hist_lengths), dtype=torch.long),
        steps=torch.as_tensor(np.asarray(steps), dtype=torch.long),
        target=torch.as_tensor(np.where(has, target, 0.0), dtype=dtype),
        has_target=torch.as_tensor(has),
        flat=torch.cat([vt, mt.to(dtype)], dim=-1),
    )


@dataclass
class NetConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    latent_dim: int = 64
    rnn_hidden: int = 128
    rnn_layers: int = 3
    emission_dim: int = 256
    head_hidden: int = 128
    variant: str = "full"

    def dmm_config(self) -> DMMConfig:
        return DMMConfig(
            input_dim=self.fusion.d_model, latent_dim=self.latent_dim, rnn_hidden=self.rnn_hidden,
            rnn_layers=self.rnn_layers, combiner_hidden=self.rnn_hidden, emission_dim=self.emission_dim,
        )


@dataclass
class NetOutput:
    prediction: torch.Tensor  # (B,) normalized MMSE at the forecast target
    elbo: ElboBreakdown | None


class CognitiveTwinNet(nn.Module):
    """Variant-switched network.

    * DMM variants (full / no_genetics / cognitive_only): fusion -> DMM;
      the prediction rolls the transition mean from the last history posterior.
    * ``no_dmm``: feed-forward head on the fused vector of the last history visit.
    * ``baseline``: concatenated raw features and masks into one GRU regressor.
    """

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = c = config or NetConfig()
        check_variant(c.variant)
        self.variant = c.variant
        if c.variant == "baseline":
            self.rnn = nn.GRU(2 * N_FEATURES, c.rnn_hidden, batch_first=True)
            self.head = nn.Linear(c.rnn_hidden, 1)
            return
        self.fusion = FusionEncoder(c.fusion)
        if c.variant == "no_dmm":
            self.head = nn.Sequential(
                nn.Linear(c.fusion.d_model, c.head_hidden), nn.ReLU(), nn.Linear(c.head_hidden, 1)
            )
        else:
            self.dmm = DeepMarkovModel(c.dmm_config())

    @property
    def uses_dmm(self) -> bool:
        return self.variant not in ("baseline", "no_dmm")

    def fuse(self, batch: Batch):
        return self.fusion(batch.xs, batch.masks, batch.positions)

    def forward(self, batch: Batch, noise: torch.Tensor | None = None, with_elbo: bool = True) -> NetOutput:
        idx = torch.arange(batch.size)
        last = batch.hist_lengths - 1
        if self.variant == "baseline":
            packed = nn.utils.rnn.pack_padded_sequence(
                batch.flat, batch.hist_lengths.cpu(), batch_first=True, enforce_sorted=False
            )
            _, h = self.rnn(packed)
            return NetOutput(self.head(h[-1]).squeeze(-1), None)
        fused, any_data = self.fuse(batch)
        if self.variant == "no_dmm":
            return NetOutput(self.head(fused[idx, last]).squeeze(-1), None)
        elbo = self.dmm.elbo(fused, any_data, batch.lengths, noise) if with_elbo else None
        belief = self.dmm.last_posterior(fused, any_data, batch.hist_lengths)
        max_steps = int(batch.steps.max())
        path = self.dmm.mean_rollout(belief.mean, max_steps)
        return NetOutput(path[idx, batch.steps - 1], elbo)

    def history_belief(self, batch: Batch):
        fused, any_data = self.fuse(batch)
        return self.dmm.last_posterior(fused, any_data, batch.hist_lengths)
