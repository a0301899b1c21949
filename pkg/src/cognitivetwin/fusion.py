"""Multi-modal Transformer fusion: one fused vector per visit.

Each modality is embedded into a shared space, tagged with a learned
modality-type vector and the sinusoidal encoding of its visit index, mixed
by self-attention across the (present) modality tokens of the visit and
mean-pooled over those tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .data import MODALITY_DIMS


@dataclass
class FusionConfig:
    d_model: int = 256
    n_heads: int = 8
    n_layers: int = 4
    ff_dim: int = 512
    dropout: float = 0.15
    modality_dims: tuple = MODALITY_DIMS

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.modality_dims = tuple(self.modality_dims)


class ModalityEmbedder(nn.Module):
    """``LayerNorm(ReLU(W x + b))`` followed by dropout; zero when fully masked."""

    def __init__(self, in_dim: int, d_model: int, dropout: float = 0.0):
        super().__init__()
        self.in_dim = in_dim
        self.linear = nn.Linear(in_dim, d_model)
        self.norm = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim or mask.shape != x.shape:
            raise ValueError(f"expected modality dimension {self.in_dim}, got {tuple(x.shape)}")
        mask = mask.to(torch.bool)
        x = torch.where(mask, x, torch.zeros((), dtype=x.dtype))
        e = self.dropout(self.norm(F.relu(self.linear(x))))
        present = mask.any(dim=-1, keepdim=True)
        return torch.where(present, e, torch.zeros((), dtype=e.dtype))


class TypeEmbedding(nn.Module):
    def __init__(self, n_modalities: int, d_model: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_modalities, d_model) * 0.02)

    def forward(self, e: torch.Tensor, m: int) -> torch.Tensor:
        if not 0 <= m < self.weight.shape[0]:
            raise IndexError(f"modality index {m} out of range 0..{self.weight.shape[0] - 1}")
        return e + self.weight[m]


def sinusoidal_encoding(positions: torch.Tensor, d_model: int, dtype=None) -> torch.Tensor:
    """Standard base-10000 sinusoidal table evaluated at (integer) positions."""
    pos = positions.to(dtype or torch.get_default_dtype()).unsqueeze(-1)
    i = torch.arange(0, d_model, 2, dtype=pos.dtype)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=pos.dtype), i / d_model)
    pe = torch.zeros(*positions.shape, d_model, dtype=pos.dtype)
    pe[..., 0::2] = torch.sin(angle)
    pe[..., 1::2] = torch.cos(angle[..., : d_model // 2])
    return pe


def positional_encode(tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Add PE(visit index) to every token of that visit. ``tokens``: (..., n_tokens, d)."""
    pe = sinusoidal_encoding(positions, tokens.shape[-1], tokens.dtype)
    return tokens + pe.unsqueeze(-2)


class EncoderLayer(nn.Module):
    """Post-norm Transformer encoder layer with key masking of absent tokens."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.ff1 = nn.Linear(d_model, ff_dim)
        self.ff2 = nn.Linear(ff_dim, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop_attn = nn.Dropout(dropout)
        self.drop1 = nn.Dropout(dropout)
        self.drop2 = nn.Dropout(dropout)
        self.drop_ff = nn.Dropout(dropout)

    def attention(self, x: torch.Tensor, present: torch.Tensor) -> torch.Tensor:
        n, k, d = x.shape
        h = self.n_heads
        q, kk, v = self.qkv(x).view(n, k, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ kk.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~present[:, None, None, :], float("-inf"))
        attn = self.drop_attn(torch.softmax(scores, dim=-1))
        return self.out((attn @ v).transpose(1, 2).reshape(n, k, d))

    def forward(self, x: torch.Tensor, present: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.drop1(self.attention(x, present)))
        return self.norm2(x + self.drop2(self.ff2(self.drop_ff(F.relu(self.ff1(x))))))


class FusionEncoder(nn.Module):
    """Embed -> type-tag -> positional encode -> encoder stack -> masked mean pool."""

    def __init__(self, config: FusionConfig | None = None):
        super().__init__()
        self.config = config = config or FusionConfig()
        self.embedders = nn.ModuleList(
            ModalityEmbedder(dim, config.d_model, config.dropout) for dim in config.modality_dims
        )
        self.type_embedding = TypeEmbedding(len(config.modality_dims), config.d_model)
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.ff_dim, config.dropout)
            for _ in range(config.n_layers)
        )

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def tokens(self, xs, masks, positions):
        """Tagged, position-encoded modality tokens (N, M, d) and presence flags (N, M)."""
        toks = []
        for m, (emb, x, k) in enumerate(zip(self.embedders, xs, masks)):
            toks.append(self.type_embedding(emb(x, k), m))
        tokens = positional_encode(torch.stack(toks, dim=-2), positions)
        present = torch.stack([k.to(torch.bool).any(dim=-1) for k in masks], dim=-1)
        return tokens, present

    def fuse_tokens(self, tokens: torch.Tensor, present: torch.Tensor) -> torch.Tensor:
        """Encoder over the modality tokens of each visit, then mean over present tokens.

        Rows with no present token return the zero vector.
        """
        any_data = present.any(dim=-1)
        # rows without data attend over everything to stay finite; zeroed below
        safe = present | ~any_data.unsqueeze(-1)
        x = tokens
        for layer in self.layers:
            x = layer(x, safe)
        w = present.to(x.dtype)
        pooled = (x * w.unsqueeze(-1)).sum(dim=-2) / w.sum(dim=-1, keepdim=True).clamp(min=1.0)
        return torch.where(any_data.unsqueeze(-1), pooled, torch.zeros((), dtype=x.dtype))

    def forward(self, xs, masks, positions):
        """Fuse a flat or batched set of visits.

        ``xs``/``masks``: one tensor per modality shaped (..., dim_m);
        ``positions``: visit indices shaped (...). Returns fused (..., d) and
        the any-data flags (...).
        """
        lead = positions.shape
        xs = [x.reshape(-1, x.shape[-1]) for x in xs]
        masks = [k.reshape(-1, k.shape[-1]) for k in masks]
        tokens, present = self.tokens(xs, masks, positions.reshape(-1))
        fused = self.fuse_tokens(tokens, present)
        return fused.reshape(*lead, -1), present.any(dim=-1).reshape(lead)
