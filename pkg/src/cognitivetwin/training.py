"""Optimization of the network: composite loss, schedule, early stopping,
checkpoints, and a finite-difference gradient check."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import Batch, CognitiveTwinNet

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ckpt/v1"


class NumericalError(RuntimeError):
    """Non-finite loss or gradients during optimization."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupted or incompatible checkpoint."""


@dataclass
class TrainConfig:
    learning_rate: float = 8e-4
    weight_decay: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 150
    early_stop_patience: int = 10
    grad_clip_max_norm: float = 1.0
    dmm_loss_scale: float = 0.1
    t_max: int = 150
    lr_min: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs",
                     "early_stop_patience", "grad_clip_max_norm", "dmm_loss_scale", "t_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be non-negative")
        if self.early_stop_patience >= self.max_epochs:
            logger.debug("patience %d >= max_epochs %d: early stopping never triggers",
                         self.early_stop_patience, self.max_epochs)


@dataclass
class LossBreakdown:
    task_mse: torch.Tensor
    dmm_negative_elbo: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("task_mse", "dmm_negative_elbo", "total")}


def combine_losses(task_mse, dmm_negative_elbo, scale: float = 0.1) -> LossBreakdown:
    return LossBreakdown(task_mse, dmm_negative_elbo, task_mse + scale * dmm_negative_elbo)


def draw_noise(net: CognitiveTwinNet, batch: Batch, generator: torch.Generator | None, dtype):
    if not net.uses_dmm or generator is None:
        return None
    t = batch.xs[0].shape[1]
    return torch.randn(batch.size, t, net.dmm.latent_dim, generator=generator, dtype=dtype)


def composite_loss(net: CognitiveTwinNet, batch: Batch, generator: torch.Generator | None = None,
                   scale: float = 0.1, noise: torch.Tensor | None = None) -> LossBreakdown:
    """Task MSE over patients with targets plus ``scale`` x mean negative ELBO.

    Reparameterization noise comes from ``noise`` or ``generator``; with
    neither, the posterior chain follows its means.
    """
    if batch.size == 0:
        raise ValueError("composite_loss needs a non-empty batch")
    dtype = batch.xs[0].dtype
    if noise is None:
        noise = draw_noise(net, batch, generator, dtype)
    out = net(batch, noise)
    zero = torch.zeros((), dtype=dtype)
    has = batch.has_target
    if has.any():
        task = ((out.prediction - batch.target)[has] ** 2).mean()
    else:
        task = zero
    neg_elbo = out.elbo.negative_elbo.mean() if out.elbo is not None else zero
    return combine_losses(task, neg_elbo, scale)


def cosine_lr(epoch_index: int, lr0: float, t_max: int, lr_min: float = 0.0) -> float:
    """Closed-form cosine annealing; ``epoch_index`` counts from 0."""
    return lr_min + (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch_index / t_max)) / 2.0


class EarlyStopping:
    """Tracks the best validation loss; ``step`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def state_dict(self) -> dict:
        return {"best": self.best, "best_epoch": self.best_epoch, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, d: dict):
        self.best, self.best_epoch, self.bad_epochs = d["best"], d["best_epoch"], d["bad_epochs"]


@dataclass
class FitResult:
    best_state: dict
    best_epoch: int
    best_val_loss: float
    history: list
    epoch: int  # last completed epoch
    last_state: dict = field(repr=False, default=None)
    optimizer_state: dict = field(repr=False, default=None)
    stopper_state: dict = field(repr=False, default=None)


def validation_loss(net: CognitiveTwinNet, batch: Batch, config: TrainConfig) -> LossBreakdown:
    """Dropout-off loss with a fixed noise stream, so it is reproducible across epochs."""
    was_training = net.training
    net.eval()
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        loss = composite_loss(net, batch, gen, config.dmm_loss_scale)
    net.train(was_training)
    return loss


def global_grad_norm(parameters) -> float:
    norms = [p.grad.detach().norm() for p in parameters if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


def fit(net: CognitiveTwinNet, train: Batch, validation: Batch, config: TrainConfig,
        resume: dict | None = None, on_epoch=None) -> FitResult:
    """AdamW + clipping + cosine schedule + early stopping; returns the best-validation state.

    Epoch ``e`` (1-based) seeds shuffling, dropout and reparameterization
    noise with ``config.seed + e``. ``resume`` is the dict written by
    :func:`save_checkpoint` for a previous run.
    """
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    stopper = EarlyStopping(config.early_stop_patience)
    history = []
    start = 1
    best_state = copy.deepcopy(net.state_dict())
    if resume is not None:
        net.load_state_dict(resume["last_state"])
        opt.load_state_dict(resume["optimizer"])
        stopper.load_state_dict(resume["stopper"])
        history = list(resume["history"])
        best_state = resume["state_dict"]
        start = int(resume["epoch"]) + 1
        if stopper.bad_epochs >= config.early_stop_patience:
            start = config.max_epochs + 1
    epoch = start - 1
    for epoch in range(start, config.max_epochs + 1):
        lr = cosine_lr(epoch - 1, config.learning_rate, config.t_max, config.lr_min)
        for group in opt.param_groups:
            group["lr"] = lr
        torch.manual_seed(config.seed + epoch)
        gen = torch.Generator().manual_seed(config.seed + epoch)
        order = np.random.default_rng(config.seed + epoch).permutation(train.size)
        net.train()
        total, seen = 0.0, 0
        for b, start_i in enumerate(range(0, train.size, config.batch_size)):
            sub = train.subset(order[start_i:start_i + config.batch_size])
            loss = composite_loss(net, sub, gen, config.dmm_loss_scale)
            if not torch.isfinite(loss.total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            norm = torch.nn.utils.clip_grad_norm_(params, config.grad_clip_max_norm)
            if not torch.isfinite(norm):
                raise NumericalError(f"non-finite gradient norm at epoch {epoch}, batch {b}")
            opt.step()
            total += float(loss.total.detach()) * sub.size
            seen += sub.size
        val = validation_loss(net, validation, config)
        record = {
            "epoch": epoch, "train_total": total / seen, "val_total": float(val.total), "lr": lr,
            "val_task_mse": float(val.task_mse), "val_dmm_negative_elbo": float(val.dmm_negative_elbo),
        }
        history.append(record)
        logger.info("epoch %d train %.4f val %.4f lr %.2e", epoch, record["train_total"],
                    record["val_total"], lr)
        improved_before = stopper.best
        stop = stopper.step(epoch, record["val_total"])
        if stopper.best < improved_before:
            best_state = copy.deepcopy(net.state_dict())
        if on_epoch is not None:
            on_epoch(record)
        if stop:
            break
    if stopper.best_epoch is None:
        raise ValueError("no epochs were run")
    return FitResult(
        best_state=best_state, best_epoch=stopper.best_epoch, best_val_loss=stopper.best,
        history=history, epoch=epoch, last_state=copy.deepcopy(net.state_dict()),
        optimizer_state=copy.deepcopy(opt.state_dict()), stopper_state=stopper.state_dict(),
    )


# ---------------------------------------------------------------------------
# Checkpoints


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, *, state_dict, config: dict, normalization: dict, epoch: int,
                    best_val_loss: float, history: list, last_state=None, optimizer=None,
                    stopper=None, extra: dict | None = None) -> None:
    """Write a ``ckpt/v1`` file.

    Layout: a ``ckpt/v1`` header line, the hex SHA-256 of the body on the
    second line, then the torch-serialized body. Every byte after the
    header is covered by the digest.
    """
    payload = {
        "tensors": state_dict, "last_state": last_state or state_dict, "optimizer": optimizer,
        "stopper": stopper, "meta": {
            "format": CHECKPOINT_FORMAT, "config": config, "config_hash": config_hash(config),
            "normalization": normalization, "epoch": epoch, "best_val_loss": best_val_loss,
            "history": history, "extra": extra or {},
        },
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_FORMAT.encode() + b"\n")
        fh.write(hashlib.sha256(body).hexdigest().encode() + b"\n")
        fh.write(body)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, _, rest = raw.partition(b"\n")
    digest, _, body = rest.partition(b"\n")
    if header != CHECKPOINT_FORMAT.encode():
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if hashlib.sha256(body).hexdigest().encode() != digest:
        raise CheckpointError(f"{path}: integrity check failed (digest mismatch)")
    try:
        payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)
        meta = payload["meta"]
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc.__class__.__name__})") from exc
    if meta.get("config_hash") != config_hash(meta.get("config")):
        raise CheckpointError(f"{path}: config hash mismatch")
    return {
        "state_dict": payload["tensors"], "last_state": payload["last_state"],
        "optimizer": payload["optimizer"], "stopper": payload["stopper"], **meta,
    }


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    max_relative_error: dict  # block name -> max relative error over checked entries
    tolerance: float
    checked_entries: int

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_relative_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values()) if self.max_relative_error else 0.0


def gradient_check(loss_fn, params: dict, eps: float = 1e-6, tolerance: float = 1e-4,
                   floor: float = 1e-6, max_entries: int | None = None, grad_fn=None,
                   seed: int = 0) -> GradCheckReport:
    """Compare gradients of ``loss_fn()`` against central finite differences.

    ``params`` maps block names to leaf tensors (double precision expected).
    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    ``grad_fn`` overrides the analytic gradients (used for negative
    controls); ``max_entries`` subsamples large blocks.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    if grad_fn is None:
        loss = loss_fn()
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    else:
        grads = grad_fn()
    grads = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(tensors, grads)]
    rng = np.random.default_rng(seed)
    errors, count = {}, 0
    with torch.no_grad():
        for name, t, g in zip(names, tensors, grads):
            flat, gflat = t.view(-1), g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), max_entries, replace=False)
            worst = 0.0
            for j in idx:
                orig = flat[j].item()
                flat[j] = orig + eps
                f_plus = float(loss_fn())
                flat[j] = orig - eps
                f_minus = float(loss_fn())
                flat[j] = orig
                num = (f_plus - f_minus) / (2 * eps)
                ana = float(gflat[j])
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, rel)
            errors[name] = worst
            count += len(idx)
    return GradCheckReport(errors, tolerance, count)
