"""Semi-supervised training loop: Adam, fixed and one-cycle LR
schedules, chronological validation split, best-checkpoint selection,
and repeated-seed dispersion summaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .core import ParameterStore
from .model import STAutoencoder, compute_loss


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 0.001
    batch_size: int = 6
    T: int = 5
    schedule: str = "fixed"  # fixed | one_cycle
    max_lr: float = 0.001
    div_factor: float = 25.0
    final_div_factor: float = 100.0
    pct_start: float = 0.3
    val_fraction: float = 0.2
    lam: float = 0.003
    rho: float = 1e-7
    seed: int = 0

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    train_mse: float
    train_kl: float
    train_l2: float
    val_mse: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def lr_trace(self) -> list[float]:
        return [e.lr for e in self.epochs]

    def csv_rows(self) -> list[dict]:
        return [
            {
                "epoch": e.epoch,
                "train_mse": e.train_mse,
                "train_kl": e.train_kl,
                "train_l2": e.train_l2,
                "val_mse": e.val_mse,
                "lr": e.lr,
            }
            for e in self.epochs
        ]


def one_cycle_lr(
    step: int,
    total_steps: int,
    max_lr: float = 0.001,
    div_factor: float = 25.0,
    final_div_factor: float = 100.0,
    pct_start: float = 0.3,
) -> float:
    """Cosine-annealed rise from max_lr/div_factor to max_lr, then fall
    to initial_lr/final_div_factor.  Endpoints are exact."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    initial_lr = max_lr / div_factor
    min_lr = initial_lr / final_div_factor
    if total_steps == 1:
        return initial_lr
    up_steps = max(1, int(round(pct_start * (total_steps - 1))))
    if step <= up_steps:
        t = step / up_steps
        return initial_lr + (max_lr - initial_lr) * 0.5 * (1.0 - math.cos(math.pi * t))
    t = (step - up_steps) / (total_steps - 1 - up_steps)
    return min_lr + (max_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


def split_train_val(n_windows: int, val_fraction: float) -> tuple[slice, slice]:
    """Chronological split: validation is the last fraction, never shuffled in."""
    n_val = int(round(n_windows * val_fraction))
    n_val = min(max(n_val, 0), n_windows - 1) if n_windows > 1 else 0
    return slice(0, n_windows - n_val), slice(n_windows - n_val, n_windows)


def _validation_mse(model, windows, mask, batch_size) -> float:
    model.eval()
    losses = []
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            x = windows[i : i + batch_size]
            recon, (mu, logvar, _), _ = model(x, sample=False)
            parts = compute_loss(x, recon, mu, logvar, model, mask, lam=0.0, rho=0.0)
            losses.append(float(parts.mse) * len(x))
    return sum(losses) / max(len(windows), 1)


def _set_bn_mode(model: STAutoencoder) -> None:
    # BN running stats update only where the block's scale is trainable
    for bn, updating in model.bn_stats_modules():
        bn.train(updating)


def train(
    model: STAutoencoder,
    windows: np.ndarray,
    cfg: TrainConfig,
    valid_mask: np.ndarray,
) -> tuple[ParameterStore, TrainHistory]:
    """Train on (N, T, ...) windows; freeze flags must already be applied.

    Returns the best parameter store by validation MSE (ties broken by
    earliest epoch) and the per-epoch history.
    """
    torch.manual_seed(cfg.seed)
    x_all = torch.as_tensor(np.asarray(windows), dtype=torch.float32)
    mask = torch.as_tensor(np.asarray(valid_mask, dtype=bool))
    tr, va = split_train_val(len(x_all), cfg.val_fraction)
    x_train, x_val = x_all[tr], x_all[va]

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr) if params else None
    steps_per_epoch = max(1, math.ceil(len(x_train) / cfg.batch_size))
    total_steps = steps_per_epoch * max(cfg.epochs, 1)

    rng = np.random.default_rng(cfg.seed)
    eps_gen = torch.Generator().manual_seed(cfg.seed + 1)

    history = TrainHistory()
    best_val = math.inf
    best_store = model.to_store()
    if cfg.epochs == 0:
        history.best_epoch = -1
        return best_store, history

    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        _set_bn_mode(model)
        order = rng.permutation(len(x_train))
        sums = {"total": 0.0, "mse": 0.0, "kl": 0.0, "l2": 0.0}
        n_seen = 0
        lr_now = cfg.lr
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            x = x_train[idx]
            if cfg.schedule == "one_cycle":
                lr_now = one_cycle_lr(
                    step,
                    total_steps,
                    max_lr=cfg.max_lr,
                    div_factor=cfg.div_factor,
                    final_div_factor=cfg.final_div_factor,
                    pct_start=cfg.pct_start,
                )
            if optimizer is not None:
                for group in optimizer.param_groups:
                    group["lr"] = lr_now
            recon, (mu, logvar, _), _ = model(x, sample=True, generator=eps_gen)
            parts = compute_loss(
                x, recon, mu, logvar, model, mask, lam=cfg.lam, rho=cfg.rho
            )
            if not torch.isfinite(parts.total):
                raise RuntimeError(f"non-finite loss at epoch {epoch} step {step}")
            if optimizer is not None:
                optimizer.zero_grad()
                parts.total.backward()
                optimizer.step()
            n = len(x)
            sums["total"] += float(parts.total.detach()) * n
            sums["mse"] += float(parts.mse.detach()) * n
            sums["kl"] += float(parts.kl.detach()) * n
            sums["l2"] += float(parts.l2.detach()) * n
            n_seen += n
            step += 1

        val_mse = _validation_mse(model, x_val, mask, cfg.batch_size) if len(x_val) else math.nan
        record = EpochRecord(
            epoch=epoch,
            train_total=sums["total"] / n_seen,
            train_mse=sums["mse"] / n_seen,
            train_kl=sums["kl"] / n_seen,
            train_l2=sums["l2"] / n_seen,
            val_mse=val_mse,
            lr=lr_now,
        )
        history.epochs.append(record)
        score = val_mse if len(x_val) else record.train_mse
        if score < best_val:
            best_val = score
            best_store = model.to_store()
            history.best_epoch = epoch
    return best_store, history


@dataclass
class DispersionSummary:
    seeds: list[int]
    test_mse: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_mse))

    @property
    def min(self) -> float:
        return float(np.min(self.test_mse))

    @property
    def max(self) -> float:
        return float(np.max(self.test_mse))

    def rows(self) -> list[dict]:
        return [
            {"row": "avg", "test_mse": self.mean},
            {"row": "best", "test_mse": self.min},
        ]


def repeat_experiments(run_one, seeds: Sequence[int]) -> DispersionSummary:
    """Run ``run_one(seed) -> test_mse`` per seed; summarize dispersion."""
    if len(seeds) < 2:
        raise ValueError("need at least two seeds for a dispersion summary")
    results = [float(run_one(s)) for s in seeds]
    return DispersionSummary(list(seeds), results)
