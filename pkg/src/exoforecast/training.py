"""Optimization loop, cosine schedule, early stopping and evaluation metrics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Scaler, WindowSample
from .model import ExoModel

MAPE_GUARD = 1e-8


@dataclass
class MetricsRecord:
    """MAE / RMSE / MAPE(%) / MRE(%) over one prediction set."""

    mae: float
    rmse: float
    mape: float   # percent; NaN when every |y| is below the guard
    mre: float    # percent; NaN when sum |y| is zero
    count: int

    def to_dict(self) -> dict:
        def none_if_nan(v):
            return None if math.isnan(v) else v

        return {"mae": self.mae, "rmse": self.rmse,
                "mape": none_if_nan(self.mape), "mre": none_if_nan(self.mre),
                "count": self.count}


def metrics(y, y_hat) -> MetricsRecord:
    """Evaluate the four error metrics on flattened prediction pairs."""
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("metrics require at least one observation")
    if y.size != y_hat.size:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    abs_err = np.abs(y - y_hat)
    mae = float(abs_err.mean())
    rmse = float(np.sqrt(((y - y_hat) ** 2).mean()))
    denom = float(np.abs(y).sum())
    mre = float("nan") if denom == 0.0 else 100.0 * float(abs_err.sum()) / denom
    keep = np.abs(y) >= MAPE_GUARD
    mape = float("nan") if not keep.any() else \
        100.0 * float((abs_err[keep] / np.abs(y[keep])).mean())
    return MetricsRecord(mae=mae, rmse=rmse, mape=mape, mre=mre, count=int(y.size))


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 512
    lr_max: float = 1e-2
    lr_min: float = 1e-7
    weight_decay: float = 1e-4
    patience: int = 30
    seed: int = 0
    loss: str = "mae"            # "mae" | "mse"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_min >= self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.loss not in ("mae", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Annealed rate: lr_max at epoch 0 down to lr_min at the final epoch."""
    last = config.epochs - 1
    if last <= 0:
        return config.lr_max
    span = config.lr_max - config.lr_min
    return config.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * epoch / last))


class AdamWState:
    """First/second moments and step counter, keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               betas: tuple = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay update from the accumulated gradients."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
        m = state.m.setdefault(name, np.zeros_like(p.values))
        v = state.v.setdefault(name, np.zeros_like(p.values))
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.values = (p.values
                    - lr * m_hat / (np.sqrt(v_hat) + eps)
                    - lr * weight_decay * p.values)


class EarlyStopper:
    """Strict-improvement early stopping on a monitored value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: Optional[int] = None
        self.stale = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record one epoch; returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def stack_samples(samples: Sequence[WindowSample]):
    """Stack windows into batched (B, N, T, F) arrays."""
    x = np.stack([s.x for s in samples])
    e_p = np.stack([s.e_past for s in samples])
    e_f = np.stack([s.e_future for s in samples])
    y = np.stack([s.y for s in samples])
    return x, e_p, e_f, y


def _loss_tensor(pred: Tensor, target: np.ndarray, kind: str) -> Tensor:
    diff = ad.sub(pred, Tensor(target))
    if kind == "mse":
        return ad.mean(ad.mul(diff, diff))
    return ad.mean(ad.absolute(diff))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)   # per-epoch loss / lr / val MAE
    best_epoch: int = 0
    best_val_mae: float = math.inf
    epoch_seconds: list = field(default_factory=list)  # wall clock, not archived
    stopped_early: bool = False


def train(model: ExoModel, train_samples: Sequence[WindowSample],
          val_samples: Sequence[WindowSample], scaler: Scaler,
          target_channel: int, config: TrainConfig) -> TrainResult:
    """Mini-batch AdamW training with cosine annealing and early stopping.

    Loss is computed on normalized targets; validation MAE is tracked in
    denormalized units and the best-validation parameters are restored on
    exit. Fully reproducible for a fixed (seed, config, data).
    """
    if not train_samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(config.seed)
    x_all, ep_all, ef_all, y_all = stack_samples(train_samples)
    xv, epv, efv, yv = stack_samples(val_samples)
    yv_true = scaler.inverse_channel(yv, target_channel)
    n = len(train_samples)
    batch = min(config.batch_size, max(1, math.ceil(n / 2)))
    params = model.parameters()
    state = AdamWState()
    stopper = EarlyStopper(config.patience)
    result = TrainResult()
    best_values: dict[str, np.ndarray] = {k: t.values.copy()
                                          for k, t in params.items()}
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = cosine_lr(epoch, config)
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n, batch):
            sel = order[lo:lo + batch]
            model.zero_grad()
            with Tape() as tape:
                pred, _ = model.forward(x_all[sel], ep_all[sel], ef_all[sel],
                                        train=True, rng=rng)
                loss = _loss_tensor(pred, y_all[sel], config.loss)
            loss_val = float(loss.values)
            if not math.isfinite(loss_val):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch + 1}, batch {n_batches + 1}")
            tape.backward(loss)
            adamw_step(params, state, lr, config.betas, config.eps,
                       config.weight_decay)
            epoch_loss += loss_val
            n_batches += 1
        pred_val = model.predict(xv, epv, efv)
        val_mae = metrics(yv_true,
                          scaler.inverse_channel(pred_val, target_channel)).mae
        stop = stopper.update(val_mae, epoch)
        if stopper.best_epoch == epoch:
            best_values = {k: t.values.copy() for k, t in params.items()}
        result.history.append({
            "epoch": epoch + 1,
            "loss": epoch_loss / max(n_batches, 1),
            "lr": lr,
            "val_mae": val_mae,
        })
        result.epoch_seconds.append(time.perf_counter() - started)
        if stop:
            result.stopped_early = True
            break
    for name, tensor in params.items():
        tensor.values = best_values[name]
    result.best_epoch = (stopper.best_epoch or 0) + 1
    result.best_val_mae = stopper.best
    return result


def evaluate(model, samples: Sequence[WindowSample], scaler: Scaler,
             target_channel: int, days: int = 1,
             t_future: Optional[int] = None) -> MetricsRecord:
    """Denormalized metrics over a 1-day forecast or a multi-day rollout.

    For ``days > 1`` the samples must come from ``make_rollout_windows``:
    the model's forecast is appended to the endogenous history while the
    true exogenous channels advance day by day.
    """
    if not samples:
        raise ValueError("no evaluation samples")
    x, e_p, e_f, y = stack_samples(samples)
    if days == 1:
        pred = model.predict(x, e_p, e_f)
    else:
        if t_future is None:
            raise ValueError("multi-day evaluation needs t_future")
        t_past = x.shape[2]
        if e_f.shape[2] != days * t_future:
            raise ValueError(
                f"samples carry {e_f.shape[2]} future steps, expected "
                f"{days * t_future}; build them with make_rollout_windows")
        history = x
        chunks = []
        for d in range(days):
            lo = d * t_future
            e_p_day = e_p[:, :, lo:lo + t_past, :]
            e_f_day = e_f[:, :, lo:lo + t_future, :]
            pred_day = model.predict(history[:, :, -t_past:, :], e_p_day, e_f_day)
            chunks.append(pred_day)
            history = np.concatenate([history, pred_day], axis=2)
        pred = np.concatenate(chunks, axis=2)
    return metrics(scaler.inverse_channel(y, target_channel),
                   scaler.inverse_channel(pred, target_channel))
