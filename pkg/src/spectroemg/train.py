"""Minibatch training with early stopping on validation accuracy.

Shuffling draws from a generator seeded by (run seed, epoch), so batch order
for any epoch is fixed regardless of how many epochs preceded it. The best
parameter snapshot by validation accuracy is restored at the end; if nothing
beats the freshly standardized starting point, that starting point wins and
the best epoch is reported as 0.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, InputError, NumericalError
from .ingest import _atomic_write_bytes
from .model import SpectroEmgNet
from .model import save as save_model
from .nncore import adam_step, init_adam, init_sgd, sgd_step, softmax_xent

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    class_weighting: bool = False
    optimizer: str = "adam"
    momentum: float = 0.9

    def validate(self) -> None:
        if self.lr < 0:
            raise InputError("learning rate must be >= 0")
        if self.batch_size < 2:
            raise InputError("batch size must be at least 2 (batch statistics)")
        if self.max_epochs < 1:
            raise InputError("max epochs must be at least 1")
        if self.patience < 1:
            raise InputError("patience must be at least 1")
        if self.optimizer not in OPTIMIZERS:
            raise InputError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError("momentum must lie in [0, 1)")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    best_val_loss: float = 0.0
    wall_time_s: float = 0.0
    stopped_early: bool = False


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing 1-record batch merges into its
    neighbor so batch statistics stay defined."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        del batches[-1]
    return batches


def standardization_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over every record and cell, std floored at 1e-6."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=(0, 1, 2))
    std = np.maximum(x.std(axis=(0, 1, 2)), 1e-6)
    return mean, std


def _check_split(name: str, x, y, input_shape, n_classes: int):
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 4 or x.shape[1:] != tuple(input_shape):
        raise DatasetError(
            f"{name} features must have shape (n, {', '.join(map(str, input_shape))}), "
            f"got {x.shape}")
    if y.shape != (x.shape[0],):
        raise DatasetError(f"{name} needs exactly one label per record")
    if x.shape[0] == 0:
        raise DatasetError(f"{name} split is empty")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise DatasetError(f"{name} labels must lie in [0, {n_classes})")
    finite = np.isfinite(x).all(axis=(1, 2, 3))
    if not finite.all():
        bad = np.flatnonzero(~finite)[:5].tolist()
        raise DatasetError(f"{name} records {bad} contain non-finite values")
    return x, y


def evaluate_split(model: SpectroEmgNet, x: np.ndarray, y: np.ndarray,
                   batch_size: int = 64) -> tuple[float, float]:
    """Loss and accuracy in inference mode, computed in batches."""
    logits = np.concatenate([model.forward(x[i:i + batch_size], train=False)
                             for i in range(0, x.shape[0], batch_size)])
    loss, probs, _ = softmax_xent(logits, y)
    acc = float((np.argmax(probs, axis=1) == y).mean())
    return float(loss), acc


def train(model: SpectroEmgNet, train_x, train_y, val_x, val_y,
          config: TrainConfig | None = None, *, checkpoint_dir: str | None = None,
          checkpoint_every: int = 0) -> TrainResult:
    config = config if config is not None else TrainConfig()
    config.validate()
    shape = model.config.input_shape
    n_classes = model.config.n_classes
    train_x, train_y = _check_split("train", train_x, train_y, shape, n_classes)
    val_x, val_y = _check_split("val", val_x, val_y, shape, n_classes)
    n = train_x.shape[0]
    if n < 2:
        raise DatasetError("training needs at least 2 records for batch statistics")

    weights = None
    if config.class_weighting:
        counts = np.bincount(train_y, minlength=n_classes)
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0).tolist()
            raise DatasetError(
                f"class weighting needs every class in the training split; missing {missing}")
        weights = n / (n_classes * counts.astype(np.float64))

    if model.config.standardize:
        mean, std = standardization_stats(train_x)
        model.set_standardization(mean, std)

    params = model.parameters()
    if config.optimizer == "adam":
        opt_state = init_adam(params, lr=config.lr)
        step = adam_step
    else:
        opt_state = init_sgd(params, lr=config.lr, momentum=config.momentum)
        step = sgd_step

    t0 = time.perf_counter()
    init_val_loss, init_val_acc = evaluate_split(model, val_x, val_y)
    init_snap = model.snapshot()

    tracked = None
    tracked_epoch = 0
    tracked_acc = -np.inf
    tracked_loss = np.inf
    stall = 0
    history: list[EpochStats] = []
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        ep_loss = 0.0
        ep_hits = 0
        for b_idx, batch in enumerate(make_batches(n, config.batch_size, rng)):
            by = train_y[batch]
            logits = model.forward(train_x[batch], train=True)
            sw = weights[by] if weights is not None else None
            loss, probs, grad = softmax_xent(logits, by, sample_weights=sw)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {b_idx}, "
                    f"records {batch[:5].tolist()}")
            model.backward(grad)
            step(params, model.grads(), opt_state)
            ep_loss += float(loss) * batch.size
            ep_hits += int((np.argmax(probs, axis=1) == by).sum())

        val_loss, val_acc = evaluate_split(model, val_x, val_y)
        history.append(EpochStats(epoch, ep_loss / n, ep_hits / n, val_loss, val_acc))

        if checkpoint_dir is not None and checkpoint_every > 0 \
                and epoch % checkpoint_every == 0:
            save_model(model, os.path.join(checkpoint_dir, f"checkpoint-epoch{epoch:03d}.smdl"))
            write_history_csv(os.path.join(checkpoint_dir, "history.csv"), history)

        if val_acc > tracked_acc:
            tracked, tracked_epoch = model.snapshot(), epoch
            tracked_acc, tracked_loss = val_acc, val_loss
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                stopped_early = True
                break

    if tracked is None or init_val_acc > tracked_acc:
        model.restore(init_snap)
        best_epoch, best_acc, best_loss = 0, init_val_acc, init_val_loss
    else:
        model.restore(tracked)
        best_epoch, best_acc, best_loss = tracked_epoch, tracked_acc, tracked_loss

    return TrainResult(history, best_epoch, best_acc, best_loss,
                       time.perf_counter() - t0, stopped_early)


def write_history_csv(path: str, history: list[EpochStats]) -> None:
    """Epoch metrics as CSV at six significant digits."""
    lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
    for rec in history:
        lines.append(f"{rec.epoch},{rec.train_loss:.6g},{rec.train_acc:.6g},"
                     f"{rec.val_loss:.6g},{rec.val_acc:.6g}")
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
