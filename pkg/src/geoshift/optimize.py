"""Adam, reduce-on-plateau scheduling, mixed-pool sampling and base training."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import metrics
from .core import Rng, make_rng, permutation
from .dataset import DatasetBundle, Split
from .errors import ConfigError, NumericError, SamplerError, ShapeError
from .model import ModelConfig, Parameters, backward, bce_loss, forward, init, predict_scores

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads: dict, state: AdamState):
    """One bias-corrected Adam update of every key present in ``grads``.

    ``params`` is a :class:`Parameters` or a plain dict of arrays; the same
    kind is returned together with a new state.
    """
    arrays = params.arrays if isinstance(params, Parameters) else params
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, updated = dict(state.m), dict(state.v), {}
    for key, g in grads.items():
        theta = np.asarray(arrays[key], dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != theta.shape:
            raise ShapeError(f"{key}: gradient {g.shape} vs parameter {theta.shape}")
        m = b1 * state.m.get(key, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(key, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        updated[key] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[key], new_v[key] = m, v
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    if isinstance(params, Parameters):
        return params.updated(updated), new_state
    out = dict(params)
    out.update(updated)
    return out, new_state


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored score
    (higher is better) has failed to improve for more than ``patience``
    epochs; then hold off for ``cooldown`` epochs."""

    lr: float = 0.001
    factor: float = 0.5
    patience: int = 2
    cooldown: int = 2
    min_lr: float = 0.0
    threshold: float = 1e-8
    best_score: float = -np.inf
    bad_epochs: int = 0
    cooldown_remaining: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError("factor must lie in (0, 1)")
        if self.patience < 0 or self.cooldown < 0:
            raise ConfigError("patience and cooldown must be >= 0")

    def step(self, score: float) -> float:
        """Record one epoch's score and return the (possibly reduced) lr."""
        if score > self.best_score + self.threshold:
            self.best_score = score
            self.bad_epochs = 0
        elif self.cooldown_remaining == 0:
            self.bad_epochs += 1
        if self.cooldown_remaining > 0:
            self.cooldown_remaining -= 1
        if self.bad_epochs > self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
            self.cooldown_remaining = self.cooldown
        return self.lr


def scheduler_update(sched: PlateauScheduler, epoch_score: float) -> float:
    return sched.step(epoch_score)


class Batch(NamedTuple):
    images: np.ndarray  # (n, H, W, C)
    labels: np.ndarray  # (n, num_classes) bool
    from_source: np.ndarray  # (n,) bool


class MixedSampler:
    """Each batch slot picks the source pool with probability ``alpha`` (the
    tuning pool otherwise), then a uniform sample from it with replacement."""

    def __init__(self, alpha: float, source: Split, tuning: Split, batch_size: int, rng: Rng):
        if not 0.0 <= alpha <= 1.0:
            raise SamplerError(f"alpha must lie in [0, 1], got {alpha}")
        if batch_size < 1:
            raise SamplerError("batch_size must be >= 1")
        if alpha > 0 and len(source) == 0:
            raise SamplerError("source pool is empty but alpha > 0")
        if alpha < 1 and len(tuning) == 0:
            raise SamplerError("tuning pool is empty but alpha < 1")
        self.alpha = alpha
        self.source = source
        self.tuning = tuning
        self.batch_size = batch_size
        self.rng = rng

    def next_indices(self):
        from_source = self.rng.uniform(size=self.batch_size) < self.alpha
        u = self.rng.uniform(size=self.batch_size)
        sizes = np.where(from_source, len(self.source), len(self.tuning))
        idx = np.minimum(np.floor(u * sizes).astype(np.int64), np.maximum(sizes - 1, 0))
        return from_source, idx

    def next_batch(self) -> Batch:
        from_source, idx = self.next_indices()
        ref = self.source if len(self.source) else self.tuning
        images = np.empty((self.batch_size,) + ref.images.shape[1:], dtype=np.float32)
        labels = np.empty((self.batch_size, ref.labels.shape[1]), dtype=bool)
        for pool, mask in ((self.source, from_source), (self.tuning, ~from_source)):
            if mask.any():
                images[mask] = pool.images[idx[mask]]
                labels[mask] = pool.labels[idx[mask]]
        return Batch(images, labels, from_source)


def next_batch(sampler: MixedSampler) -> Batch:
    return sampler.next_batch()


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 40
    seed: int = 0
    lr: float = 0.001
    early_stop_patience: int = 15
    min_lr: float = 1e-6
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    plateau_cooldown: int = 2
    threshold: float = metrics.DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


def train_base(model_cfg: ModelConfig, bundle: DatasetBundle, train_cfg: TrainConfig | None = None,
               train_split: str = "source_train", val_split: str = "source_val"):
    """Adam on ``train_split`` with per-epoch validation F2 driving the scheduler.

    Returns the parameters of the best validation epoch and the per-epoch
    history (dicts with ``epoch, loss, val_f2, lr``).
    """
    cfg = train_cfg or TrainConfig()
    train, val = bundle[train_split], bundle[val_split]
    x_train, y_train = train.flat(), train.labels.astype(np.float64)
    x_val = val.flat()
    if x_train.shape[1] != model_cfg.input_dim:
        raise ConfigError(f"input_dim {model_cfg.input_dim} != image size {x_train.shape[1]}")

    rng = make_rng(cfg.seed)
    params = init(model_cfg, rng)
    state = AdamState(lr=cfg.lr)
    sched = PlateauScheduler(
        lr=cfg.lr,
        factor=cfg.plateau_factor,
        patience=cfg.plateau_patience,
        cooldown=cfg.plateau_cooldown,
        min_lr=cfg.min_lr,
    )
    best, best_f2, since_best = params, -np.inf, 0
    history = []
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = permutation(rng, n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            scores, cache = forward(params, x_train[idx], "train", rng)
            loss, grad = bce_loss(scores, y_train[idx], logits=cache.logits)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            grads = backward(params, cache, grad)
            params, state = adam_step(params, grads, state)
            params = params.updated(cache.running)
            losses.append(loss)
        val_f2 = metrics.mean_f2(predict_scores(params, x_val), val.labels, cfg.threshold)
        lr_used = state.lr
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_f2": val_f2, "lr": lr_used})
        log.info("epoch %d loss %.5f val_f2 %.4f lr %.2e", epoch, history[-1]["loss"], val_f2, lr_used)
        state.lr = sched.step(val_f2)
        if val_f2 > best_f2:
            best, best_f2, since_best = params, val_f2, 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    return best, history


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "val_f2", "lr"])
    for row in history:
        writer.writerow([row["epoch"], repr(row["loss"]), repr(row["val_f2"]), repr(row["lr"])])
    return buf.getvalue()
