"""Re-fit the classifier head on the tuning labels, one model per fold.

The tuning set is dealt into ``k`` folds. Fold model ``i`` trains a new
head on every fold except ``i`` (held out for model selection), drawing
each batch slot from the source validation pool with probability
``alpha`` and from the tuning pool otherwise. Trunk weights never change;
batch-norm running statistics may be re-estimated on the same mixture
before the head is trained.
Predictions of the ``k`` models are averaged.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .augment import AugmentConfig, augment_batch
from .core import Rng, make_rng, matmul, shuffle
from .dataset import DatasetBundle, Split
from .errors import ConfigError, FormatError, ShapeError
from .model import (
    HEAD_KEYS,
    Parameters,
    bce_loss,
    checkpoint_crc,
    dropout_mask,
    head_logits,
    load_checkpoint,
    predict_scores,
    recompute_bn_stats,
    reinit_head,
    save_checkpoint,
    sigmoid,
    trunk_forward,
)
from .optimize import AdamState, MixedSampler, adam_step

log = logging.getLogger(__name__)


@dataclass
class TuningFolds:
    k: int
    folds: list  # list of lists of sample ids

    def __post_init__(self):
        ids = [sid for fold in self.folds for sid in fold]
        if len(self.folds) != self.k or len(set(ids)) != len(ids):
            raise ConfigError("folds must be k pairwise-disjoint id sets")
        sizes = [len(f) for f in self.folds]
        if max(sizes) - min(sizes) > 1:
            raise ConfigError("fold sizes must differ by at most one")


def make_folds(tuning, k: int, rng: Rng) -> TuningFolds:
    """Shuffle the tuning ids and deal them round-robin into ``k`` folds."""
    ids = tuning.ids if isinstance(tuning, Split) else [s.sample_id for s in tuning]
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if k > len(ids):
        raise ConfigError(f"cannot split {len(ids)} tuning samples into {k} folds")
    order = shuffle(rng, ids)
    return TuningFolds(k, [order[i::k] for i in range(k)])


@dataclass
class AdaptConfig:
    alpha: float = 0.0
    k: int = 10
    epochs: int = 8
    batches_per_epoch: int = 50
    batch_size: int = 32
    lr: float = 0.001
    reinit_head: bool = False
    use_augmentations: bool = True
    augment_source: bool = True
    recompute_bn: bool = True
    bn_batches: int = 20
    threshold: float = metrics.DEFAULT_THRESHOLD
    seed: int = 0
    aug_probs: dict = field(default_factory=lambda: dict(AugmentConfig().probs))

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epochs < 1 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, batches_per_epoch and batch_size must be >= 1")
        if self.recompute_bn and self.bn_batches < 1:
            raise ConfigError("bn_batches must be >= 1 when recompute_bn is on")
        AugmentConfig(self.aug_probs)


@dataclass
class FoldModels:
    base_crc: int
    models: list
    config: AdaptConfig
    folds: TuningFolds | None = None

    @property
    def k(self) -> int:
        return len(self.models)


def _fold_pools(bundle: DatasetBundle, folds: TuningFolds, fold_index: int):
    tuning = bundle["target_tuning"]
    held_ids = set(folds.folds[fold_index])
    held = [i for i, sid in enumerate(tuning.ids) if sid in held_ids]
    train = [i for i, sid in enumerate(tuning.ids) if sid not in held_ids]
    return tuning.subset(train, "tuning_pool"), tuning.subset(held, "held_out")


def _augment(images: np.ndarray, from_source: np.ndarray, cfg: AdaptConfig, aug: AugmentConfig, rng: Rng):
    if not cfg.use_augmentations:
        return images
    out = augment_batch(images, aug, rng)
    if not cfg.augment_source:
        out[from_source] = images[from_source]
    return out


def adapt_fold(base: Parameters, fold_index: int, folds: TuningFolds, bundle: DatasetBundle,
               cfg: AdaptConfig, rng: Rng | None = None) -> Parameters:
    """Train one fold model; returns the head with the best held-out F2."""
    if not 0 <= fold_index < folds.k:
        raise ConfigError(f"fold_index {fold_index} outside [0, {folds.k})")
    if rng is None:
        rng = _fold_rngs(cfg, folds.k)[fold_index]
    head_rng, sample_rng, aug_rng, drop_rng, bn_rng = rng.spawn(5)
    pool, held = _fold_pools(bundle, folds, fold_index)
    source = bundle["source_val"]
    aug = AugmentConfig(cfg.aug_probs)

    params = reinit_head(base, head_rng) if cfg.reinit_head else base
    if cfg.recompute_bn:
        # re-estimate first so the head is fitted to the features it will see at test time
        bn_sampler = MixedSampler(cfg.alpha, source, pool, cfg.batch_size, bn_rng)
        stream = [bn_sampler.next_batch().images.reshape(cfg.batch_size, -1) for _ in range(cfg.bn_batches)]
        params = recompute_bn_stats(params, stream)
    sampler = MixedSampler(cfg.alpha, source, pool, cfg.batch_size, sample_rng)
    state = AdamState(lr=cfg.lr)
    held_x = held.flat()

    def held_f2(p):
        return metrics.mean_f2(predict_scores(p, held_x), held.labels, cfg.threshold)

    # the freshly initialised head is not a candidate; the first epoch always wins
    best, best_f2 = params, -np.inf
    for epoch in range(cfg.epochs):
        for _ in range(cfg.batches_per_epoch):
            batch = sampler.next_batch()
            images = _augment(batch.images, batch.from_source, cfg, aug, aug_rng)
            feats = trunk_forward(params, images.reshape(len(images), -1))
            feats = feats * dropout_mask(feats.shape, params.config.dropout_p, drop_rng)
            logits = head_logits(params, feats)
            _, g = bce_loss(sigmoid(logits), batch.labels, logits=logits)
            grads = {"head.W": matmul(feats.T, g), "head.b": g.sum(axis=0)}
            params, state = adam_step(params, grads, state)
        f2 = held_f2(params)
        log.debug("fold %d epoch %d held-out f2 %.4f", fold_index, epoch, f2)
        if f2 > best_f2:
            best, best_f2 = params, f2

    return best


def _fold_rngs(cfg: AdaptConfig, k: int) -> list[Rng]:
    _, jobs_root = make_rng(cfg.seed).spawn(2)
    return jobs_root.spawn(k)


def _fold_job(args):
    return adapt_fold(*args)


def adapt(base: Parameters, bundle: DatasetBundle, cfg: AdaptConfig | None = None, jobs: int = 1) -> FoldModels:
    """All ``k`` fold models for one alpha. ``jobs`` only changes wall time."""
    cfg = cfg or AdaptConfig()
    fold_rng, _ = make_rng(cfg.seed).spawn(2)
    folds = make_folds(bundle["target_tuning"], cfg.k, fold_rng)
    rngs = _fold_rngs(cfg, cfg.k)
    tasks = [(base, i, folds, bundle, cfg, rngs[i]) for i in range(cfg.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            models = list(pool.map(_fold_job, tasks))
    else:
        models = [_fold_job(t) for t in tasks]
    return FoldModels(checkpoint_crc(base), models, cfg, folds)


def predict_fold_averaged(fm, images) -> np.ndarray:
    """Mean of the fold models' eval-mode scores, summed in fold order."""
    models = fm.models if isinstance(fm, FoldModels) else list(fm)
    if not models:
        raise ConfigError("no fold models to average")
    x = _flatten(images)
    total = None
    for params in models:
        s = predict_scores(params, x)
        if total is not None and s.shape != total.shape:
            raise ShapeError("fold models disagree on output shape")
        total = s if total is None else total + s
    return total / len(models)


def _flatten(images) -> np.ndarray:
    if isinstance(images, Split):
        return images.flat()
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(len(images), -1) if images.ndim > 2 else images


# persistence

MANIFEST = "manifest.txt"


def save_fold_models(fm: FoldModels, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, params in enumerate(fm.models):
        save_checkpoint(params, directory / f"fold_{i}.gsck")
    lines = [
        f"k = {fm.k}",
        f"alpha = {fm.config.alpha!r}",
        f"seed = {fm.config.seed}",
        f"base_crc = {fm.base_crc:08x}",
    ]
    for key, value in asdict(fm.config).items():
        if key not in ("alpha", "seed", "k", "aug_probs"):
            lines.append(f"adapt.{key} = {value!r}")
    for kind, p in fm.config.aug_probs.items():
        lines.append(f"aug.{kind}.prob = {p!r}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FormatError(f"missing {path}")
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_fold_models(directory) -> FoldModels:
    directory = Path(directory)
    meta = read_manifest(directory)
    k = int(meta["k"])
    models = [load_checkpoint(directory / f"fold_{i}.gsck") for i in range(k)]
    probs = {key[4:-5]: float(v) for key, v in meta.items() if key.startswith("aug.")}
    kwargs = {}
    for key, value in meta.items():
        if key.startswith("adapt."):
            name = key[6:]
            kwargs[name] = _literal(value)
    cfg = AdaptConfig(alpha=float(meta["alpha"]), k=k, seed=int(meta["seed"]), aug_probs=probs, **kwargs)
    return FoldModels(int(meta["base_crc"], 16), models, cfg)


def _literal(text: str):
    if text in ("True", "False"):
        return text == "True"
    try:
        return int(text)
    except ValueError:
        return float(text)
