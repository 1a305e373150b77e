"""Synthetic geographic-shift dataset, split container and on-disk format.

Regions differ only in their per-class label priors; the pixels of a class
look the same wherever it appears. Each class owns a fixed prototype
(a colored ring of seeded radius) and a sample's image is the
clipped sum of its classes' prototypes plus Gaussian background noise.
"""

from __future__ import annotations

import csv
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Rng, make_rng
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    EmptyInputError,
    TruncatedError,
    VersionError,
)

MAGIC = b"GSD1"
FORMAT_VERSION = 1

SPLIT_NAMES = ("source_train", "source_val", "target_tuning", "target_eval", "target_hidden")
SOURCE_REGION, TARGET_REGION, HIDDEN_REGION = 0, 1, 2
_SPLIT_REGION = {
    "source_train": SOURCE_REGION,
    "source_val": SOURCE_REGION,
    "target_tuning": TARGET_REGION,
    "target_eval": TARGET_REGION,
    "target_hidden": HIDDEN_REGION,
}


@dataclass
class ClassVocabulary:
    names: list[str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("class names must be unique")

    @classmethod
    def default(cls, num_classes: int) -> "ClassVocabulary":
        return cls([f"class_{i:02d}" for i in range(num_classes)])

    @property
    def num_classes(self) -> int:
        return len(self.names)


@dataclass
class RegionProfile:
    region_id: int
    label_prior: np.ndarray

    def __post_init__(self):
        self.label_prior = np.asarray(self.label_prior, dtype=np.float64)
        if np.any(self.label_prior < 0) or np.any(self.label_prior > 1):
            raise ConfigError(f"region {self.region_id}: priors must lie in [0, 1]")
        if not np.any(self.label_prior > 0):
            raise ConfigError(f"region {self.region_id}: at least one prior must be positive")


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image: np.ndarray
    labels: frozenset
    region_id: int


def default_priors(num_classes: int, high: float = 0.2, low: float = 0.02, shared: float = 0.08):
    """Source/target priors: one third of the classes common in source and rare
    in target, one third the reverse, the rest unchanged."""
    third = num_classes // 3
    source = np.full(num_classes, shared)
    target = np.full(num_classes, shared)
    source[:third], target[:third] = high, low
    source[third : 2 * third], target[third : 2 * third] = low, high
    return source, target


@dataclass
class GeneratorConfig:
    height: int = 16
    width: int = 16
    channels: int = 3
    num_classes: int = 12
    sizes: dict = field(
        default_factory=lambda: {
            "source_train": 5000,
            "source_val": 1000,
            "target_tuning": 1000,
            "target_eval": 1000,
            "target_hidden": 1000,
        }
    )
    # default priors: one third of classes at prior_high in source and
    # prior_low in target, one third the reverse, the rest at prior_shared
    prior_high: float = 0.2
    prior_low: float = 0.02
    prior_shared: float = 0.08
    source_prior: Sequence[float] | None = None
    target_prior: Sequence[float] | None = None
    # hidden prior = (1 - hidden_mix) * source + hidden_mix * target
    hidden_mix: float = 0.9
    prototype_sigma: float = 0.15
    # pixels = background_level + amplitude * sum of ring prototypes + noise
    prototype_amplitude: float = 0.25
    background_level: float = 0.15
    background_sigma: float = 0.08
    ring_min_radius: float = 1.5
    ring_width: tuple = (0.6, 1.2)
    ring_levels: int = 3  # 0 draws radii freely
    # per-image nuisance: centre offset in pixels and radius zoom
    max_offset: float = 1.0
    zoom: tuple = (0.8, 1.2)
    delta: float = 0.3
    allow_empty: bool = False
    seed: int = 0

    def priors(self):
        src, tgt = default_priors(self.num_classes, self.prior_high, self.prior_low, self.prior_shared)
        if self.source_prior is not None:
            src = np.asarray(self.source_prior, dtype=np.float64)
        if self.target_prior is not None:
            tgt = np.asarray(self.target_prior, dtype=np.float64)
        hidden = (1.0 - self.hidden_mix) * src + self.hidden_mix * tgt
        return src, tgt, hidden

    def validate(self):
        if min(self.height, self.width, self.channels, self.num_classes) < 1:
            raise ConfigError("image dims and num_classes must be >= 1")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if set(self.sizes) != set(SPLIT_NAMES):
            raise ConfigError(f"sizes must name exactly {SPLIT_NAMES}")
        if any(n < 1 for n in self.sizes.values()):
            raise ConfigError("split sizes must be >= 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must lie in [0, 1]")
        if not 0.0 <= self.hidden_mix <= 1.0:
            raise ConfigError("hidden_mix must lie in [0, 1]")
        if self.prototype_amplitude <= 0 or not 0.0 <= self.background_level <= 1.0:
            raise ConfigError("prototype_amplitude must be > 0 and background_level in [0, 1]")
        if self.max_offset < 0 or not 0 < self.zoom[0] <= self.zoom[1]:
            raise ConfigError("max_offset must be >= 0 and zoom a positive (low, high) range")
        if self.prototype_sigma < 0 or self.background_sigma < 0:
            raise ConfigError("noise sigmas must be >= 0")
        if self.ring_min_radius < 0 or not 0 < self.ring_width[0] <= self.ring_width[1]:
            raise ConfigError("invalid ring geometry")
        src, tgt, _ = self.priors()
        for prior in (src, tgt):
            if prior.shape != (self.num_classes,):
                raise ConfigError("priors must have one entry per class")
        RegionProfile(SOURCE_REGION, src)
        RegionProfile(TARGET_REGION, tgt)
        if tv_distance(src, tgt) < self.delta:
            raise ConfigError(
                f"label shift {tv_distance(src, tgt):.4f} between source and target "
                f"priors is below the requested delta {self.delta}"
            )


def tv_distance(p, q) -> float:
    """Total-variation distance between two label-frequency vectors, each
    normalized to sum to one."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.sum(np.abs(p / p.sum() - q / q.sum())))


class Split:
    """One named split stored column-wise.

    ``images`` is (n, H, W, C) float32, ``labels`` an (n, num_classes) bool
    matrix and ``regions`` an int array.
    """

    def __init__(self, name: str, ids: list[str], images, labels, regions):
        self.name = name
        self.ids = list(ids)
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=bool)
        self.regions = np.asarray(regions, dtype=np.int64)
        n = len(self.ids)
        if not (self.images.shape[0] == self.labels.shape[0] == self.regions.shape[0] == n):
            raise ConfigError(f"split {name}: column lengths disagree")

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> Sample:
        return Sample(
            self.ids[i],
            self.images[i],
            frozenset(np.flatnonzero(self.labels[i]).tolist()),
            int(self.regions[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, Split):
            return NotImplemented
        return (
            self.name == other.name
            and self.ids == other.ids
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.regions, other.regions)
        )

    def subset(self, index, name: str | None = None) -> "Split":
        index = np.asarray(index, dtype=np.int64)
        return Split(
            name or self.name,
            [self.ids[i] for i in index],
            self.images[index],
            self.labels[index],
            self.regions[index],
        )

    def flat(self) -> np.ndarray:
        """Images flattened to (n, H*W*C) float64 rows."""
        return self.images.reshape(len(self), -1).astype(np.float64)

    def label_sets(self) -> list[set[int]]:
        return [set(np.flatnonzero(row).tolist()) for row in self.labels]


class DatasetBundle:
    def __init__(self, vocabulary: ClassVocabulary, splits: dict[str, Split]):
        self.vocabulary = vocabulary
        self.splits = dict(splits)
        seen = set()
        for split in self.splits.values():
            if split.labels.shape[1] != vocabulary.num_classes:
                raise ConfigError(f"split {split.name}: label width != num_classes")
            ids = set(split.ids)
            if len(ids) != len(split.ids) or seen & ids:
                raise ConfigError("sample ids must be globally unique across splits")
            seen |= ids

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]

    def __getattr__(self, name):
        splits = self.__dict__.get("splits", {})
        if name in splits:
            return splits[name]
        raise AttributeError(name)

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.vocabulary.names == other.vocabulary.names
            and list(self.splits) == list(other.splits)
            and all(self.splits[k] == other.splits[k] for k in self.splits)
        )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        first = next(iter(self.splits.values()))
        return tuple(first.images.shape[1:])


def make_prototypes(cfg: GeneratorConfig, rng: Rng) -> np.ndarray:
    """(num_classes, 2 + C) ring table: radius, width, then colour.

    Every class is a coloured ring centred in the image. Rings are (up to
    resampling) invariant under the flips, quarter turns and rotations
    applied during head tuning; per-image offsets and zoom in
    :func:`render` make shifted and rescaled copies look like real samples.
    """
    h, w = cfg.height, cfg.width
    r_max = max(min(h, w) / 2.0 - 1.0, cfg.ring_min_radius)
    table = np.zeros((cfg.num_classes, 2 + cfg.channels))
    for c in range(cfg.num_classes):
        if cfg.ring_levels:
            # radii on a geometric ladder, far enough apart that zoom keeps levels distinct
            level = c % cfg.ring_levels
            ratio = (r_max / cfg.ring_min_radius) ** (1.0 / max(cfg.ring_levels - 1, 1))
            table[c, 0] = cfg.ring_min_radius * ratio**level
        else:
            table[c, 0] = rng.uniform(cfg.ring_min_radius, r_max)
        table[c, 1] = rng.uniform(*cfg.ring_width)
        color = rng.uniform(0.0, 1.0, size=cfg.channels)
        table[c, 2:] = color / max(color.max(), 1e-12)
    return table


def render(table: np.ndarray, weights: np.ndarray, height: int, width: int,
           offset: np.ndarray | None = None, zoom: np.ndarray | None = None) -> np.ndarray:
    """Sum of weighted rings, (n, height * width * C).

    ``offset`` (n, 2) moves each image's ring centre by (dy, dx) pixels and
    ``zoom`` (n,) scales its radii and widths.
    """
    n = len(weights)
    offset = np.zeros((n, 2)) if offset is None else offset
    zoom = np.ones(n) if zoom is None else zoom
    ys, xs = np.meshgrid(np.arange(height) - (height - 1) / 2.0, np.arange(width) - (width - 1) / 2.0, indexing="ij")
    dist = np.sqrt((ys[None] - offset[:, 0, None, None]) ** 2 + (xs[None] - offset[:, 1, None, None]) ** 2)
    out = np.zeros((n, height, width, table.shape[1] - 2))
    for c, (radius, ring_w, *color) in enumerate(table):
        profile = np.exp(-0.5 * ((dist - radius * zoom[:, None, None]) / (ring_w * zoom[:, None, None])) ** 2)
        out += (weights[:, c, None, None] * profile)[..., None] * np.asarray(color)
    return out.reshape(n, -1)


def _draw_labels(prior: np.ndarray, n: int, rng: Rng, allow_empty: bool) -> np.ndarray:
    labels = rng.uniform(size=(n, prior.size)) < prior
    if not allow_empty:
        for i in range(n):
            while not labels[i].any():
                labels[i] = rng.uniform(size=prior.size) < prior
    return labels


def generate(config: GeneratorConfig | None = None) -> DatasetBundle:
    cfg = config or GeneratorConfig()
    cfg.validate()
    rng = make_rng(cfg.seed)
    protos = make_prototypes(cfg, rng)
    priors = dict(zip((SOURCE_REGION, TARGET_REGION, HIDDEN_REGION), cfg.priors()))

    splits = {}
    for name in SPLIT_NAMES:
        n = cfg.sizes[name]
        region = _SPLIT_REGION[name]
        labels = _draw_labels(priors[region], n, rng, cfg.allow_empty)
        jitter = 1.0 + rng.normal(0.0, cfg.prototype_sigma, size=(n, cfg.num_classes))
        weights = labels * np.maximum(jitter, 0.0)
        offset = rng.uniform(-cfg.max_offset, cfg.max_offset, size=(n, 2))
        zoom = rng.uniform(*cfg.zoom, size=n)
        pixels = cfg.background_level + cfg.prototype_amplitude * render(protos, weights, cfg.height, cfg.width, offset, zoom)
        pixels += rng.normal(0.0, cfg.background_sigma, size=pixels.shape)
        images = np.clip(pixels, 0.0, 1.0).reshape(n, cfg.height, cfg.width, cfg.channels)
        ids = [f"{name}-{i:06d}" for i in range(n)]
        splits[name] = Split(name, ids, images, labels, np.full(n, region))
    return DatasetBundle(ClassVocabulary.default(cfg.num_classes), splits)


def label_histogram(split, vocab: ClassVocabulary | int) -> np.ndarray:
    """Fraction of samples carrying each class."""
    num_classes = vocab if isinstance(vocab, int) else vocab.num_classes
    if isinstance(split, Split):
        if len(split) == 0:
            raise EmptyInputError("label_histogram of an empty split")
        return split.labels.sum(axis=0) / len(split)
    samples = list(split)
    if not samples:
        raise EmptyInputError("label_histogram of an empty split")
    counts = np.zeros(num_classes)
    for s in samples:
        counts[list(s.labels)] += 1
    return counts / len(samples)


# container


def encode_bundle(bundle: DatasetBundle) -> bytes:
    h, w, c = bundle.image_shape
    out = bytearray(MAGIC)
    out += struct.pack("<HIHHBB", FORMAT_VERSION, bundle.vocabulary.num_classes, h, w, c, len(bundle.splits))
    for name, split in bundle.splits.items():
        raw_name = name.encode("utf-8")
        out += struct.pack("<B", len(raw_name)) + raw_name
        out += struct.pack("<I", len(split))
        pixels = split.images.astype("<f4")
        for i, sid in enumerate(split.ids):
            raw_id = sid.encode("utf-8")
            labels = np.flatnonzero(split.labels[i])
            out += struct.pack("<B", len(raw_id)) + raw_id
            out += struct.pack("<HH", int(split.regions[i]), labels.size)
            out += labels.astype("<u2").tobytes()
            out += pixels[i].tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_bundle(data: bytes) -> DatasetBundle:
    if len(data) < len(MAGIC):
        raise TruncatedError("file shorter than the magic header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported bundle version {version}")
    num_classes, h, w, c, n_splits = r.unpack("<IHHBB")
    npix = h * w * c
    splits = {}
    for _ in range(n_splits):
        (name_len,) = r.unpack("<B")
        name = r.take(name_len).decode("utf-8")
        (count,) = r.unpack("<I")
        ids, regions = [], np.zeros(count, dtype=np.int64)
        labels = np.zeros((count, num_classes), dtype=bool)
        images = np.zeros((count, h, w, c), dtype=np.float32)
        for i in range(count):
            (id_len,) = r.unpack("<B")
            ids.append(r.take(id_len).decode("utf-8"))
            regions[i], n_labels = r.unpack("<HH")
            labels[i, np.frombuffer(r.take(2 * n_labels), dtype="<u2")] = True
            images[i] = np.frombuffer(r.take(4 * npix), dtype="<f4").reshape(h, w, c)
        splits[name] = Split(name, ids, images, labels, regions)
    if len(data) - r.pos < 4:
        raise TruncatedError("missing trailing checksum")
    if len(data) - r.pos > 4:
        raise ChecksumError("trailing bytes after checksum")
    (stored,) = r.unpack("<I")
    if zlib.crc32(data[: r.pos - 4]) != stored:
        raise ChecksumError("CRC32 mismatch")
    return DatasetBundle(ClassVocabulary.default(num_classes), splits)


def write_bundle(bundle: DatasetBundle, path) -> None:
    Path(path).write_bytes(encode_bundle(bundle))


def read_bundle(path) -> DatasetBundle:
    return decode_bundle(Path(path).read_bytes())


def labels_csv(splits: Iterable[Split]) -> str:
    """``sample_id,region_id,labels`` with space-separated class indices."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "region_id", "labels"])
    for split in splits:
        for i, sid in enumerate(split.ids):
            labels = " ".join(str(k) for k in np.flatnonzero(split.labels[i]))
            writer.writerow([sid, int(split.regions[i]), labels])
    return buf.getvalue()
