"""Dense multilabel classifier with batch norm, dropout and a sigmoid head.

Each trunk layer is ``linear -> batchnorm -> relu``. Dropout (inverted
scaling) sits on the last hidden activation, right before the linear head.
All gradients are written out by hand; ``tests/test_model.py`` checks them
against central finite differences.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Rng, matmul
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    EmptyInputError,
    ShapeError,
    TruncatedError,
    UsageError,
    VersionError,
)

MAGIC = b"GSCK"
FORMAT_VERSION = 1
BN_FIELDS = ("W", "b", "gamma", "beta", "running_mean", "running_var")
HEAD_KEYS = ("head.W", "head.b")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple = (64, 32)
    dropout_p: float = 0.3
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 1 or not self.hidden_dims:
            raise ConfigError("input_dim, num_classes and at least one hidden layer are required")
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigError("hidden dims must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if not 0.0 <= self.bn_momentum <= 1.0 or self.bn_epsilon <= 0:
            raise ConfigError("invalid batch-norm settings")

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims)


class Parameters:
    """Ordered mapping from parameter name to float64 array.

    Names are ``l<i>.<field>`` for trunk layers and ``head.W``/``head.b``.
    Treated as a value: operations return new instances.
    """

    def __init__(self, config: ModelConfig, arrays: dict):
        self.config = config
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        expected = expected_shapes(config)
        if list(self.arrays) != list(expected):
            raise ShapeError("parameter names do not match the model config")
        for k, shape in expected.items():
            if self.arrays[k].shape != shape:
                raise ShapeError(f"{k}: shape {self.arrays[k].shape}, expected {shape}")

    def __getitem__(self, key):
        return self.arrays[key]

    def keys(self):
        return self.arrays.keys()

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def updated(self, mapping: dict) -> "Parameters":
        arrays = dict(self.arrays)
        arrays.update(mapping)
        return Parameters(self.config, arrays)

    def __eq__(self, other):
        if not isinstance(other, Parameters):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )

    @property
    def trainable_keys(self) -> list[str]:
        return [k for k in self.arrays if not k.endswith(("running_mean", "running_var"))]

    @property
    def trunk_keys(self) -> list[str]:
        return [k for k in self.arrays if not k.startswith("head.")]


def expected_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    fan_in = cfg.input_dim
    for i, width in enumerate(cfg.hidden_dims):
        shapes[f"l{i}.W"] = (fan_in, width)
        for name in BN_FIELDS[1:]:
            shapes[f"l{i}.{name}"] = (width,)
        fan_in = width
    shapes["head.W"] = (fan_in, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def _he(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def init(cfg: ModelConfig, rng: Rng) -> Parameters:
    arrays = {}
    fan_in = cfg.input_dim
    for i, width in enumerate(cfg.hidden_dims):
        arrays[f"l{i}.W"] = _he(rng, fan_in, width)
        arrays[f"l{i}.b"] = np.zeros(width)
        arrays[f"l{i}.gamma"] = np.ones(width)
        arrays[f"l{i}.beta"] = np.zeros(width)
        arrays[f"l{i}.running_mean"] = np.zeros(width)
        arrays[f"l{i}.running_var"] = np.ones(width)
        fan_in = width
    arrays["head.W"] = _he(rng, fan_in, cfg.num_classes)
    arrays["head.b"] = np.zeros(cfg.num_classes)
    return Parameters(cfg, arrays)


def reinit_head(params: Parameters, rng: Rng) -> Parameters:
    """Fresh He-initialized head; trunk arrays are shared untouched."""
    fan_in, n_out = params["head.W"].shape
    return params.updated({"head.W": _he(rng, fan_in, n_out), "head.b": np.zeros(n_out)})


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ForwardCache:
    params: Parameters
    inputs: list = field(default_factory=list)  # layer inputs h_{i-1}
    xhat: list = field(default_factory=list)
    inv_std: list = field(default_factory=list)
    pre_relu: list = field(default_factory=list)
    mask: np.ndarray | None = None  # dropout mask already scaled by 1/keep
    features: np.ndarray | None = None  # head input after dropout
    logits: np.ndarray | None = None
    running: dict = field(default_factory=dict)


def _check_batch(params: Parameters, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.config.input_dim:
        raise ShapeError(f"batch shape {batch.shape} does not match input_dim {params.config.input_dim}")
    return batch


def dropout_mask(shape, p: float, rng: Rng) -> np.ndarray:
    keep = 1.0 - p
    return (rng.uniform(size=shape) < keep) / keep


def trunk_forward(params: Parameters, batch, train: bool = False, cache: ForwardCache | None = None):
    """Last hidden activation (before dropout)."""
    cfg = params.config
    h = _check_batch(params, batch)
    for i in range(cfg.n_layers):
        z = matmul(h, params[f"l{i}.W"]) + params[f"l{i}.b"]
        if train:
            mu = z.mean(axis=0)
            var = np.mean((z - mu) ** 2, axis=0)
        else:
            mu, var = params[f"l{i}.running_mean"], params[f"l{i}.running_var"]
        inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
        xhat = (z - mu) * inv_std
        y = params[f"l{i}.gamma"] * xhat + params[f"l{i}.beta"]
        if cache is not None:
            cache.inputs.append(h)
            cache.xhat.append(xhat)
            cache.inv_std.append(inv_std)
            cache.pre_relu.append(y)
            if train:
                m = cfg.bn_momentum
                cache.running[f"l{i}.running_mean"] = (1 - m) * params[f"l{i}.running_mean"] + m * mu
                cache.running[f"l{i}.running_var"] = (1 - m) * params[f"l{i}.running_var"] + m * var
        h = np.maximum(y, 0.0)
    return h


def head_logits(params: Parameters, features: np.ndarray) -> np.ndarray:
    return matmul(features, params["head.W"]) + params["head.b"]


def forward(params: Parameters, batch, mode: str = "eval", rng: Rng | None = None):
    """Scores in (0, 1) and, in train mode, the cache backward needs.

    Train mode normalizes with batch statistics and returns momentum-updated
    running statistics in ``cache.running``; ``params`` is not modified.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise UsageError("train-mode forward needs an rng for dropout")
    cache = ForwardCache(params) if train else None
    h = trunk_forward(params, batch, train=train, cache=cache)
    if train:
        cache.mask = dropout_mask(h.shape, params.config.dropout_p, rng)
        h = h * cache.mask
        cache.features = h
    logits = head_logits(params, h)
    if cache is not None:
        cache.logits = logits
    return sigmoid(logits), cache


def predict_scores(params: Parameters, batch, chunk: int = 1024) -> np.ndarray:
    batch = _check_batch(params, batch)
    parts = [forward(params, batch[i : i + chunk])[0] for i in range(0, len(batch), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, params.config.num_classes))


def bce_loss(scores, targets, logits=None):
    """Mean binary cross-entropy and its gradient wrt the logits.

    Uses ``logits`` when given; otherwise recovers them from ``scores``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != targets.shape:
        raise ShapeError(f"scores {scores.shape} vs targets {targets.shape}")
    if logits is None:
        with np.errstate(divide="ignore"):
            logits = np.log(scores) - np.log1p(-scores)
    z = np.asarray(logits, dtype=np.float64)
    per = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    loss = float(np.mean(per))
    grad = (scores - targets) / targets.size
    return loss, grad


def backward(params: Parameters, cache: ForwardCache | None, grad_logits, head_only: bool = False) -> dict:
    """Gradients of the loss for every trainable parameter.

    ``head_only`` stops after the head, for frozen-trunk training.
    """
    if cache is None or cache.logits is None or cache.features is None:
        raise UsageError("backward needs the cache of a train-mode forward")
    if cache.params is not params:
        raise UsageError("cache was produced by a different Parameters value")
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != cache.logits.shape:
        raise ShapeError(f"grad_logits {g.shape} vs logits {cache.logits.shape}")
    grads = {
        "head.W": matmul(cache.features.T, g),
        "head.b": g.sum(axis=0),
    }
    if head_only:
        return grads
    da = matmul(g, params["head.W"].T) * cache.mask
    n = g.shape[0]
    for i in reversed(range(params.config.n_layers)):
        dy = da * (cache.pre_relu[i] > 0)
        xhat = cache.xhat[i]
        grads[f"l{i}.gamma"] = np.sum(dy * xhat, axis=0)
        grads[f"l{i}.beta"] = dy.sum(axis=0)
        dxhat = dy * params[f"l{i}.gamma"]
        dz = (cache.inv_std[i] / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
        )
        grads[f"l{i}.W"] = matmul(cache.inputs[i].T, dz)
        grads[f"l{i}.b"] = dz.sum(axis=0)
        if i > 0:
            da = matmul(dz, params[f"l{i}.W"].T)
    return {k: grads[k] for k in params.trainable_keys if k in grads}


def recompute_bn_stats(params: Parameters, batches) -> Parameters:
    """Replace running statistics with exact statistics over ``batches``.

    ``batches`` must be re-iterable (e.g. a list of (n, input_dim) arrays).
    Layers are processed in order so every layer sees inputs normalized
    with the freshly estimated statistics of the layers below it. Batches
    are merged with Chan's parallel form of Welford's update.
    """
    batches = [np.asarray(b, dtype=np.float64) for b in batches]
    if not batches or sum(len(b) for b in batches) == 0:
        raise EmptyInputError("recompute_bn_stats needs at least one nonempty batch")
    cfg = params.config
    current = params
    for i in range(cfg.n_layers):
        count, mean, m2 = 0, None, None
        for batch in batches:
            if len(batch) == 0:
                continue
            h = _check_batch(current, batch)
            for j in range(i):
                h = _layer_eval(current, j, h)
            z = matmul(h, current[f"l{i}.W"]) + current[f"l{i}.b"]
            nb = z.shape[0]
            mb = z.mean(axis=0)
            m2b = np.sum((z - mb) ** 2, axis=0)
            if count == 0:
                count, mean, m2 = nb, mb, m2b
                continue
            total = count + nb
            delta = mb - mean
            mean = mean + delta * (nb / total)
            m2 = m2 + m2b + delta**2 * (count * nb / total)
            count = total
        current = current.updated({f"l{i}.running_mean": mean, f"l{i}.running_var": m2 / count})
    return current


def _layer_eval(params: Parameters, i: int, h: np.ndarray) -> np.ndarray:
    cfg = params.config
    z = matmul(h, params[f"l{i}.W"]) + params[f"l{i}.b"]
    inv_std = 1.0 / np.sqrt(params[f"l{i}.running_var"] + cfg.bn_epsilon)
    y = params[f"l{i}.gamma"] * ((z - params[f"l{i}.running_mean"]) * inv_std) + params[f"l{i}.beta"]
    return np.maximum(y, 0.0)


# checkpoint


def _config_block(cfg: ModelConfig) -> bytes:
    out = struct.pack("<IB", cfg.input_dim, cfg.n_layers)
    out += struct.pack(f"<{cfg.n_layers}I", *cfg.hidden_dims)
    out += struct.pack("<Iddd", cfg.num_classes, cfg.dropout_p, cfg.bn_momentum, cfg.bn_epsilon)
    return out


def encode_checkpoint(params: Parameters) -> bytes:
    out = bytearray(MAGIC) + struct.pack("<H", FORMAT_VERSION) + _config_block(params.config)
    for arr in params.arrays.values():
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def _take(data: bytes, pos: int, n: int):
    if pos + n > len(data):
        raise TruncatedError(f"checkpoint truncated at offset {pos}")
    return data[pos : pos + n], pos + n


def decode_checkpoint(data: bytes, expected: ModelConfig | None = None) -> Parameters:
    if len(data) < 4:
        raise TruncatedError("file shorter than the magic header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    chunk, pos = _take(data, 4, 2)
    (version,) = struct.unpack("<H", chunk)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    chunk, pos = _take(data, pos, 5)
    input_dim, n_layers = struct.unpack("<IB", chunk)
    chunk, pos = _take(data, pos, 4 * n_layers)
    hidden = struct.unpack(f"<{n_layers}I", chunk)
    chunk, pos = _take(data, pos, 28)
    num_classes, dropout_p, momentum, eps = struct.unpack("<Iddd", chunk)
    cfg = ModelConfig(input_dim, num_classes, hidden, dropout_p, momentum, eps)
    if expected is not None and expected != cfg:
        raise ShapeError(f"checkpoint config {cfg} does not match expected {expected}")
    arrays = {}
    for name, shape in expected_shapes(cfg).items():
        chunk, pos = _take(data, pos, 1)
        (ndim,) = struct.unpack("<B", chunk)
        chunk, pos = _take(data, pos, 4 * ndim)
        dims = struct.unpack(f"<{ndim}I", chunk)
        if tuple(dims) != shape:
            raise ShapeError(f"{name}: stored shape {dims}, expected {shape}")
        chunk, pos = _take(data, pos, 8 * int(np.prod(dims)))
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(dims).astype(np.float64)
    chunk, pos = _take(data, pos, 4)
    if pos != len(data):
        raise ChecksumError("trailing bytes after checksum")
    if zlib.crc32(data[: pos - 4]) != struct.unpack("<I", chunk)[0]:
        raise ChecksumError("CRC32 mismatch")
    return Parameters(cfg, arrays)


def save_checkpoint(params: Parameters, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path, expected: ModelConfig | None = None) -> Parameters:
    return decode_checkpoint(Path(path).read_bytes(), expected)


def checkpoint_crc(params: Parameters) -> int:
    return struct.unpack("<I", encode_checkpoint(params)[-4:])[0]
