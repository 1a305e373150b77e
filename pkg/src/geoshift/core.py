"""Deterministic numeric substrate: splitmix64 generator and fixed-order matmul.

Every stochastic choice in the package draws from :class:`Rng`. The raw
stream is plain splitmix64, which is counter based, so bulk draws are
vectorized over the counter and stay bit-identical to scalar draws.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import ParameterError, ShapeError

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)

_U_GAMMA = np.uint64(GOLDEN_GAMMA)
_U_MUL1 = np.uint64(_MUL1)
_U_MUL2 = np.uint64(_MUL2)


def mix64(z: int) -> int:
    """splitmix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & MASK64
    return z ^ (z >> 31)


_STEPS = np.arange(1, 4097, dtype=np.uint64) * _U_GAMMA


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _U_MUL1
    z = (z ^ (z >> np.uint64(27))) * _U_MUL2
    return z ^ (z >> np.uint64(31))


def splitmix64(x: int) -> int:
    """First output of a splitmix64 stream seeded with ``x``."""
    return mix64((x + GOLDEN_GAMMA) & MASK64)


class Rng:
    """splitmix64 stream with uniform, normal, bernoulli and integer draws.

    Uniforms take the top 53 bits of a raw output, so ``uniform()`` lies in
    ``[0, 1)``. Normals use Box-Muller on two consecutive uniforms (cosine
    branch only), so each normal consumes exactly two raw outputs.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def __repr__(self):
        return f"Rng(state=0x{self.state:016X})"

    def copy(self) -> "Rng":
        return Rng(self.state)

    # raw stream

    def next_raw(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw outputs as a uint64 array."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        # array arithmetic on uint64 wraps silently, which is what we want
        steps = _STEPS[:n] if n <= len(_STEPS) else np.arange(1, n + 1, dtype=np.uint64) * _U_GAMMA
        out = _mix64_array(np.uint64(self.state) + steps)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return out

    # distributions

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if not lo <= hi:
            raise ParameterError(f"uniform requires lo <= hi, got {lo}, {hi}")
        if size is None:
            u = (self.next_raw() >> 11) * _INV_2_53
            return lo + (hi - lo) * u
        shape = _as_shape(size)
        u = (self.raw(_count(shape)) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return (lo + (hi - lo) * u).reshape(shape)

    def normal(self, mu: float = 0.0, sigma: float = 1.0, size=None):
        if not sigma >= 0:
            raise ParameterError(f"normal requires sigma >= 0, got {sigma}")
        shape = () if size is None else _as_shape(size)
        n = _count(shape)
        u = (self.raw(2 * n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * math.pi * u2)
        out = mu + sigma * z
        if size is None:
            return float(out[0])
        return out.reshape(shape)

    def bernoulli(self, p: float, size=None):
        if not 0.0 <= p <= 1.0:
            raise ParameterError(f"bernoulli requires 0 <= p <= 1, got {p}")
        if size is None:
            return 1 if self.uniform() < p else 0
        return (self.uniform(size=size) < p).astype(np.int64)

    def int_below(self, n: int, size=None):
        if n < 1:
            raise ParameterError(f"int_below requires n >= 1, got {n}")
        if size is None:
            return min(int(self.uniform() * n), n - 1)
        k = np.floor(self.uniform(size=size) * n).astype(np.int64)
        return np.minimum(k, n - 1)

    # derived generators

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child generators for ``n`` tasks.

        Consumes one raw draw from the parent; child ``i`` is seeded with
        ``splitmix64(draw ^ i)`` so workers can be scheduled in any order.
        """
        base = self.next_raw()
        return [Rng(splitmix64(base ^ i)) for i in range(n)]


def _as_shape(size) -> tuple:
    return (int(size),) if np.isscalar(size) else tuple(int(s) for s in size)


def _count(shape: tuple) -> int:
    return math.prod(shape)


def make_rng(seed: int) -> Rng:
    return Rng(seed)


def draw(rng: Rng, dist: str, *params):
    """Single draw from a named distribution.

    ``dist`` is one of ``uniform(lo, hi)``, ``normal(mu, sigma)``,
    ``bernoulli(p)`` or ``int_below(n)``.
    """
    try:
        method = {
            "uniform": rng.uniform,
            "normal": rng.normal,
            "bernoulli": rng.bernoulli,
            "int_below": rng.int_below,
        }[dist]
    except KeyError:
        raise ParameterError(f"unknown distribution {dist!r}") from None
    return method(*params)


def shuffle(rng: Rng, items) -> list:
    """Fisher-Yates shuffle driven by ``int_below``; returns a new list."""
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = rng.int_below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def permutation(rng: Rng, n: int) -> np.ndarray:
    return np.asarray(shuffle(rng, range(n)), dtype=np.int64)


@numba.njit(cache=True)
def _matmul_kernel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with each entry summed in ascending inner index.

    The fixed order makes results independent of BLAS threading, so
    repeated and parallel runs produce identical bits.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    _matmul_kernel(a, b, out)
    return out
