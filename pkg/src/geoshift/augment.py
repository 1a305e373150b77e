"""Image augmentations used while re-fitting the classifier head.

Images are (H, W, C) arrays with values in [0, 1]; every primitive also
accepts a stack (N, H, W, C). Geometric transforms keep the spatial size,
resample with nearest neighbour and fill borders by mirror reflection
(edge pixel not repeated). Photometric transforms clamp back to [0, 1].

Quarter turns and transposition only make sense for square images; on
non-square inputs quarter turns are restricted to 0 or 180 degrees and
transposition is skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from .core import Rng
from .errors import ParameterError, ShapeError

KINDS = (
    "rotate90",
    "flip",
    "transpose",
    "gauss_noise",
    "median_blur",
    "shift",
    "rotate",
    "scale",
    "brightness",
    "hsv",
)

DEFAULT_PROBS = {
    "rotate90": 0.5,
    "flip": 0.5,
    "transpose": 0.5,
    "gauss_noise": 0.1,
    "median_blur": 0.2,
    "shift": 0.5,
    "rotate": 0.5,
    "scale": 0.5,
    "brightness": 0.15,
    "hsv": 0.5,
}

FLIP_MODES = ("horizontal", "vertical", "both")


def default_params(kind: str) -> dict:
    return {
        "rotate90": {},
        "flip": {},
        "transpose": {},
        "gauss_noise": {"sigma": (0.01, 0.05)},
        "median_blur": {"kernel": 3},
        "shift": {"max_fraction": 0.1},
        "rotate": {"angle": (0.0, 45.0)},
        "scale": {"factor": (0.8, 1.2)},
        "brightness": {"delta": (-0.2, 0.2)},
        "hsv": {"hue": (-0.05, 0.05), "saturation": (-0.1, 0.1), "value": (-0.1, 0.1)},
    }[kind]


@dataclass
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown transform kind {self.kind!r}")
        merged = dict(default_params(self.kind))
        merged.update(self.params)
        self.params = merged
        if self.kind == "shift" and not 0.0 <= merged["max_fraction"] <= 0.1:
            raise ParameterError("shift is limited to 10% of each dimension")
        if self.kind == "rotate":
            lo, hi = merged["angle"]
            if not 0.0 <= lo <= hi <= 45.0:
                raise ParameterError("rotation angle range must lie in [0, 45] degrees")
        if self.kind == "scale":
            lo, hi = merged["factor"]
            if not 0.8 <= lo <= hi <= 1.2:
                raise ParameterError("scale factor range must lie in [0.8, 1.2]")
        if self.kind == "median_blur" and merged["kernel"] != 3:
            raise ParameterError("median blur kernel is fixed at 3")


@dataclass
class AugmentConfig:
    probs: dict = field(default_factory=lambda: dict(DEFAULT_PROBS))

    def __post_init__(self):
        unknown = set(self.probs) - set(KINDS)
        if unknown:
            raise ParameterError(f"unknown augmentation kinds {sorted(unknown)}")
        self.probs = {k: float(self.probs.get(k, DEFAULT_PROBS[k])) for k in KINDS}
        for kind, p in self.probs.items():
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"aug.{kind}.prob must lie in [0, 1], got {p}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls({k: 0.0 for k in KINDS})


# primitives; spatial axes are always (-3, -2)


def reflect_index(idx, n: int):
    """Map arbitrary integer indices into [0, n) by mirror reflection."""
    idx = np.asarray(idx, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx > n - 1, period - idx, idx)


def rot90(img: np.ndarray, k: int = 1) -> np.ndarray:
    """Rotate counter-clockwise by ``k`` quarter turns."""
    return np.ascontiguousarray(np.rot90(img, k, axes=(-3, -2)))


def flip(img: np.ndarray, mode: str = "horizontal") -> np.ndarray:
    if mode == "horizontal":
        return np.ascontiguousarray(img[..., :, ::-1, :])
    if mode == "vertical":
        return np.ascontiguousarray(img[..., ::-1, :, :])
    if mode == "both":
        return np.ascontiguousarray(img[..., ::-1, ::-1, :])
    raise ParameterError(f"unknown flip mode {mode!r}")


def transpose(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(img, -3, -2))


def median_blur(img: np.ndarray, kernel: int = 3) -> np.ndarray:
    h, w = img.shape[-3:-1]
    if h < kernel or w < kernel:
        raise ShapeError(f"image {h}x{w} is smaller than the {kernel}x{kernel} median kernel")
    r = kernel // 2
    pad = [(0, 0)] * (img.ndim - 3) + [(r, r), (r, r), (0, 0)]
    padded = np.pad(img, pad, mode="reflect")
    windows = sliding_window_view(padded, (kernel, kernel), axis=(-3, -2))
    flat = windows.reshape(windows.shape[:-2] + (kernel * kernel,))
    mid = kernel * kernel // 2
    return np.partition(flat, mid, axis=-1)[..., mid]


def _remap(img: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Gather ``img[..., src_y, src_x, :]`` with reflected indices.

    For a stack, ``src_y``/``src_x`` carry a leading per-image axis.
    """
    h, w = img.shape[-3:-1]
    sy, sx = reflect_index(src_y, h), reflect_index(src_x, w)
    if img.ndim == 3:
        return img[sy, sx]
    n = img.shape[0]
    sy = np.broadcast_to(sy, (n, h, w))
    sx = np.broadcast_to(sx, (n, h, w))
    return img[np.arange(n)[:, None, None], sy, sx]


def _grid(h: int, w: int, centred: bool):
    if centred:
        return np.meshgrid(np.arange(h) - (h - 1) / 2.0, np.arange(w) - (w - 1) / 2.0, indexing="ij")
    return np.meshgrid(np.arange(h), np.arange(w), indexing="ij")


def shift(img: np.ndarray, dx, dy) -> np.ndarray:
    """Translate content by ``dx`` columns and ``dy`` rows (scalars, or one
    value per image for a stack)."""
    h, w = img.shape[-3:-1]
    ys, xs = _grid(h, w, centred=False)
    dx = np.asarray(dx, dtype=np.int64)[..., None, None]
    dy = np.asarray(dy, dtype=np.int64)[..., None, None]
    return _remap(img, ys - dy, xs - dx)


def _affine_nearest(img: np.ndarray, a00, a01, a10, a11) -> np.ndarray:
    # (a00 a01; a10 a11) maps output offsets from the centre to source offsets
    h, w = img.shape[-3:-1]
    ys, xs = _grid(h, w, centred=True)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a00, a01, a10, a11 = (np.asarray(a, dtype=np.float64)[..., None, None] for a in (a00, a01, a10, a11))
    sy = a00 * ys + a01 * xs + cy
    sx = a10 * ys + a11 * xs + cx
    return _remap(img, np.rint(sy).astype(np.int64), np.rint(sx).astype(np.int64))


def rotate(img: np.ndarray, angle) -> np.ndarray:
    """Counter-clockwise rotation about the image centre, in degrees."""
    t = np.deg2rad(np.asarray(angle, dtype=np.float64))
    c, s = np.cos(t), np.sin(t)
    # rows point down, so the inverse map of a visual CCW turn is (c, s; -s, c)
    return _affine_nearest(img, c, s, -s, c)


def scale(img: np.ndarray, factor) -> np.ndarray:
    inv = 1.0 / np.asarray(factor, dtype=np.float64)
    zero = np.zeros_like(inv)
    return _affine_nearest(img, inv, zero, zero, inv)


def _per_image(values, img: np.ndarray, trailing: int = 3):
    values = np.asarray(values, dtype=np.float64)
    if img.ndim == 4 and values.ndim == 1:
        return values.reshape(values.shape + (1,) * trailing)
    return values


def gauss_noise(img: np.ndarray, sigma, rng: Rng) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, size=img.shape) * _per_image(sigma, img)
    return np.clip(img + noise, 0.0, 1.0).astype(img.dtype)


def brightness(img: np.ndarray, delta) -> np.ndarray:
    return np.clip(img + _per_image(delta, img), 0.0, 1.0).astype(img.dtype)


def _check_rgb(img: np.ndarray):
    if img.ndim < 3 or img.shape[-1] != 3:
        raise ShapeError(f"HSV conversion needs 3 channels, got shape {img.shape}")


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV with hue scaled to [0, 1); achromatic hue is 0."""
    _check_rgb(img)
    rgb = np.asarray(img, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    chroma = v - rgb.min(axis=-1)
    safe = np.where(chroma > 0, chroma, 1.0)
    s = np.where(v > 0, chroma / np.where(v > 0, v, 1.0), 0.0)
    h = np.where(
        v == r,
        np.mod((g - b) / safe, 6.0),
        np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(chroma > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    _check_rgb(img)
    hsv = np.asarray(img, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = np.mod(h, 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    conds = [sector == i for i in range(6)]
    r = np.select(conds, [v, q, p, p, t, v])
    g = np.select(conds, [t, v, v, q, p, p])
    b = np.select(conds, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def shift_hsv(img: np.ndarray, dh, ds, dv) -> np.ndarray:
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = np.mod(hsv[..., 0] + _per_image(dh, img, 2), 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + _per_image(ds, img, 2), 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + _per_image(dv, img, 2), 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0).astype(img.dtype)


def _shift_limits(h: int, w: int, max_fraction: float):
    return int(max_fraction * h), int(max_fraction * w)


def apply_transform(img: np.ndarray, spec: TransformSpec, rng: Rng) -> np.ndarray:
    """Apply one transform to a single image, drawing its parameters from ``spec``."""
    kind, prm = spec.kind, spec.params
    h, w = img.shape[:2]
    square = h == w
    if kind == "rotate90":
        k = rng.int_below(4)
        return rot90(img, k if square else 2 * (k // 2))
    if kind == "flip":
        return flip(img, FLIP_MODES[rng.int_below(3)])
    if kind == "transpose":
        return transpose(img) if square else img.copy()
    if kind == "gauss_noise":
        return gauss_noise(img, rng.uniform(*prm["sigma"]), rng)
    if kind == "median_blur":
        return median_blur(img, prm["kernel"])
    if kind == "shift":
        my, mx = _shift_limits(h, w, prm["max_fraction"])
        dy = rng.int_below(2 * my + 1) - my
        dx = rng.int_below(2 * mx + 1) - mx
        return shift(img, dx, dy)
    if kind == "rotate":
        return rotate(img, rng.uniform(*prm["angle"]))
    if kind == "scale":
        return scale(img, rng.uniform(*prm["factor"]))
    if kind == "brightness":
        return brightness(img, rng.uniform(*prm["delta"]))
    if kind == "hsv":
        dh = rng.uniform(*prm["hue"])
        ds = rng.uniform(*prm["saturation"])
        dv = rng.uniform(*prm["value"])
        return shift_hsv(img, dh, ds, dv) if img.shape[-1] == 3 else img.copy()
    raise ParameterError(f"unknown transform kind {kind!r}")


_DEFAULT_SPECS = {kind: TransformSpec(kind) for kind in KINDS}


def apply_pipeline(img: np.ndarray, cfg: AugmentConfig, rng: Rng, trace: list | None = None):
    """Run every transform in fixed order, each gated by its own coin flip.

    Parameters are drawn only for transforms that fire. Fired kinds are
    appended to ``trace`` when one is given.
    """
    out = img.copy()
    for kind in KINDS:
        if rng.bernoulli(cfg.probs[kind]):
            out = apply_transform(out, _DEFAULT_SPECS[kind], rng)
            if trace is not None:
                trace.append(kind)
    return out


class Plan(NamedTuple):
    """Coin flips and parameters for one stack, drawn before any pixel work."""

    fire: np.ndarray  # (N, len(KINDS)) bool
    quarter_turns: np.ndarray  # (N,) int
    flip_mode: np.ndarray  # (N,) int, index into FLIP_MODES
    noise: np.ndarray  # (N, H, W, C) already scaled by sigma; zero where not fired
    dy: np.ndarray
    dx: np.ndarray
    rotate_coef: np.ndarray  # (N, 4) inverse maps, see _affine_nearest
    scale_coef: np.ndarray  # (N, 4)
    delta: np.ndarray
    hsv_shift: np.ndarray  # (N, 3)


def draw_plan(shape: tuple, cfg: AugmentConfig, rng: Rng) -> Plan:
    """Draw the whole pipeline for an (N, H, W, C) stack, kind by kind in
    pipeline order: N coin flips, then N parameter draws (drawn even where
    the coin came up 0). The gauss_noise field is drawn for fired images only."""
    n, h, w, c = shape
    square = h == w
    fire = np.zeros((n, len(KINDS)), dtype=bool)
    zeros = np.zeros(n)
    k = flip_mode = dy = dx = np.zeros(n, dtype=np.int64)
    noise = np.zeros(shape)
    rotate_coef = scale_coef = np.zeros((n, 4))
    delta, hsv_shift = zeros, np.zeros((n, 3))
    for j, kind in enumerate(KINDS):
        fire[:, j] = rng.uniform(size=n) < cfg.probs[kind]
        prm = _DEFAULT_SPECS[kind].params
        if kind == "rotate90":
            k = rng.int_below(4, size=n)
            if not square:
                k = 2 * (k // 2)
        elif kind == "flip":
            flip_mode = rng.int_below(3, size=n)
        elif kind == "transpose":
            if not square:
                fire[:, j] = False
        elif kind == "gauss_noise":
            sigma = rng.uniform(*prm["sigma"], size=n)
            sel = fire[:, j]
            if sel.any():
                noise[sel] = rng.normal(0.0, 1.0, size=(int(sel.sum()), h, w, c)) * sigma[sel, None, None, None]
        elif kind == "shift":
            my, mx = _shift_limits(h, w, prm["max_fraction"])
            dy = rng.int_below(2 * my + 1, size=n) - my
            dx = rng.int_below(2 * mx + 1, size=n) - mx
        elif kind == "rotate":
            t = np.deg2rad(rng.uniform(*prm["angle"], size=n))
            cos, sin = np.cos(t), np.sin(t)
            rotate_coef = np.stack([cos, sin, -sin, cos], axis=1)
        elif kind == "scale":
            inv = 1.0 / rng.uniform(*prm["factor"], size=n)
            scale_coef = np.stack([inv, zeros, zeros, inv], axis=1)
        elif kind == "brightness":
            delta = rng.uniform(*prm["delta"], size=n)
        elif kind == "hsv":
            hsv_shift = np.stack(
                [rng.uniform(*prm[key], size=n) for key in ("hue", "saturation", "value")], axis=1
            )
            if c != 3:
                fire[:, j] = False
    return Plan(fire, k, flip_mode, noise, dy, dx, rotate_coef, scale_coef, delta, hsv_shift)


def apply_plan(images: np.ndarray, plan: Plan) -> np.ndarray:
    images = np.ascontiguousarray(images, dtype=np.float32)
    out = np.empty_like(images)
    if len(images):
        _plan_kernel(images, out, *plan)
    return out


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Vectorized pipeline over an (N, H, W, C) float32 stack.

    Same transforms, order and probabilities as :func:`apply_pipeline`;
    the random draws follow :func:`draw_plan`.
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"expected an (N, H, W, C) stack, got shape {images.shape}")
    return apply_plan(images, draw_plan(images.shape, cfg, rng))


# compiled kernel; mirrors the primitives above operation for operation


@njit(cache=True)
def _reflect(i, n):
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return period - i if i > n - 1 else i


@njit(cache=True)
def _fmod_pos(a, b):
    m = np.fmod(a, b)
    if m < 0.0:
        m += b
    return m


@njit(cache=True)
def _clip01(x):
    return min(max(x, 0.0), 1.0)


@njit(cache=True)
def _gather_affine(src, dst, a00, a01, a10, a11):
    h, w, c = src.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    for i in range(h):
        y = i - cy
        for j in range(w):
            x = j - cx
            sy = _reflect(np.int64(np.rint(a00 * y + a01 * x + cy)), h)
            sx = _reflect(np.int64(np.rint(a10 * y + a11 * x + cx)), w)
            for ch in range(c):
                dst[i, j, ch] = src[sy, sx, ch]


# exchange network for the median of nine values
@njit(cache=True)
def _median3(src, dst, rows, cols):
    h, w, c = src.shape
    for i in range(h):
        r0, r1, r2 = rows[i], rows[i + 1], rows[i + 2]
        for j in range(w):
            c0, c1, c2 = cols[j], cols[j + 1], cols[j + 2]
            for ch in range(c):
                p0, p1, p2 = src[r0, c0, ch], src[r0, c1, ch], src[r0, c2, ch]
                p3, p4, p5 = src[r1, c0, ch], src[r1, c1, ch], src[r1, c2, ch]
                p6, p7, p8 = src[r2, c0, ch], src[r2, c1, ch], src[r2, c2, ch]
                p1, p2 = min(p1, p2), max(p1, p2)
                p4, p5 = min(p4, p5), max(p4, p5)
                p7, p8 = min(p7, p8), max(p7, p8)
                p0, p1 = min(p0, p1), max(p0, p1)
                p3, p4 = min(p3, p4), max(p3, p4)
                p6, p7 = min(p6, p7), max(p6, p7)
                p1, p2 = min(p1, p2), max(p1, p2)
                p4, p5 = min(p4, p5), max(p4, p5)
                p7, p8 = min(p7, p8), max(p7, p8)
                p0, p3 = min(p0, p3), max(p0, p3)
                p5, p8 = min(p5, p8), max(p5, p8)
                p4, p7 = min(p4, p7), max(p4, p7)
                p3, p6 = min(p3, p6), max(p3, p6)
                p1, p4 = min(p1, p4), max(p1, p4)
                p2, p5 = min(p2, p5), max(p2, p5)
                p4, p7 = min(p4, p7), max(p4, p7)
                p4, p2 = min(p4, p2), max(p4, p2)
                p6, p4 = min(p6, p4), max(p6, p4)
                p4, p2 = min(p4, p2), max(p4, p2)
                dst[i, j, ch] = p4


@njit(cache=True)
def _plan_kernel(images, out, fire, quarter_turns, flip_mode, noise, dy, dx,
                 rotate_coef, scale_coef, delta, hsv_shift):
    n, h, w, c = images.shape
    cur = np.empty((h, w, c), dtype=np.float32)
    nxt = np.empty((h, w, c), dtype=np.float32)
    rows = np.array([_reflect(i - 1, h) for i in range(h + 2)])
    cols = np.array([_reflect(j - 1, w) for j in range(w + 2)])
    for s in range(n):
        cur[:] = images[s]
        for kind in range(10):
            if not fire[s, kind]:
                continue
            if kind == 0:  # rotate90, counter-clockwise
                k = quarter_turns[s]
                if k == 0:
                    continue
                for i in range(h):
                    for j in range(w):
                        if k == 1:
                            si, sj = j, w - 1 - i
                        elif k == 2:
                            si, sj = h - 1 - i, w - 1 - j
                        else:
                            si, sj = h - 1 - j, i
                        for ch in range(c):
                            nxt[i, j, ch] = cur[si, sj, ch]
            elif kind == 1:  # flip: horizontal, vertical, both
                m = flip_mode[s]
                for i in range(h):
                    for j in range(w):
                        si = i if m == 0 else h - 1 - i
                        sj = j if m == 1 else w - 1 - j
                        for ch in range(c):
                            nxt[i, j, ch] = cur[si, sj, ch]
            elif kind == 2:  # transpose
                for i in range(h):
                    for j in range(w):
                        for ch in range(c):
                            nxt[i, j, ch] = cur[j, i, ch]
            elif kind == 3:  # gauss_noise
                for i in range(h):
                    for j in range(w):
                        for ch in range(c):
                            nxt[i, j, ch] = _clip01(np.float64(cur[i, j, ch]) + noise[s, i, j, ch])
            elif kind == 4:  # median_blur 3x3
                _median3(cur, nxt, rows, cols)
            elif kind == 5:  # shift
                for i in range(h):
                    si = _reflect(i - dy[s], h)
                    for j in range(w):
                        sj = _reflect(j - dx[s], w)
                        for ch in range(c):
                            nxt[i, j, ch] = cur[si, sj, ch]
            elif kind == 6 or kind == 7:  # rotate, scale
                coef = rotate_coef[s] if kind == 6 else scale_coef[s]
                _gather_affine(cur, nxt, coef[0], coef[1], coef[2], coef[3])
            elif kind == 8:  # brightness
                for i in range(h):
                    for j in range(w):
                        for ch in range(c):
                            nxt[i, j, ch] = _clip01(np.float64(cur[i, j, ch]) + delta[s])
            else:  # hsv shift
                dh, ds, dv = hsv_shift[s, 0], hsv_shift[s, 1], hsv_shift[s, 2]
                for i in range(h):
                    for j in range(w):
                        r = np.float64(cur[i, j, 0])
                        g = np.float64(cur[i, j, 1])
                        b = np.float64(cur[i, j, 2])
                        v = max(r, g, b)
                        chroma = v - min(r, g, b)
                        sat = chroma / v if v > 0 else 0.0
                        if chroma > 0:
                            if v == r:
                                hue = _fmod_pos((g - b) / chroma, 6.0)
                            elif v == g:
                                hue = (b - r) / chroma + 2.0
                            else:
                                hue = (r - g) / chroma + 4.0
                            hue = hue / 6.0
                        else:
                            hue = 0.0
                        hue = _fmod_pos(hue + dh, 1.0)
                        sat = _clip01(sat + ds)
                        v = _clip01(v + dv)
                        h6 = _fmod_pos(hue, 1.0) * 6.0
                        sector = np.int64(math.floor(h6)) % 6
                        f = h6 - math.floor(h6)
                        p = v * (1.0 - sat)
                        q = v * (1.0 - sat * f)
                        tt = v * (1.0 - sat * (1.0 - f))
                        if sector == 0:
                            r, g, b = v, tt, p
                        elif sector == 1:
                            r, g, b = q, v, p
                        elif sector == 2:
                            r, g, b = p, v, tt
                        elif sector == 3:
                            r, g, b = p, q, v
                        elif sector == 4:
                            r, g, b = tt, p, v
                        else:
                            r, g, b = v, p, q
                        nxt[i, j, 0] = _clip01(r)
                        nxt[i, j, 1] = _clip01(g)
                        nxt[i, j, 2] = _clip01(b)
            cur, nxt = nxt, cur
        out[s] = cur
