import numpy as np
import pytest

from geoshift import augment as A
from geoshift.core import make_rng
from geoshift.errors import ParameterError, ShapeError

TWO = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]


def brute_median(img):
    # per-pixel median of the 9 reflect-padded neighbours, one pixel at a time
    h, w, c = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                vals = []
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        yy = -yy if yy < 0 else (2 * (h - 1) - yy if yy >= h else yy)
                        xx = -xx if xx < 0 else (2 * (w - 1) - xx if xx >= w else xx)
                        vals.append(img[yy, xx, ch])
                out[y, x, ch] = sorted(vals)[4]
    return out


def plan_reference(images, plan):
    # apply a drawn plan one image at a time with the numpy primitives
    out = []
    for s, img in enumerate(images):
        x = img.copy()
        for j, kind in enumerate(A.KINDS):
            if not plan.fire[s, j]:
                continue
            if kind == "rotate90":
                x = A.rot90(x, int(plan.quarter_turns[s]))
            elif kind == "flip":
                x = A.flip(x, A.FLIP_MODES[plan.flip_mode[s]])
            elif kind == "transpose":
                x = A.transpose(x)
            elif kind == "gauss_noise":
                x = np.clip(x + plan.noise[s], 0, 1).astype(np.float32)
            elif kind == "median_blur":
                x = A.median_blur(x)
            elif kind == "shift":
                x = A.shift(x, plan.dx[s], plan.dy[s])
            elif kind == "rotate":
                x = A._affine_nearest(x, *plan.rotate_coef[s])
            elif kind == "scale":
                x = A._affine_nearest(x, *plan.scale_coef[s])
            elif kind == "brightness":
                x = A.brightness(x, plan.delta[s])
            else:
                x = A.shift_hsv(x, *plan.hsv_shift[s])
        out.append(x)
    return np.stack(out)


def test_hand_geometry():
    assert np.array_equal(A.rot90(TWO, 1)[..., 0], [[2, 4], [1, 3]])
    assert np.array_equal(A.flip(TWO, "horizontal")[..., 0], [[2, 1], [4, 3]])
    assert np.array_equal(A.transpose(TWO)[..., 0], [[1, 3], [2, 4]])


def test_group_identities_bit_exact():
    rng = make_rng(0)
    for _ in range(20):
        img = rng.uniform(size=(7, 7, 3)).astype(np.float32)
        x = img
        for _ in range(4):
            x = A.rot90(x)
        assert np.array_equal(x, img)
        for mode in A.FLIP_MODES:
            assert np.array_equal(A.flip(A.flip(img, mode), mode), img)
        assert np.array_equal(A.transpose(A.transpose(img)), img)


def test_median_impulse_and_bruteforce():
    img = np.zeros((5, 5, 1))
    img[2, 2] = 1.0
    assert not A.median_blur(img).any()
    rng = make_rng(1)
    for _ in range(20):
        img = rng.uniform(size=(7, 7, 3))
        assert np.array_equal(A.median_blur(img), brute_median(img))


def test_median_too_small():
    with pytest.raises(ShapeError):
        A.median_blur(np.zeros((2, 5, 1)))


def test_hsv_hand_values_and_roundtrip():
    assert np.allclose(A.rgb_to_hsv(np.array([[[1.0, 0.0, 0.0]]])), [[[0, 1, 1]]])
    assert np.allclose(A.rgb_to_hsv(np.array([[[0.5, 0.5, 0.5]]])), [[[0, 0, 0.5]]])
    rgb = make_rng(2).uniform(size=(64, 64, 3))
    assert np.max(np.abs(A.hsv_to_rgb(A.rgb_to_hsv(rgb)) - rgb)) <= 1e-6
    with pytest.raises(ShapeError):
        A.rgb_to_hsv(np.zeros((2, 2, 1)))


def test_shift_inverse_on_interior():
    img = make_rng(3).uniform(size=(10, 12, 1))
    back = A.shift(A.shift(img, 2, -1), -2, 1)
    assert np.array_equal(back[1:-1, 2:-2], img[1:-1, 2:-2])


def test_outputs_stay_in_range_and_shape():
    rng = make_rng(4)
    cfg = A.AugmentConfig({k: 1.0 for k in A.KINDS})
    for kind in A.KINDS:
        img = rng.uniform(size=(9, 9, 3)).astype(np.float32)
        out = A.apply_transform(img, A.TransformSpec(kind), rng)
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
    out = A.apply_pipeline(img, cfg, rng)
    assert out.shape == img.shape


def test_all_zero_probabilities_is_identity():
    img = make_rng(5).uniform(size=(8, 8, 3)).astype(np.float32)
    off = A.AugmentConfig.disabled()
    assert np.array_equal(A.apply_pipeline(img, off, make_rng(0)), img)
    stack = np.stack([img] * 4)
    assert np.array_equal(A.augment_batch(stack, off, make_rng(0)), stack)


def test_pipeline_deterministic():
    img = make_rng(6).uniform(size=(8, 8, 3)).astype(np.float32)
    cfg = A.AugmentConfig()
    assert np.array_equal(A.apply_pipeline(img, cfg, make_rng(9)), A.apply_pipeline(img, cfg, make_rng(9)))


def test_pipeline_rates_match_probabilities():
    cfg, rng = A.AugmentConfig(), make_rng(7)
    img = np.full((4, 4, 3), 0.5, dtype=np.float32)
    n = 10_000
    counts = dict.fromkeys(A.KINDS, 0)
    for _ in range(n):
        trace = []
        A.apply_pipeline(img, cfg, rng, trace)
        for kind in trace:
            counts[kind] += 1
    for kind, p in A.DEFAULT_PROBS.items():
        assert abs(counts[kind] / n - p) <= 3 * np.sqrt(p * (1 - p) / n), kind
    assert 0.08 <= counts["gauss_noise"] / n <= 0.12


def test_batch_rates_match_probabilities():
    plan = A.draw_plan((10_000, 4, 4, 3), A.AugmentConfig(), make_rng(8))
    rates = plan.fire.mean(axis=0)
    for j, kind in enumerate(A.KINDS):
        p = A.DEFAULT_PROBS[kind]
        assert abs(rates[j] - p) <= 3 * np.sqrt(p * (1 - p) / 10_000), kind


@pytest.mark.parametrize("shape", [(120, 16, 16, 3), (40, 7, 9, 3), (40, 8, 8, 1)])
def test_plan_kernel_matches_primitives(shape):
    rng = make_rng(5)
    x = rng.uniform(size=shape).astype(np.float32)
    x[:5] = np.round(x[:5] * 4) / 4  # exact ties exercise the hue branches
    plan = A.draw_plan(shape, A.AugmentConfig(), rng)
    assert np.array_equal(A.apply_plan(x, plan), plan_reference(x, plan))


def test_non_square_keeps_shape():
    x = make_rng(1).uniform(size=(30, 6, 9, 3)).astype(np.float32)
    cfg = A.AugmentConfig({k: 1.0 for k in A.KINDS})
    assert A.augment_batch(x, cfg, make_rng(2)).shape == x.shape


def test_spec_validation():
    with pytest.raises(ParameterError):
        A.TransformSpec("shift", {"max_fraction": 0.2})
    with pytest.raises(ParameterError):
        A.TransformSpec("rotate", {"angle": (0.0, 90.0)})
    with pytest.raises(ParameterError):
        A.TransformSpec("scale", {"factor": (0.5, 1.0)})
    with pytest.raises(ParameterError):
        A.TransformSpec("median_blur", {"kernel": 5})
    with pytest.raises(ParameterError):
        A.AugmentConfig({"flip": 1.5})
    with pytest.raises(ParameterError):
        A.AugmentConfig({"warp": 0.5})
    assert A.AugmentConfig().probs == A.DEFAULT_PROBS
