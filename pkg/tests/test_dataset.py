import numpy as np
import pytest

from geoshift.core import make_rng
from geoshift.dataset import (
    SPLIT_NAMES,
    ClassVocabulary,
    DatasetBundle,
    GeneratorConfig,
    Sample,
    Split,
    decode_bundle,
    encode_bundle,
    generate,
    label_histogram,
    labels_csv,
    read_bundle,
    render,
    make_prototypes,
    tv_distance,
    write_bundle,
)
from geoshift.errors import BadMagicError, ChecksumError, ConfigError, EmptyInputError, TruncatedError, VersionError

SMALL = {name: 60 for name in SPLIT_NAMES}


@pytest.fixture(scope="module")
def small():
    return generate(GeneratorConfig(sizes=dict(SMALL), seed=4))


def test_degenerate_generator_single_prototype():
    cfg = GeneratorConfig(num_classes=1, sizes=dict(SMALL), source_prior=[1.0], target_prior=[1.0], delta=0.0,
                          background_sigma=0.0, prototype_sigma=0.0, max_offset=0.0, zoom=(1.0, 1.0))
    b = generate(cfg)
    proto = make_prototypes(cfg, make_rng(cfg.seed))
    want = np.clip(cfg.background_level + cfg.prototype_amplitude * render(proto, np.ones((1, 1)), 16, 16), 0, 1)
    for split in b.splits.values():
        assert split.labels.all()
        assert np.array_equal(split.images, np.broadcast_to(want.reshape(16, 16, 3).astype(np.float32), split.images.shape))


def test_deterministic(small):
    again = generate(GeneratorConfig(sizes=dict(SMALL), seed=4))
    assert encode_bundle(again) == encode_bundle(small)
    assert encode_bundle(generate(GeneratorConfig(sizes=dict(SMALL), seed=5))) != encode_bundle(small)


def test_bundle_shape_and_ranges(small):
    assert small.image_shape == (16, 16, 3)
    for name in SPLIT_NAMES:
        s = small[name]
        assert len(s) == 60 and s.images.dtype == np.float32
        assert s.images.min() >= 0 and s.images.max() <= 1
        assert s.labels.any(axis=1).all()
    ids = [sid for s in small.splits.values() for sid in s.ids]
    assert len(ids) == len(set(ids))


def test_regions(small):
    assert set(small["source_train"].regions) == set(small["source_val"].regions)
    assert set(small["target_tuning"].regions) == set(small["target_eval"].regions)
    assert set(small["target_hidden"].regions).isdisjoint(small["source_train"].regions)


def test_default_shift_visible_in_histograms():
    b = generate(GeneratorConfig())
    src = label_histogram(b["source_train"], b.vocabulary)
    tgt = label_histogram(b["target_eval"], b.vocabulary)
    assert tv_distance(src, tgt) >= 0.9 * GeneratorConfig().delta


def test_priors_respected_on_large_split():
    cfg = GeneratorConfig(sizes={"source_train": 4000, **{n: 20 for n in SPLIT_NAMES[1:]}}, seed=1)
    b = generate(cfg)
    src, _, _ = cfg.priors()
    freq = label_histogram(b["source_train"], cfg.num_classes)
    # rejection of empty sets lifts each marginal to p / (1 - P(empty))
    p = src / (1 - np.prod(1 - src))
    se = np.sqrt(p * (1 - p) / 4000)
    assert np.all(np.abs(freq - p) < 4 * se)


def test_infeasible_delta():
    with pytest.raises(ConfigError):
        GeneratorConfig(delta=0.99).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(channels=2).validate()


def test_label_histogram_cases():
    s = Sample("a", np.zeros((1, 1, 1)), frozenset({0}), 0)
    assert label_histogram([s], 2).tolist() == [1.0, 0.0]
    with pytest.raises(EmptyInputError):
        label_histogram([], 2)
    rng = make_rng(5)
    labels = rng.uniform(size=(100, 7)) < 0.3
    split = Split("x", [f"x{i}" for i in range(100)], np.zeros((100, 1, 1, 1)), labels, np.zeros(100))
    naive = [sum(1 for row in labels if row[k]) / 100 for k in range(7)]
    assert np.allclose(label_histogram(split, 7), naive, atol=0)
    assert np.array_equal(label_histogram(list(split) * 2, 7), label_histogram(split, 7))


def test_roundtrip(small, tmp_path):
    path = tmp_path / "b.gsd"
    write_bundle(small, path)
    assert read_bundle(path) == small
    assert encode_bundle(read_bundle(path)) == path.read_bytes()


def test_container_errors(small):
    data = encode_bundle(small)
    with pytest.raises(BadMagicError):
        decode_bundle(b"XXXX" + data[4:])
    with pytest.raises(VersionError):
        decode_bundle(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(TruncatedError):
        decode_bundle(data[: len(data) // 2])
    corrupt = bytearray(data)
    corrupt[-10] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_bundle(bytes(corrupt))


def test_bundle_rejects_duplicate_ids():
    split = Split("a", ["x", "y"], np.zeros((2, 1, 1, 1)), np.ones((2, 2)), np.zeros(2))
    other = Split("b", ["y"], np.zeros((1, 1, 1, 1)), np.ones((1, 2)), np.zeros(1))
    with pytest.raises(ConfigError):
        DatasetBundle(ClassVocabulary.default(2), {"a": split, "b": other})
    with pytest.raises(ConfigError):
        ClassVocabulary(["a", "a"])


def test_labels_csv(small):
    lines = labels_csv([small["source_val"]]).splitlines()
    assert lines[0] == "sample_id,region_id,labels"
    sid, region, labels = lines[1].split(",")
    assert sid == small["source_val"].ids[0]
    assert {int(k) for k in labels.split()} == small["source_val"][0].labels
