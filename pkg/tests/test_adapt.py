import numpy as np
import pytest

from geoshift import metrics
from geoshift.adapt import (
    AdaptConfig,
    FoldModels,
    TuningFolds,
    adapt,
    adapt_fold,
    load_fold_models,
    make_folds,
    predict_fold_averaged,
    read_manifest,
    save_fold_models,
)
from geoshift.core import make_rng
from geoshift.dataset import SPLIT_NAMES, GeneratorConfig, Split, generate
from geoshift.errors import ConfigError, ShapeError
from geoshift.model import ModelConfig, checkpoint_crc, encode_checkpoint, init, predict_scores
from geoshift.optimize import TrainConfig, train_base

FAST = dict(k=3, epochs=2, batches_per_epoch=4, bn_batches=3)


def ids_split(n):
    return Split("t", [f"id{i}" for i in range(n)], np.zeros((n, 1, 1, 1)), np.zeros((n, 2)), np.zeros(n))


@pytest.fixture(scope="module")
def small():
    sizes = {name: 80 for name in SPLIT_NAMES}
    b = generate(GeneratorConfig(sizes=sizes, seed=2))
    base, _ = train_base(ModelConfig(768, 12), b, TrainConfig(max_epochs=2))
    return b, base


@pytest.fixture(scope="module")
def desk():
    b = generate(GeneratorConfig(seed=6))
    base, _ = train_base(ModelConfig(768, 12), b, TrainConfig(seed=6))
    return b, base


def test_folds_partition():
    folds = make_folds(ids_split(1000), 10, make_rng(0))
    assert [len(f) for f in folds.folds] == [100] * 10
    assert sorted(sid for f in folds.folds for sid in f) == sorted(f"id{i}" for i in range(1000))
    assert make_folds(ids_split(1000), 10, make_rng(0)) == folds
    assert [len(f) for f in make_folds(ids_split(10), 10, make_rng(1)).folds] == [1] * 10
    assert sorted(len(f) for f in make_folds(ids_split(23), 5, make_rng(1)).folds) == [4, 4, 5, 5, 5]


def test_folds_errors():
    with pytest.raises(ConfigError):
        make_folds(ids_split(5), 10, make_rng(0))
    with pytest.raises(ConfigError):
        make_folds(ids_split(5), 1, make_rng(0))
    with pytest.raises(ConfigError):
        TuningFolds(2, [["a", "b"], ["b"]])


def test_config_validation():
    with pytest.raises(ConfigError):
        AdaptConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        AdaptConfig(epochs=0)


def test_trunk_frozen_without_bn_recompute(small):
    b, base = small
    fm = adapt(base, b, AdaptConfig(alpha=0.5, recompute_bn=False, **FAST))
    for params in fm.models:
        for key in base.trunk_keys:
            assert params[key].tobytes() == base[key].tobytes()
        assert not np.array_equal(params["head.W"], base["head.W"])


def test_bn_recompute_only_touches_running_stats(small):
    b, base = small
    fm = adapt(base, b, AdaptConfig(alpha=0.5, **FAST))
    for params in fm.models:
        for key in base.trunk_keys:
            same = params[key].tobytes() == base[key].tobytes()
            assert same != key.endswith(("running_mean", "running_var"))


def test_reinit_head_flag(small):
    b, base = small
    fm = adapt(base, b, AdaptConfig(reinit_head=True, **FAST))
    assert fm.k == 3 and all(np.all(np.isfinite(m["head.W"])) for m in fm.models)


def test_deterministic_and_parallel_equal(small):
    b, base = small
    cfg = AdaptConfig(alpha=0.25, **FAST)
    one = adapt(base, b, cfg)
    again = adapt(base, b, cfg, jobs=1)
    par = adapt(base, b, cfg, jobs=2)
    for x, y, z in zip(one.models, again.models, par.models):
        assert encode_checkpoint(x) == encode_checkpoint(y) == encode_checkpoint(z)
    assert one.base_crc == checkpoint_crc(base)


def test_fold_average_values():
    cfg = ModelConfig(4, 1, (3,))
    x = make_rng(0).normal(size=(5, 4))

    def const(p):
        params = init(cfg, make_rng(1))
        return params.updated({"head.W": np.zeros((3, 1)), "head.b": np.array([np.log(p / (1 - p))])})

    out = predict_fold_averaged([const(0.2), const(0.4)], x)
    assert np.allclose(out, 0.3, atol=1e-15)
    single = const(0.2)
    assert np.array_equal(predict_fold_averaged([single], x), predict_scores(single, x))


def test_fold_average_naive_oracle():
    cfg = ModelConfig(6, 3, (5,))
    models = [init(cfg, make_rng(s)) for s in range(10)]
    x = make_rng(99).normal(size=(7, 6))
    naive = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            naive[i, j] = sum(predict_scores(m, x)[i, j] for m in models) / 10
    assert np.max(np.abs(predict_fold_averaged(models, x) - naive)) <= 1e-15


def test_fold_average_errors():
    with pytest.raises(ConfigError):
        predict_fold_averaged([], np.zeros((1, 4)))
    a, b = init(ModelConfig(4, 2, (3,)), make_rng(0)), init(ModelConfig(4, 3, (3,)), make_rng(0))
    with pytest.raises(ShapeError):
        predict_fold_averaged([a, b], np.zeros((2, 4)))


def test_persistence_roundtrip(small, tmp_path):
    b, base = small
    fm = adapt(base, b, AdaptConfig(alpha=0.5, **FAST))
    save_fold_models(fm, tmp_path / "fm")
    meta = read_manifest(tmp_path / "fm")
    assert meta["k"] == "3" and float(meta["alpha"]) == 0.5 and int(meta["base_crc"], 16) == fm.base_crc
    back = load_fold_models(tmp_path / "fm")
    assert isinstance(back, FoldModels) and back.config == fm.config
    assert all(x == y for x, y in zip(back.models, fm.models))
    x = b["target_eval"].flat()
    assert np.array_equal(predict_fold_averaged(back, x), predict_fold_averaged(fm, x))


def test_alpha0_beats_base_on_held_out_fold(desk):
    b, base = desk
    cfg = AdaptConfig(alpha=0.0, seed=6)
    folds = make_folds(b["target_tuning"], cfg.k, make_rng(1))
    for i in range(2):
        held = b["target_tuning"].subset([j for j, sid in enumerate(b["target_tuning"].ids) if sid in set(folds.folds[i])])
        tuned = adapt_fold(base, i, folds, b, cfg)
        f_tuned = metrics.mean_f2(predict_scores(tuned, held.flat()), held.labels)
        f_base = metrics.mean_f2(predict_scores(base, held.flat()), held.labels)
        assert f_tuned > f_base
