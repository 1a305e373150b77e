import itertools

import numpy as np
import pytest

from geoshift import metrics
from geoshift.adapt import AdaptConfig, FoldModels, save_fold_models
from geoshift.core import make_rng
from geoshift.ensemble import (
    DEFAULT_GROUPS,
    EnsembleSpec,
    Group,
    WeightSearchConfig,
    combine,
    group_scores,
    load_spec,
    parse_spec_text,
    report_csv,
    search_grid,
    simplex_grid,
    spec_text,
    weighted_scores,
    write_spec,
)
from geoshift.errors import ConfigError, FormatError
from geoshift.model import ModelConfig, init, predict_scores, save_checkpoint

CFG = ModelConfig(6, 3, (5,))
X = make_rng(50).normal(size=(8, 6))


def model(seed):
    return init(CFG, make_rng(seed))


def folds(seeds, alpha):
    return FoldModels(0, [model(s) for s in seeds], AdaptConfig(alpha=alpha, k=2))


def test_group_single_and_pair_means():
    m = model(1)
    assert np.array_equal(group_scores(Group("g", [m]), X), predict_scores(m, X))
    a, b = model(2), model(3)
    naive = (predict_scores(a, X) + predict_scores(b, X)) / 2
    assert np.array_equal(group_scores(Group("g", [a, b]), X), naive)
    fm = folds([4, 5], 0.5)
    assert np.allclose(group_scores(Group("h", [fm], 0.5), X),
                       (predict_scores(fm.models[0], X) + predict_scores(fm.models[1], X)) / 2, atol=1e-15)


def test_group_validation():
    with pytest.raises(ConfigError):
        Group("g", [])
    with pytest.raises(ConfigError):
        Group("g", [folds([1], 0.5)], 0.0)
    with pytest.raises(ConfigError):
        Group("bad name", [model(1)])


def test_combine_hand_values():
    assert np.allclose(combine([0.6, 0.4], [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]), [[0.6, 0.4]])
    s = make_rng(0).uniform(size=(4, 3))
    assert np.allclose(combine([0.25, 0.25, 0.5], [s, s, s]), s, atol=1e-15)
    with pytest.raises(ConfigError):
        combine([1.0], [s, s])


def test_spec_weights():
    groups = [Group(name, [model(i)]) for i, (name, _, _) in enumerate(DEFAULT_GROUPS)]
    spec = EnsembleSpec(groups, [w for _, _, w in DEFAULT_GROUPS])
    assert abs(sum(spec.weights) - 1) <= 1e-9
    with pytest.raises(ConfigError):
        EnsembleSpec(groups, [0.5, 0.5, 0.5, 0.5])
    with pytest.raises(ConfigError):
        EnsembleSpec(groups, [1.0])
    out = weighted_scores(spec, X)
    assert np.all((out > 0) & (out < 1))


def test_simplex_grid():
    grid = simplex_grid(3, 4)
    assert len(grid) == 15 and grid == sorted(grid)
    assert all(abs(sum(w) - 1) < 1e-12 for w in grid)
    assert len(simplex_grid(4, 20)) == 1771


def test_search_config_validation():
    with pytest.raises(ConfigError):
        WeightSearchConfig(step=0.3)
    with pytest.raises(ConfigError):
        WeightSearchConfig(epsilon=-1)
    assert WeightSearchConfig().divisions == 20


def test_dominant_group_wins():
    r = make_rng(1)
    truth = r.uniform(size=(30, 4)) < 0.4
    good = np.where(truth, 0.9, 0.1)
    bad = r.uniform(size=(30, 4))
    w, _ = search_grid([bad, good], truth, [bad, good], truth, WeightSearchConfig(step=0.1))
    assert w[1] >= 0.5 and metrics.mean_f2(combine(w, [bad, good]), truth) == 1.0


def exhaustive(s1, t1, loc, tl, step, eps):
    # independent brute force over the 2-group grid, same ordering rules
    n = round(1 / step)
    rows = []
    for i in range(n + 1):
        w = (i / n, (n - i) / n)
        rows.append((w, metrics.mean_f2(w[0] * s1[0] + w[1] * s1[1], t1), metrics.mean_f2(w[0] * loc[0] + w[1] * loc[1], tl)))
    top = max(r[1] for r in rows)
    feas = [r for r in rows if r[1] >= top - eps]
    best_loc = max(r[2] for r in feas)
    cands = [r for r in feas if r[2] == best_loc]
    best_s1 = max(r[1] for r in cands)
    return min(r[0] for r in cands if r[1] == best_s1)


def test_search_matches_exhaustive_oracle():
    # hand-built tables: group 0 is right on stage 1, group 1 on local validation
    t1 = np.array([[1, 0], [0, 1]], dtype=bool)
    tl = np.array([[1, 1], [1, 0]], dtype=bool)
    s1 = [np.array([[0.9, 0.2], [0.1, 0.8]]), np.array([[0.3, 0.6], [0.6, 0.3]])]
    loc = [np.array([[0.6, 0.3], [0.7, 0.2]]), np.array([[0.8, 0.9], [0.9, 0.1]])]
    for eps in (0.0, 0.2, 1.0):
        w, rows = search_grid(s1, t1, loc, tl, WeightSearchConfig(step=0.5, epsilon=eps))
        assert w == exhaustive(s1, t1, loc, tl, 0.5, eps)
        assert len(rows) == 3
    r = make_rng(2)
    for _ in range(5):
        t1, tl = r.uniform(size=(20, 3)) < 0.4, r.uniform(size=(20, 3)) < 0.4
        s1 = [r.uniform(size=(20, 3)) for _ in range(2)]
        loc = [r.uniform(size=(20, 3)) for _ in range(2)]
        w, _ = search_grid(s1, t1, loc, tl, WeightSearchConfig(step=0.1, epsilon=0.02))
        assert w == exhaustive(s1, t1, loc, tl, 0.1, 0.02)


def test_infinite_epsilon_is_pure_local_maximizer():
    r = make_rng(3)
    t = r.uniform(size=(25, 3)) < 0.4
    s = [r.uniform(size=(25, 3)) for _ in range(3)]
    w, rows = search_grid(s, t, s, t, WeightSearchConfig(step=0.25, epsilon=np.inf))
    assert all(row[3] for row in rows)
    assert dict((row[0], row[2]) for row in rows)[w] == max(row[2] for row in rows)


def test_result_is_feasible_and_report_format():
    r = make_rng(4)
    t = r.uniform(size=(25, 3)) < 0.4
    s = [r.uniform(size=(25, 3)) for _ in range(3)]
    cfg = WeightSearchConfig(step=0.25)
    w, rows = search_grid(s, t, s[::-1], t, cfg)
    top = max(row[1] for row in rows)
    chosen = next(row for row in rows if row[0] == w)
    assert chosen[1] >= top - cfg.epsilon and chosen[3]
    lines = report_csv(rows).splitlines()
    assert lines[0] == "w1,w2,w3,stage1_f2,local_f2,feasible" and len(lines) == 16


def test_spec_text_roundtrip(tmp_path):
    fm = folds([1, 2], 0.5)
    save_fold_models(fm, tmp_path / "adapt_0.5")
    save_checkpoint(model(3), tmp_path / "base.gsck")
    groups = [Group("no_tuned", [model(3)]), Group("alpha_0.5", [fm], 0.5)]
    spec = EnsembleSpec(groups, [0.25, 0.75])
    paths = {"no_tuned": ["base.gsck"], "alpha_0.5": ["adapt_0.5"]}
    write_spec(spec, paths, tmp_path / "e.spec")
    text = (tmp_path / "e.spec").read_text()
    assert "group.alpha_0.5.weight = 0.75" in text
    parsed = parse_spec_text(text)
    assert [g["name"] for g in parsed] == ["no_tuned", "alpha_0.5"] and parsed[1]["alpha"] == 0.5
    back, back_paths = load_spec(tmp_path / "e.spec")
    assert back.weights == (0.25, 0.75) and back_paths == paths
    assert np.allclose(weighted_scores(back, X), weighted_scores(spec, X), atol=1e-15)


def test_spec_parse_errors():
    with pytest.raises(FormatError):
        parse_spec_text("weight = 1\n")
    with pytest.raises(FormatError):
        parse_spec_text("group.a.colour = 1\n")
    with pytest.raises(FormatError):
        parse_spec_text("group.a.alpha = 0.5\n")
