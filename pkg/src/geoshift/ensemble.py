"""Group averaging, cross-group weights and the constrained weight search.

A group is a family of models sharing one adaptation alpha (or the
untuned base models); its members are averaged with equal weight. Groups
are then mixed with one weight each. The search walks every weight
vector on a simplex grid, keeps the vectors whose stage-1 F2 is within
``epsilon`` of the best stage-1 F2 on the grid, and returns the feasible
vector with the best local validation F2.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import metrics
from .adapt import FoldModels, load_fold_models, predict_fold_averaged
from .dataset import Split
from .errors import ConfigError, FormatError, ShapeError
from .model import Parameters, load_checkpoint, predict_scores

# default groups: name, alpha tag (None = untuned base), reference weight
DEFAULT_GROUPS = (("no_tuned", None, 0.05), ("alpha_0", 0.0, 0.6), ("alpha_0.5", 0.5, 0.3), ("alpha_0.9", 0.9, 0.05))


@dataclass
class Group:
    name: str
    members: list  # FoldModels, or Parameters for the untuned group
    alpha: float | None = None

    def __post_init__(self):
        if not self.members:
            raise ConfigError(f"group {self.name!r} has no members")
        if not self.name or any(ch.isspace() or ch == "=" for ch in self.name):
            raise ConfigError(f"bad group name {self.name!r}")
        for m in self.members:
            tag = m.config.alpha if isinstance(m, FoldModels) else None
            if tag != self.alpha:
                raise ConfigError(f"group {self.name!r} mixes alpha {tag} with {self.alpha}")


@dataclass
class EnsembleSpec:
    groups: list
    weights: tuple

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != len(self.groups):
            raise ConfigError(f"{len(self.weights)} weights for {len(self.groups)} groups")
        if any(w < 0 for w in self.weights):
            raise ConfigError("weights must be nonnegative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"weights sum to {sum(self.weights)!r}, not 1")


@dataclass
class WeightSearchConfig:
    step: float = 0.05
    epsilon: float = 0.002
    threshold: float = metrics.DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 0 < self.step <= 1:
            raise ConfigError("grid step must lie in (0, 1]")
        frac = Fraction(self.step).limit_denominator(10**6)
        if frac.numerator != 1 or abs(float(frac) - self.step) > 1e-12:
            raise ConfigError(f"grid step {self.step} does not divide 1")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be >= 0")

    @property
    def divisions(self) -> int:
        return round(1.0 / self.step)


@dataclass
class SearchResult:
    spec: EnsembleSpec
    rows: list = field(default_factory=list)  # (weights, stage1_f2, local_f2, feasible)


def _as_images(images):
    if isinstance(images, Split):
        return images.flat()
    x = np.asarray(images, dtype=np.float64)
    return x.reshape(len(x), -1) if x.ndim > 2 else x


def member_scores(member, images) -> np.ndarray:
    if isinstance(member, FoldModels):
        return predict_fold_averaged(member, images)
    if isinstance(member, Parameters):
        return predict_scores(member, _as_images(images))
    raise ConfigError(f"unsupported group member {type(member).__name__}")


def group_scores(g: Group, images) -> np.ndarray:
    """Equal-weight mean of the members' (fold-averaged) scores, summed in member order."""
    total = None
    for member in g.members:
        s = member_scores(member, images)
        if total is not None and s.shape != total.shape:
            raise ShapeError(f"group {g.name!r}: members disagree on output shape")
        total = s if total is None else total + s
    return total / len(g.members)


def combine(weights, score_list) -> np.ndarray:
    """sum_i w_i * S_i, accumulated in group order."""
    if len(weights) != len(score_list):
        raise ConfigError(f"{len(weights)} weights for {len(score_list)} score matrices")
    out = np.zeros_like(np.asarray(score_list[0], dtype=np.float64))
    for w, s in zip(weights, score_list):
        if np.shape(s) != out.shape:
            raise ShapeError("group score matrices disagree on shape")
        out = out + w * np.asarray(s, dtype=np.float64)
    return out


def weighted_scores(spec: EnsembleSpec, images) -> np.ndarray:
    return combine(spec.weights, [group_scores(g, images) for g in spec.groups])


def simplex_grid(k: int, divisions: int) -> list[tuple]:
    """All k-vectors of multiples of 1/divisions summing to 1, lexicographic order."""
    if k < 1 or divisions < 1:
        raise ConfigError("simplex grid needs k >= 1 and divisions >= 1")

    def parts(k, n):
        if k == 1:
            yield (n,)
            return
        for first in range(n + 1):
            for rest in parts(k - 1, n - first):
                yield (first,) + rest

    return [tuple(c / divisions for c in counts) for counts in parts(k, divisions)]


def search_grid(stage1_scores, stage1_truth, local_scores, local_truth, cfg: WeightSearchConfig | None = None):
    """Constrained search over precomputed per-group score matrices.

    Returns (best weight vector, report rows).
    """
    cfg = cfg or WeightSearchConfig()
    k = len(stage1_scores)
    if k < 2 or len(local_scores) != k:
        raise ConfigError("weight search needs at least two groups with scores on both splits")
    grid = simplex_grid(k, cfg.divisions)
    if not grid:
        raise ConfigError("empty weight grid")
    evaluated = []
    for w in grid:
        s1 = metrics.mean_f2(combine(w, stage1_scores), stage1_truth, cfg.threshold)
        loc = metrics.mean_f2(combine(w, local_scores), local_truth, cfg.threshold)
        evaluated.append((w, s1, loc))
    cutoff = max(s1 for _, s1, _ in evaluated) - cfg.epsilon
    rows = [(w, s1, loc, s1 >= cutoff) for w, s1, loc in evaluated]
    feasible = [r for r in rows if r[3]]
    # best local F2, then best stage-1 F2, then the lexicographically smallest vector
    best = min(feasible, key=lambda r: (-r[2], -r[1], r[0]))
    return best[0], rows


def search_weights(groups, stage1_eval, local_val, cfg: WeightSearchConfig | None = None) -> SearchResult:
    """Pick group weights: stage-1 feasibility first, then local validation F2."""
    cfg = cfg or WeightSearchConfig()
    if len(groups) < 2:
        raise ConfigError("weight search needs at least two groups")
    s1 = [group_scores(g, stage1_eval) for g in groups]
    loc = [group_scores(g, local_val) for g in groups]
    weights, rows = search_grid(s1, stage1_eval.labels, loc, local_val.labels, cfg)
    return SearchResult(EnsembleSpec(list(groups), weights), rows)


def report_csv(rows, k: int | None = None) -> str:
    """CSV with header ``w1..wk,stage1_f2,local_f2,feasible``."""
    k = k if k is not None else (len(rows[0][0]) if rows else 0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"w{i + 1}" for i in range(k)] + ["stage1_f2", "local_f2", "feasible"])
    for w, s1, loc, ok in rows:
        writer.writerow([repr(float(x)) for x in w] + [repr(float(s1)), repr(float(loc)), int(bool(ok))])
    return buf.getvalue()


# spec text format:
#   group.<name>.weight = <float>
#   group.<name>.alpha = <float> | none
#   group.<name>.member.<j> = <path>


def spec_text(spec: EnsembleSpec, member_paths: dict) -> str:
    """``member_paths`` maps a group name to its members' paths, in member order."""
    lines = []
    for g, w in zip(spec.groups, spec.weights):
        lines.append(f"group.{g.name}.weight = {w!r}")
        lines.append(f"group.{g.name}.alpha = {'none' if g.alpha is None else repr(float(g.alpha))}")
        paths = member_paths.get(g.name, [])
        if len(paths) != len(g.members):
            raise ConfigError(f"group {g.name!r}: {len(paths)} paths for {len(g.members)} members")
        for j, path in enumerate(paths):
            lines.append(f"group.{g.name}.member.{j} = {path}")
    return "\n".join(lines) + "\n"


def parse_spec_text(text: str) -> list[dict]:
    """Groups in file order: dicts with ``name, weight, alpha, members``."""
    groups: dict[str, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) < 3 or parts[0] != "group":
            raise FormatError(f"line {lineno}: expected 'group.<name>.<field> = <value>'")
        # names may contain dots (alpha_0.5), so the field is read from the right
        cut = -2 if len(parts) >= 4 and parts[-2] == "member" else -1
        name, fld = ".".join(parts[1:cut]), parts[cut:]
        g = groups.setdefault(name, {"name": name, "weight": None, "alpha": None, "members": {}})
        value = value.strip()
        try:
            if fld == ["weight"]:
                g["weight"] = float(value)
            elif fld == ["alpha"]:
                g["alpha"] = None if value == "none" else float(value)
            elif len(fld) == 2 and fld[0] == "member":
                g["members"][int(fld[1])] = value
            else:
                raise FormatError(f"unknown field {'.'.join(fld)!r}")
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    out = []
    for g in groups.values():
        if g["weight"] is None:
            raise FormatError(f"group {g['name']!r} has no weight")
        g["members"] = [g["members"][j] for j in sorted(g["members"])]
        out.append(g)
    return out


def write_spec(spec: EnsembleSpec, member_paths: dict, path) -> None:
    Path(path).write_text(spec_text(spec, member_paths))


def load_spec(path) -> tuple[EnsembleSpec, dict]:
    """Read a spec file; member paths resolve relative to its directory.

    A directory member is a FoldModels directory, a file member a base checkpoint.
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing spec file {path}")
    groups, weights, paths = [], [], {}
    for g in parse_spec_text(path.read_text()):
        members = []
        for rel in g["members"]:
            p = path.parent / rel
            if p.is_dir():
                members.append(load_fold_models(p))
            elif p.exists():
                members.append(load_checkpoint(p))
            else:
                raise FormatError(f"group {g['name']!r}: member {rel} not found")
        groups.append(Group(g["name"], members, g["alpha"]))
        weights.append(g["weight"])
        paths[g["name"]] = g["members"]
    return EnsembleSpec(groups, weights), paths
