"""Model-based recursive partitioning of dose-response models.

At every node a dose-response model is fitted, its partial scores are tested
for instability along each partitioning covariate, and if the smallest
(Bonferroni-adjusted) p-value is below ``alpha`` the node is split in two
along that covariate at the point minimizing the summed residual sum of
squares of the two child models.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Literal

import numpy as np
from numpy.typing import NDArray

from .dose_models import (DoseResponseSpec, Family, FitError, FittedDoseModel, TrialData,
                          fit_grouped, fit_model)
from .stability import InstabilityResult, ParmRestriction, instability_tests, select_split_variable

FORMAT_NAME = "mobdose-tree"
FORMAT_VERSION = 1
MAX_EXHAUSTIVE_LEVELS = 10


class TreeFormatError(ValueError):
    """Malformed tree document; the message names the offending location."""


class TreeInvariantError(TreeFormatError):
    """Well-formed tree document describing an impossible tree."""


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class MobControl:
    alpha: float = 0.1
    minsize: int = 20
    maxdepth: int = 4
    bonferroni: bool = True
    restriction: ParmRestriction = field(default_factory=ParmRestriction.unrestricted)
    # "full": whiten all score columns then keep the tested ones;
    # "tested": whiten only the tested columns
    whitening: Literal["full", "tested"] = "full"
    suplm_null: Literal["asymptotic", "grid"] = "asymptotic"

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.minsize) != self.minsize or self.minsize < 1:
            raise ValueError(f"minsize must be a positive integer, got {self.minsize}")
        if int(self.maxdepth) != self.maxdepth or self.maxdepth < 1:
            raise ValueError(f"maxdepth must be a positive integer, got {self.maxdepth}")
        if self.whitening not in ("full", "tested"):
            raise ValueError(f"whitening must be 'full' or 'tested', got {self.whitening!r}")
        if self.suplm_null not in ("asymptotic", "grid"):
            raise ValueError(f"suplm_null must be 'asymptotic' or 'grid', got {self.suplm_null!r}")

    def check(self, spec: DoseResponseSpec) -> None:
        if self.minsize < spec.n_params + 1:
            raise ValueError(f"minsize {self.minsize} is below the {spec.n_params + 1} "
                             f"observations needed to fit a {spec.family.value} model")


@dataclass(frozen=True)
class Split:
    """A binary split rule; observations satisfying it go to the left child."""

    covariate: int
    kind: Literal["numeric", "categorical"]
    threshold: float | None = None
    left_levels: tuple[int, ...] | None = None
    p_value: float = float("nan")
    adjusted_p: float = float("nan")
    statistic: float = float("nan")

    def goes_left(self, z) -> NDArray:
        z = np.asarray(z, dtype=float)
        if np.any(np.isnan(z)):
            raise RoutingError(f"missing value in split covariate {self.covariate}")
        if self.kind == "numeric":
            return z <= self.threshold
        return np.isin(z, np.asarray(self.left_levels, dtype=float))


@dataclass(frozen=True, eq=False)
class MobNode:
    node_id: int
    depth: int
    model: FittedDoseModel
    split: Split | None = None
    children: tuple[MobNode, MobNode] | None = None
    rows: NDArray | None = field(default=None, repr=False)
    tests: tuple[InstabilityResult, ...] = field(default=(), repr=False)

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def walk(self) -> Iterator[MobNode]:
        yield self
        if self.children is not None:
            for child in self.children:
                yield from child.walk()


@dataclass(frozen=True, eq=False)
class MobTree:
    root: MobNode
    spec: DoseResponseSpec
    control: MobControl
    n_total: int
    names: tuple[str, ...]
    categorical: tuple[bool, ...]
    levels: tuple[tuple[str, ...] | None, ...]

    def nodes(self) -> list[MobNode]:
        return list(self.root.walk())

    def leaves(self) -> list[MobNode]:
        return [nd for nd in self.root.walk() if nd.is_leaf]

    def node(self, node_id: int) -> MobNode:
        for nd in self.root.walk():
            if nd.node_id == node_id:
                return nd
        raise KeyError(node_id)

    @property
    def depth(self) -> int:
        return max(nd.depth for nd in self.root.walk())

    def covariates_used(self) -> set[int]:
        return {nd.split.covariate for nd in self.root.walk() if nd.split is not None}

    def route(self, z) -> int:
        """Leaf id for a single covariate vector."""
        return int(self.route_many(np.asarray(z, dtype=float)[None, :])[0])

    def route_many(self, Z) -> NDArray:
        """Leaf ids for every row of ``Z``."""
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[None, :]
        out = np.empty(Z.shape[0], dtype=int)

        def descend(node: MobNode, rows: NDArray) -> None:
            if node.is_leaf:
                out[rows] = node.node_id
                return
            left = node.split.goes_left(Z[rows, node.split.covariate])
            descend(node.children[0], rows[left])
            descend(node.children[1], rows[~left])

        descend(self.root, np.arange(Z.shape[0]))
        return out

    def leaf_models(self) -> dict[int, FittedDoseModel]:
        return {nd.node_id: nd.model for nd in self.leaves()}

    def predict(self, z, d) -> float:
        """Predicted mean response for one patient at dose ``d``."""
        return float(self.node(self.route(z)).model.predict(d))


def route(tree: MobTree, z) -> int:
    return tree.route(z)


def predict(tree: MobTree, z, d) -> float:
    return tree.predict(z, d)


# ---------------------------------------------------------------------------
# Split point search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitCandidate:
    covariate: int
    kind: Literal["numeric", "categorical"]
    threshold: float | None
    left_levels: tuple[int, ...] | None
    objective: float
    n_candidates: int


def _batch_objective(spec: DoseResponseSpec, left: tuple, right: tuple) -> NDArray:
    m = left[0].shape[0]
    res = fit_grouped(spec, *(np.vstack([a, b]) for a, b in zip(left, right)))
    obj = res.rss[:m] + res.rss[m:]
    ok = res.ok[:m] & res.ok[m:]
    return np.where(ok & np.isfinite(obj), obj, np.inf)


def _level_onehot(spec: DoseResponseSpec, y, d):
    idx = spec.level_index(d)
    yc = y - y.mean()
    onehot = np.zeros((y.size, spec.n_levels))
    onehot[np.arange(y.size), idx] = 1.0
    return onehot, onehot * yc[:, None], onehot * (yc * yc)[:, None]


def _scan_ordered(spec, parts, order, keys, minsize):
    """Evaluate every admissible cut of an ordering; ``keys`` are the sorted
    values whose changes mark admissible cut positions."""
    n = order.size
    cums = [np.cumsum(p[order], axis=0) for p in parts]
    cuts = np.nonzero(keys[1:] > keys[:-1])[0] + 1
    cuts = cuts[(cuts >= minsize) & (cuts <= n - minsize)]
    if cuts.size == 0:
        return cuts, np.empty(0)
    left = tuple(c[cuts - 1] for c in cums)
    right = tuple(c[-1][None, :] - lc for c, lc in zip(cums, left))
    return cuts, _batch_objective(spec, left, right)


def best_split_point(data: TrialData, covariate: int, spec: DoseResponseSpec,
                     minsize: int) -> SplitCandidate | None:
    """Split of ``covariate`` minimizing the summed child residual sums of squares.

    Numeric covariates are cut at midpoints between consecutive distinct
    values (left child ``z <= threshold``).  Categorical covariates with up to
    ten levels are searched exhaustively over binary level partitions.
    Candidates leaving fewer than ``minsize`` observations on a side, or
    whose child models cannot be fitted, are skipped.  Returns None when no
    candidate is admissible.
    """
    y, d, z = data.y, data.d, data.Z[:, covariate]
    parts = _level_onehot(spec, y, d)
    if not data.categorical[covariate]:
        order = np.argsort(z, kind="stable")
        zs = z[order]
        cuts, obj = _scan_ordered(spec, parts, order, zs, minsize)
        if cuts.size == 0 or not np.isfinite(obj).any():
            return None
        best = int(np.argmin(obj))
        k = cuts[best]
        return SplitCandidate(covariate, "numeric", float((zs[k - 1] + zs[k]) / 2), None,
                              float(obj[best]), int(cuts.size))

    codes = z.astype(int)
    present = np.unique(codes)
    C = present.size
    if C < 2:
        return None
    per_level = [np.vstack([p[codes == c].sum(axis=0) for c in present]) for p in parts]
    sizes = np.array([(codes == c).sum() for c in present])
    if C <= MAX_EXHAUSTIVE_LEVELS:
        masks = []
        for bits in itertools.product((True, False), repeat=C - 1):
            mask = np.array((True,) + bits)
            if mask.all():
                continue
            masks.append(mask)
        masks = np.array(masks)
    else:
        # order levels by mean response and cut the ordering
        level_mean = per_level[1].sum(axis=1) / sizes
        rank = np.argsort(level_mean, kind="stable")
        masks = np.array([np.isin(np.arange(C), rank[:i]) for i in range(1, C)])
    left_n = masks @ sizes
    admissible = (left_n >= minsize) & (data.n - left_n >= minsize)
    masks = masks[admissible]
    if masks.shape[0] == 0:
        return None
    mf = masks.astype(float)
    left = tuple(mf @ p for p in per_level)
    right = tuple(p.sum(axis=0)[None, :] - lp for p, lp in zip(per_level, left))
    obj = _batch_objective(spec, left, right)
    if not np.isfinite(obj).any():
        return None
    best = int(np.argmin(obj))
    return SplitCandidate(covariate, "categorical", None,
                          tuple(int(c) for c in present[masks[best]]),
                          float(obj[best]), int(masks.shape[0]))


# ---------------------------------------------------------------------------
# Growing
# ---------------------------------------------------------------------------

def grow(data: TrialData, spec: DoseResponseSpec, control: MobControl | None = None) -> MobTree:
    """Grow a model-based recursive partition of ``data``.

    Deterministic: identical inputs give identical trees.
    """
    control = control or MobControl()
    control.check(spec)
    next_id = itertools.count(1)

    def build(rows: NDArray, depth: int) -> MobNode:
        node_id = next(next_id)
        sub = data.subset(rows)
        model = fit_model(sub.y, sub.d, spec)
        leaf = MobNode(node_id, depth, model, rows=rows)
        if depth >= control.maxdepth or sub.n < 2 * control.minsize:
            return leaf
        tests = tuple(instability_tests(model, sub, control.restriction, control.minsize,
                                        control.bonferroni, control.whitening,
                                        control.suplm_null))
        leaf = MobNode(node_id, depth, model, rows=rows, tests=tests)
        chosen = select_split_variable(model, sub, control.restriction, control.alpha,
                                       control.bonferroni, control.minsize,
                                       control.whitening, control.suplm_null,
                                       results=list(tests))
        if chosen is None:
            return leaf
        j, _ = chosen
        cand = best_split_point(sub, j, spec, control.minsize)
        if cand is None:
            return leaf
        result = tests[j]
        split = Split(j, cand.kind, cand.threshold, cand.left_levels,
                      result.p_value, result.adjusted_p, result.statistic)
        go_left = split.goes_left(sub.Z[:, j])
        try:
            left = build(rows[go_left], depth + 1)
            right = build(rows[~go_left], depth + 1)
        except FitError:
            # the batch fit accepted this split, so this only triggers on
            # numerically marginal subsets
            return leaf
        return MobNode(node_id, depth, model, split, (left, right), rows, tests)

    root = build(np.arange(data.n), 1)
    return MobTree(root, spec, control, data.n, data.names, data.categorical, data.levels)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _control_doc(control: MobControl) -> dict[str, Any]:
    return {
        "alpha": control.alpha,
        "minsize": control.minsize,
        "maxdepth": control.maxdepth,
        "bonferroni": control.bonferroni,
        "restriction": control.restriction.mode,
        "restriction_indices": list(control.restriction.indices),
        "whitening": control.whitening,
        "suplm_null": control.suplm_null,
    }


def serialize(tree: MobTree) -> dict[str, Any]:
    """JSON-compatible document describing the tree."""
    nodes = []
    for nd in tree.root.walk():
        entry: dict[str, Any] = {
            "id": nd.node_id,
            "n": nd.n,
            "depth": nd.depth,
            "params": {"beta0": nd.model.beta0, "theta": [float(t) for t in nd.model.theta]},
            "sigma": nd.model.sigma,
            "rss": nd.model.rss,
        }
        if nd.split is not None:
            s = nd.split
            split: dict[str, Any] = {"covariate": tree.names[s.covariate],
                                     "covariate_index": s.covariate, "kind": s.kind}
            if s.kind == "numeric":
                split["threshold"] = s.threshold
            else:
                split["subset"] = list(s.left_levels)
            split.update(statistic=s.statistic, p=s.p_value, p_adjusted=s.adjusted_p)
            entry["split"] = split
            entry["children"] = [nd.children[0].node_id, nd.children[1].node_id]
        nodes.append(entry)
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "family": tree.spec.family.value,
        "dose_levels": list(tree.spec.dose_levels),
        "interior_knots": list(tree.spec.interior_knots),
        "control": _control_doc(tree.control),
        "covariates": [
            {"name": name, "kind": "categorical" if cat else "numeric",
             **({"levels": list(lv)} if cat else {})}
            for name, cat, lv in zip(tree.names, tree.categorical, tree.levels)
        ],
        "n_total": tree.n_total,
        "nodes": nodes,
    }


def dumps(tree: MobTree) -> str:
    return json.dumps(serialize(tree), indent=2) + "\n"


def loads(text: str) -> MobTree:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return deserialize(doc)


def _get(obj: Any, key: str, where: str, kind: type | tuple = object) -> Any:
    if not isinstance(obj, dict):
        raise TreeFormatError(f"{where}: expected an object")
    if key not in obj:
        raise TreeFormatError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind in (int, float, (int, float)) and isinstance(value, bool):
        raise TreeFormatError(f"{where}.{key}: expected a number, got {value!r}")
    if not isinstance(value, kind):
        raise TreeFormatError(f"{where}.{key}: unexpected value {value!r}")
    return value


def deserialize(doc: dict[str, Any]) -> MobTree:
    """Rebuild a tree from :func:`serialize` output, validating its invariants."""
    if _get(doc, "format", "document", str) != FORMAT_NAME:
        raise TreeFormatError(f"document.format: expected {FORMAT_NAME!r}")
    if _get(doc, "version", "document", int) != FORMAT_VERSION:
        raise TreeFormatError(f"document.version: unsupported version {doc['version']!r}")
    try:
        spec = DoseResponseSpec(Family(_get(doc, "family", "document", str)),
                                tuple(_get(doc, "dose_levels", "document", list)),
                                interior_knots=tuple(doc.get("interior_knots", ())))
    except ValueError as exc:
        raise TreeFormatError(f"document.family/dose_levels: {exc}") from None
    c = _get(doc, "control", "document", dict)
    try:
        restriction = ParmRestriction(_get(c, "restriction", "control", str),
                                      tuple(c.get("restriction_indices", ())))
        control = MobControl(_get(c, "alpha", "control", (int, float)),
                             _get(c, "minsize", "control", int),
                             _get(c, "maxdepth", "control", int),
                             bool(_get(c, "bonferroni", "control", bool)),
                             restriction, c.get("whitening", "full"),
                             c.get("suplm_null", "asymptotic"))
    except ValueError as exc:
        raise TreeFormatError(f"document.control: {exc}") from None
    covs = _get(doc, "covariates", "document", list)
    names, categorical, levels = [], [], []
    for i, cv in enumerate(covs):
        where = f"covariates[{i}]"
        names.append(_get(cv, "name", where, str))
        kind = _get(cv, "kind", where, str)
        if kind not in ("numeric", "categorical"):
            raise TreeFormatError(f"{where}.kind: unknown kind {kind!r}")
        categorical.append(kind == "categorical")
        levels.append(tuple(_get(cv, "levels", where, list)) if kind == "categorical" else None)
    n_total = _get(doc, "n_total", "document", int)

    raw = _get(doc, "nodes", "document", list)
    if not raw:
        raise TreeFormatError("document.nodes: empty")
    by_id: dict[int, tuple[int, dict]] = {}
    for i, entry in enumerate(raw):
        nid = _get(entry, "id", f"nodes[{i}]", int)
        if nid in by_id:
            raise TreeFormatError(f"nodes[{i}].id: duplicate id {nid}")
        by_id[nid] = (i, entry)
    used: set[int] = set()

    def build(nid: int, expect_depth: int) -> MobNode:
        if nid not in by_id:
            raise TreeFormatError(f"node id {nid} referenced but not defined")
        if nid in used:
            raise TreeFormatError(f"node id {nid} referenced twice")
        used.add(nid)
        i, e = by_id[nid]
        where = f"nodes[{i}]"
        n = _get(e, "n", where, int)
        depth = _get(e, "depth", where, int)
        if depth != expect_depth:
            raise TreeInvariantError(f"{where}.depth: expected {expect_depth}, got {depth}")
        if depth > control.maxdepth:
            raise TreeInvariantError(f"{where}.depth: {depth} exceeds maxdepth {control.maxdepth}")
        params = _get(e, "params", where, dict)
        theta = _get(params, "theta", f"{where}.params", list)
        if len(theta) != spec.n_theta:
            raise TreeFormatError(f"{where}.params.theta: expected {spec.n_theta} values")
        model = FittedDoseModel(spec, float(_get(params, "beta0", f"{where}.params", (int, float))),
                                np.array(theta, dtype=float),
                                float(_get(e, "sigma", where, (int, float))),
                                float(_get(e, "rss", where, (int, float))), n, None)
        has_split, has_children = "split" in e, "children" in e
        if has_split != has_children:
            raise TreeInvariantError(f"{where}: split and children must both be present or absent")
        if not has_split:
            return MobNode(nid, depth, model)
        s = _get(e, "split", where, dict)
        sw = f"{where}.split"
        j = _get(s, "covariate_index", sw, int)
        if not 0 <= j < len(names):
            raise TreeFormatError(f"{sw}.covariate_index: {j} out of range")
        kind = _get(s, "kind", sw, str)
        if kind == "numeric":
            split = Split(j, "numeric", threshold=float(_get(s, "threshold", sw, (int, float))))
        elif kind == "categorical":
            split = Split(j, "categorical", left_levels=tuple(_get(s, "subset", sw, list)))
        else:
            raise TreeFormatError(f"{sw}.kind: unknown kind {kind!r}")
        p_adj = float(_get(s, "p_adjusted", sw, (int, float)))
        split = Split(split.covariate, split.kind, split.threshold, split.left_levels,
                      float(_get(s, "p", sw, (int, float))), p_adj,
                      float(s.get("statistic", math.nan)))
        if p_adj > control.alpha:
            raise TreeInvariantError(f"{sw}.p_adjusted: {p_adj} exceeds alpha {control.alpha}")
        kids = _get(e, "children", where, list)
        if len(kids) != 2:
            raise TreeFormatError(f"{where}.children: expected two ids")
        left, right = build(kids[0], depth + 1), build(kids[1], depth + 1)
        for child in (left, right):
            if child.n < control.minsize:
                raise TreeInvariantError(f"node {child.node_id}: size {child.n} below minsize "
                                         f"{control.minsize}")
        if left.n + right.n != n:
            raise TreeInvariantError(f"{where}: children sizes do not add up to {n}")
        return MobNode(nid, depth, model, split, (left, right))

    root = build(_get(raw[0], "id", "nodes[0]", int), 1)
    if root.n != n_total:
        raise TreeInvariantError(f"root size {root.n} differs from n_total {n_total}")
    if len(used) != len(by_id):
        raise TreeFormatError(f"unreachable node ids {sorted(set(by_id) - used)}")
    return MobTree(root, spec, control, n_total, tuple(names), tuple(categorical), tuple(levels))


# ---------------------------------------------------------------------------
# Text rendering
# ---------------------------------------------------------------------------

def rule_text(tree: MobTree, split: Split, left: bool) -> str:
    name = tree.names[split.covariate]
    if split.kind == "numeric":
        return f"{name} {'<=' if left else '>'} {split.threshold:.6g}"
    labels = tree.levels[split.covariate]
    chosen = set(split.left_levels)
    codes = [c for c in range(len(labels)) if (c in chosen) == left]
    return f"{name} in {{{', '.join(labels[c] for c in codes)}}}"


def leaf_rules(tree: MobTree) -> dict[int, str]:
    """Conjunction of split rules leading to each leaf."""
    out: dict[int, str] = {}

    def visit(node: MobNode, path: list[str]) -> None:
        if node.is_leaf:
            out[node.node_id] = " & ".join(path) if path else "all"
            return
        for child, is_left in zip(node.children, (True, False)):
            visit(child, path + [rule_text(tree, node.split, is_left)])

    visit(tree.root, [])
    return out


def render_text(tree: MobTree) -> str:
    names = tree.spec.param_names
    lines = [f"Model-based recursive partitioning ({tree.spec.family.value} model)", ""]

    def fmt_params(model: FittedDoseModel) -> str:
        return ", ".join(f"{k}={v:.4g}" for k, v in zip(names, model.params))

    def visit(node: MobNode, prefix: str, label: str) -> None:
        head = f"{prefix}[{node.node_id}] {label}"
        if node.is_leaf:
            lines.append(f"{head}: n = {node.n}; {fmt_params(node.model)}; sigma={node.model.sigma:.4g}")
            return
        s = node.split
        lines.append(f"{head} (split on {tree.names[s.covariate]}, p = {s.p_value:.4g}, "
                     f"adjusted p = {s.adjusted_p:.4g})")
        for child, is_left in zip(node.children, (True, False)):
            visit(child, prefix + "|   ", rule_text(tree, s, is_left))

    visit(tree.root, "", "root")
    lines.append("")
    lines.append(f"Number of inner nodes: {len(tree.nodes()) - len(tree.leaves())}")
    lines.append(f"Number of terminal nodes: {len(tree.leaves())}")
    return "\n".join(lines) + "\n"
