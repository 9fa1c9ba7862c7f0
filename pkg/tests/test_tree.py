import copy
import json
import math

import numpy as np
import pytest

from mobdose.dose_models import DoseResponseSpec, TrialData, emax_curve, fit_emax, fit_model
from mobdose.simulation import ScenarioSpec, generate_trial
from mobdose.stability import ParmRestriction
from mobdose.tree import (MobControl, RoutingError, TreeFormatError, TreeInvariantError,
                          best_split_point, deserialize, dumps, grow, leaf_rules, loads, predict,
                          render_text, route, serialize)

from oracles import emax_least_squares

LEVELS = (0.0, 12.5, 25.0, 50.0, 100.0)
EMAX = DoseResponseSpec.emax(LEVELS)


@pytest.fixture(scope="module")
def case3_tree():
    trial = generate_trial(ScenarioSpec(case=3), np.random.default_rng(2024))
    return trial.data, grow(trial.data, EMAX, MobControl())


def two_regime(n_per_level=80, sigma=0.01, seed=0):
    rng = np.random.default_rng(seed)
    d = np.repeat(np.asarray(LEVELS), n_per_level)
    group = rng.integers(0, 2, size=d.size)
    noise = rng.standard_normal((d.size, 3))
    Z = np.column_stack([noise[:, 0], group, noise[:, 1:]])
    t1 = np.where(group == 1, 0.6, 0.17)
    t2 = np.where(group == 1, 5.0, 18.0)
    y = 1.2 + emax_curve(d, t1, t2) + sigma * rng.standard_normal(d.size)
    data = TrialData(y, d, Z, categorical=(False, True, False, False))
    return data, group


# ---------------------------------------------------------------------------
# Control
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(alpha=1.0), dict(minsize=0),
                                dict(maxdepth=0), dict(whitening="x"), dict(suplm_null="x")])
def test_control_validation(kw):
    with pytest.raises(ValueError):
        MobControl(**kw)


def test_minsize_must_allow_a_fit():
    data, _ = two_regime()
    with pytest.raises(ValueError, match="minsize"):
        grow(data, EMAX, MobControl(minsize=3))


# ---------------------------------------------------------------------------
# Growing
# ---------------------------------------------------------------------------

def test_maxdepth_one_is_a_single_leaf():
    data, _ = two_regime()
    tree = grow(data, EMAX, MobControl(maxdepth=1))
    assert tree.root.is_leaf and tree.covariates_used() == set()


def test_two_regimes_are_separated_and_recovered():
    data, group = two_regime()
    tree = grow(data, EMAX, MobControl())
    assert tree.root.split.covariate == 1
    assert len(tree.leaves()) == 2
    truth = {0: (1.2, 0.17, 18.0), 1: (1.2, 0.6, 5.0)}
    for leaf in tree.leaves():
        g = int(group[leaf.rows][0])
        assert np.all(group[leaf.rows] == g)
        direct = fit_emax(data.y[leaf.rows], data.d[leaf.rows], EMAX)
        np.testing.assert_array_equal(leaf.model.params, direct.params)
        b0, t1, t2 = truth[g]
        doses = np.asarray(LEVELS)
        err = np.abs(leaf.model.predict(doses) - (b0 + emax_curve(doses, t1, t2)))
        assert err.max() < 0.05 * t1


def test_tree_invariants(case3_tree):
    data, tree = case3_tree
    c = tree.control
    rows = np.concatenate([leaf.rows for leaf in tree.leaves()])
    assert np.array_equal(np.sort(rows), np.arange(data.n))      # disjoint and exhaustive
    for node in tree.nodes():
        assert node.depth <= c.maxdepth
        assert node.is_leaf == (node.split is None) == (node.children is None)
        if not node.is_leaf:
            assert node.split.adjusted_p <= c.alpha
            assert all(ch.n >= c.minsize for ch in node.children)
    assert tree.covariates_used() & {0, 1}


def test_preorder_node_ids(case3_tree):
    _, tree = case3_tree
    assert [nd.node_id for nd in tree.nodes()] == list(range(1, len(tree.nodes()) + 1))


def test_grow_is_bit_identical(case3_tree):
    data, tree = case3_tree
    assert dumps(grow(data, EMAX, MobControl())) == dumps(tree)


def test_leaf_rss_never_exceeds_root(case3_tree):
    _, tree = case3_tree
    assert sum(leaf.model.rss for leaf in tree.leaves()) <= tree.root.model.rss


def test_monotone_transform_keeps_topology(case3_tree):
    data, tree = case3_tree
    Z = data.Z.copy()
    j = tree.root.split.covariate
    Z[:, j] = np.exp(2.0 * Z[:, j]) - 3.0
    other = grow(TrialData(data.y, data.d, Z), EMAX, MobControl())
    assert [(nd.node_id, nd.is_leaf, nd.split and nd.split.covariate) for nd in tree.nodes()] == \
           [(nd.node_id, nd.is_leaf, nd.split and nd.split.covariate) for nd in other.nodes()]
    np.testing.assert_array_equal(tree.route_many(data.Z), other.route_many(Z))
    root_t = other.root.split.threshold
    assert np.log(root_t + 3.0) / 2.0 == pytest.approx(tree.root.split.threshold, abs=1e-2)


@pytest.mark.parametrize("family", ["bspline", "means"])
def test_linear_family_trees_grow(family):
    trial = generate_trial(ScenarioSpec(case=3, sigma=0.05), np.random.default_rng(4))
    spec = getattr(DoseResponseSpec, family)(LEVELS)
    tree = grow(trial.data, spec, MobControl(restriction=ParmRestriction.restricted()))
    assert tree.covariates_used() & {0, 1}


def test_categorical_covariate_with_many_levels():
    rng = np.random.default_rng(5)
    d = np.repeat(np.asarray(LEVELS), 60)
    codes = rng.integers(0, 12, size=d.size)
    effect = np.isin(codes, [1, 4, 7, 9])
    y = 1.0 + emax_curve(d, np.where(effect, 0.5, 0.0), 10.0) + 0.05 * rng.standard_normal(d.size)
    data = TrialData(y, d, codes[:, None].astype(float), categorical=(True,))
    tree = grow(data, EMAX, MobControl())
    left = set(tree.root.split.left_levels)
    assert left in ({1, 4, 7, 9}, set(range(12)) - {1, 4, 7, 9})


# ---------------------------------------------------------------------------
# Split point search
# ---------------------------------------------------------------------------

def test_binary_covariate_has_one_candidate():
    data, _ = two_regime()
    cand = best_split_point(data, 1, EMAX, 20)
    assert cand.kind == "categorical" and cand.n_candidates == 1


def test_exhaustive_level_subsets():
    rng = np.random.default_rng(6)
    d = np.repeat(np.asarray(LEVELS), 40)
    data = TrialData(rng.standard_normal(d.size), d, rng.integers(0, 4, (d.size, 1)).astype(float),
                     categorical=(True,))
    assert best_split_point(data, 0, EMAX, 5).n_candidates == 2 ** 3 - 1


def test_numeric_candidate_count_bounded_by_distinct_values():
    rng = np.random.default_rng(7)
    d = np.repeat(np.asarray(LEVELS), 30)
    z = rng.integers(0, 9, size=d.size).astype(float)
    data = TrialData(rng.standard_normal(d.size), d, z[:, None])
    assert best_split_point(data, 0, EMAX, 5).n_candidates <= np.unique(z).size - 1


def test_step_change_threshold_matches_brute_force():
    rng = np.random.default_rng(8)
    d = np.repeat(np.asarray(LEVELS), 16)
    z = rng.permutation(np.arange(d.size, dtype=float))
    med = np.median(z)
    y = 1.0 + emax_curve(d, np.where(z <= med, 0.1, 0.5), 15.0) + 0.01 * rng.standard_normal(d.size)
    data = TrialData(y, d, z[:, None])
    cand = best_split_point(data, 0, EMAX, 10)
    zs = np.sort(z)
    best_obj, best_thr = math.inf, None
    for k in range(10, d.size - 10 + 1):
        thr = (zs[k - 1] + zs[k]) / 2
        left = z <= thr
        obj = (emax_least_squares(y[left], d[left], 100.0)[1]
               + emax_least_squares(y[~left], d[~left], 100.0)[1])
        if obj < best_obj - 1e-12:
            best_obj, best_thr = obj, thr
    assert cand.threshold == best_thr
    assert cand.objective == pytest.approx(best_obj, rel=1e-6)
    gap = np.diff(zs).max()
    assert abs(cand.threshold - med) <= gap


def test_no_admissible_split_returns_none():
    data, _ = two_regime(n_per_level=8)
    assert best_split_point(data, 0, EMAX, 30) is None


# ---------------------------------------------------------------------------
# Routing and prediction
# ---------------------------------------------------------------------------

def test_single_leaf_predicts_global_model():
    data, _ = two_regime()
    tree = grow(data, EMAX, MobControl(maxdepth=1))
    glob = fit_model(data.y, data.d, EMAX)
    for dose in (0.0, 7.0, 100.0):
        assert predict(tree, data.Z[0], dose) == pytest.approx(float(glob.predict(dose)), abs=0)


def test_threshold_ties_route_left(case3_tree):
    _, tree = case3_tree
    s = tree.root.split
    z = np.zeros(10)
    z[s.covariate] = s.threshold
    left_ids = {leaf.node_id for leaf in tree.root.children[0].walk() if leaf.is_leaf}
    assert route(tree, z) in left_ids


def test_training_rows_route_to_their_leaf(case3_tree):
    data, tree = case3_tree
    ids = tree.route_many(data.Z)
    for leaf in tree.leaves():
        assert np.all(ids[leaf.rows] == leaf.node_id)


def test_missing_split_value_is_a_routing_error(case3_tree):
    _, tree = case3_tree
    z = np.zeros(10)
    z[tree.root.split.covariate] = np.nan
    with pytest.raises(RoutingError):
        route(tree, z)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _same_tree(a, b):
    assert a.spec == b.spec and a.control == b.control and a.n_total == b.n_total
    for x, y in zip(a.nodes(), b.nodes(), strict=True):
        assert x.node_id == y.node_id and x.depth == y.depth and x.n == y.n
        assert x.model.params.tobytes() == y.model.params.tobytes()
        assert (x.model.sigma, x.model.rss) == (y.model.sigma, y.model.rss)
        if x.split is None:
            assert y.split is None
        else:
            assert (x.split.covariate, x.split.kind, x.split.threshold, x.split.left_levels,
                    x.split.p_value, x.split.adjusted_p) == \
                   (y.split.covariate, y.split.kind, y.split.threshold, y.split.left_levels,
                    y.split.p_value, y.split.adjusted_p)


def test_round_trip_is_bit_exact(case3_tree):
    _, tree = case3_tree
    back = loads(dumps(tree))
    _same_tree(tree, back)
    assert render_text(back) == render_text(tree)
    assert dumps(back) == dumps(tree)


def test_round_trip_categorical_tree():
    data, _ = two_regime()
    tree = grow(data, EMAX, MobControl())
    back = deserialize(json.loads(json.dumps(serialize(tree))))
    _same_tree(tree, back)
    assert leaf_rules(back) == leaf_rules(tree)


def test_single_leaf_document_has_no_split_fields():
    data, _ = two_regime()
    doc = serialize(grow(data, EMAX, MobControl(maxdepth=1)))
    assert len(doc["nodes"]) == 1
    assert "split" not in doc["nodes"][0] and "children" not in doc["nodes"][0]


def test_document_violating_minsize_is_rejected(case3_tree):
    _, tree = case3_tree
    doc = serialize(tree)
    bad = copy.deepcopy(doc)
    bad["control"]["minsize"] = max(nd["n"] for nd in bad["nodes"] if "split" not in nd) + 1
    with pytest.raises(TreeInvariantError, match="minsize"):
        deserialize(bad)


@pytest.mark.parametrize("mutate,where", [
    (lambda d: d.pop("nodes"), "nodes"),
    (lambda d: d["nodes"][0].pop("rss"), r"nodes\[0\]"),
    (lambda d: d["nodes"][0]["params"].update(theta=[1.0]), "theta"),
    (lambda d: d.update(format="other"), "format"),
    (lambda d: d["nodes"][0].update(depth=2), "depth"),
    (lambda d: d["nodes"][0]["split"].update(p_adjusted=0.5), "p_adjusted"),
])
def test_malformed_documents_name_the_location(case3_tree, mutate, where):
    _, tree = case3_tree
    doc = serialize(tree)
    mutate(doc)
    with pytest.raises(TreeFormatError, match=where):
        deserialize(doc)


def test_invalid_json_reports_position():
    with pytest.raises(TreeFormatError, match="line 1"):
        loads("{not json")
