import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from lirlab.pdg import (CONSTANT, LEARNABLE, LINEAR_SOFTMAX, Cpd, Focus, JointTable,
                        ParametricPDG, PDGError, Variable, conditional, joint_index, marginal,
                        pdg_from_json)


def xy(probs, sx=2, sy=2):
    return JointTable(["X", "Y"], (sx, sy), np.asarray(probs, dtype=float))


def test_joint_index_examples():
    assert joint_index((2, 2), (0, 0)) == 0
    assert joint_index((2, 2), (1, 0)) == 2
    assert joint_index((2, 3), (1, 2)) == 5


def test_joint_index_out_of_range():
    with pytest.raises(PDGError):
        joint_index((2, 3), (2, 0))
    with pytest.raises(PDGError):
        joint_index((2, 3), (0, -1))


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4))
def test_joint_index_bijection(sizes):
    seen = sorted(joint_index(sizes, a) for a in np.ndindex(*sizes))
    assert seen == list(range(int(np.prod(sizes))))


def test_marginal_examples():
    assert_allclose(marginal(JointTable.uniform(["X", "Y"], (2, 2)), ["X"]).probs, [0.5, 0.5])
    assert_allclose(marginal(xy([0, 0, 1, 0]), ["Y"]).probs, [1, 0])
    assert_allclose(marginal(xy([.1, .2, .3, .4]), ["X"]).probs, [.3, .7])


def test_marginal_unknown_variable():
    with pytest.raises(PDGError):
        marginal(xy([.25] * 4), ["Z"])


def test_marginal_reorders_scope():
    mu = JointTable(["X", "Y"], (2, 3), np.arange(6) / 15.0)
    m = marginal(mu, ["Y", "X"])
    assert m.scope == ["Y", "X"] or tuple(m.scope) == ("Y", "X")
    assert_allclose(m.tensor(), mu.tensor().T)


def test_conditional_examples():
    assert_allclose(conditional(JointTable.uniform(["X", "Y"], (2, 3)), ["Y"], ["X"]),
                    np.full((2, 3), 1 / 3))
    assert_allclose(conditional(xy([.5, 0, 0, .5]), ["Y"], ["X"]), np.eye(2))
    assert_allclose(conditional(xy([.1, .2, .3, .4]), ["Y"], ["X"]),
                    [[1 / 3, 2 / 3], [3 / 7, 4 / 7]])


def test_conditional_zero_mass_row_is_uniform():
    c = conditional(JointTable(["X", "Y"], (2, 3), np.array([0, 0, 0, .2, .3, .5])), ["Y"], ["X"])
    assert_allclose(c[0], np.full(3, 1 / 3))
    assert_allclose(c[1], [.2, .3, .5])


def random_joint(rng, sizes):
    p = rng.dirichlet(np.ones(int(np.prod(sizes))))
    return JointTable([f"V{i}" for i in range(len(sizes))], tuple(sizes), p)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 3), min_size=3, max_size=4))
def test_marginal_commutes(seed, sizes):
    mu = random_joint(np.random.default_rng(seed), sizes)
    a = marginal(marginal(mu, mu.scope[:2]), mu.scope[:1])
    b = marginal(mu, mu.scope[:1])
    assert_allclose(a.probs, b.probs, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 3), min_size=2, max_size=4))
def test_conditional_recombines(seed, sizes):
    mu = random_joint(np.random.default_rng(seed), sizes)
    s, t = mu.scope[:1], mu.scope[1:2]
    c = conditional(mu, t, s)
    ms = marginal(mu, s).probs
    assert_allclose(c.sum(axis=1), 1.0, atol=1e-12)
    assert_allclose((ms[:, None] * c).ravel(), marginal(mu, s + t).probs, atol=1e-12)


def test_joint_table_validation():
    with pytest.raises(PDGError):
        JointTable(["X"], (2,), np.array([0.6, 0.6]))
    with pytest.raises(PDGError):
        JointTable(["X"], (2,), np.array([1.0]))


def small_doc():
    return {
        "variables": [{"id": "X", "size": 2}, {"id": "Y", "size": 3}],
        "arcs": [
            {"id": "px", "src": [], "tgt": ["X"], "kind": CONSTANT, "table": [[0.3, 0.7]]},
            {"id": "qy", "src": ["X"], "tgt": ["Y"], "kind": LEARNABLE,
             "table": [[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]], "beta": 2.0},
        ],
    }


def test_json_roundtrip():
    pdg = pdg_from_json(small_doc())
    again = pdg_from_json(json.loads(pdg.dumps()))
    assert again.dumps() == pdg.dumps()
    assert_allclose(again.arc("qy").cpd.table(), [[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]], atol=1e-12)
    assert again.arc("qy").beta == 2.0


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d["arcs"][0].update(table=[[0.5, 0.6]]), "arcs[0]"),
    (lambda d: d["arcs"][1].update(tgt=["Z"]), "arcs[1]"),
    (lambda d: d["variables"].append({"id": "X", "size": 2}), "X"),
    (lambda d: d["arcs"][1].update(src=["Y"]), "arcs[1]"),
])
def test_loader_reports_first_violation(mutate, needle):
    doc = small_doc()
    mutate(doc)
    with pytest.raises(PDGError, match=needle.replace("[", r"\[").replace("]", r"\]")):
        pdg_from_json(doc)


def test_linear_softmax_param_grad_matches_fd():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(4, 3))
    cpd = Cpd(LINEAR_SOFTMAX, 4, 2, params=rng.normal(size=2 * 3 + 2), features=feats)
    G = rng.normal(size=(4, 2))
    g = cpd.param_grad(G)
    h = 1e-6
    for i in range(cpd.params.size):
        e = np.zeros_like(cpd.params)
        e[i] = h
        up = Cpd(LINEAR_SOFTMAX, 4, 2, params=cpd.params + e, features=feats).logits()
        dn = Cpd(LINEAR_SOFTMAX, 4, 2, params=cpd.params - e, features=feats).logits()
        assert np.isclose((G * (up - dn)).sum() / (2 * h), g[i], rtol=1e-6, atol=1e-9)


def test_focus_rejects_negative_control():
    with pytest.raises(PDGError):
        Focus(chi={"a": -1.0})
    with pytest.raises(PDGError):
        Focus(gamma=-0.1)


def test_params_hash_changes_with_params():
    pdg = pdg_from_json(small_doc())
    h0 = pdg.param_hash()
    pdg.set_params({"qy": pdg.arc("qy").cpd.params + 0.1})
    assert pdg.param_hash() != h0
    pdg.reset_params()
    assert pdg.param_hash() == h0


def test_variable_size_positive():
    with pytest.raises(ValueError):
        Variable("X", 0)
