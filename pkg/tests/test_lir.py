import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import expm

from lirlab.inconsistency import InnerSolverConfig, envelope_grad, solve_inconsistency
from lirlab.lir import (ADAPTIVE, EULER, RK4, OdeConfig, RefocusStrategy, full_attention,
                        integrate, lir_run, lir_step, make_refocus, resolution_percentage,
                        tv_distortion)
from lirlab.pdg import (CONSTANT, LEARNABLE, LINEAR_SOFTMAX, Cpd, Focus, JointTable,
                        ParametricPDG, Variable)
from lirlab.synth import GeneratorSpec, generate_chain_pdg

PRECISE = InnerSolverConfig(max_iters=3000, tolerance=1e-12, method="lbfgs")


def belief_pair(q_params=(0.0, 0.0, 0.0)):
    pdg = ParametricPDG([Variable("X", 3)])
    pdg.add_arc("p", (), ("X",), Cpd(CONSTANT, 1, 3, table=[[.2, .5, .3]]))
    pdg.add_arc("q", (), ("X",), Cpd(LEARNABLE, 1, 3, params=np.array(q_params, dtype=float)))
    return pdg


def test_zero_control_changes_nothing():
    pdg = belief_pair((1.0, -0.5, 0.2))
    f = Focus.uniform(pdg, chi=0.0)
    before = solve_inconsistency(pdg, f, PRECISE).value
    params = pdg.params()
    lir_step(pdg, f, OdeConfig(), PRECISE)
    assert_allclose(pdg.params()["q"], params["q"])
    assert solve_inconsistency(pdg, f, PRECISE).value == pytest.approx(before, abs=1e-12)


def test_full_control_projects_belief():
    pdg = belief_pair((1.0, -0.5, 0.2))
    f = Focus(alpha={}, beta={"p": 1.0, "q": 1.0}, chi={"q": math.inf})
    _, res, _ = lir_step(pdg, f, OdeConfig(), InnerSolverConfig())
    assert_allclose(pdg.arc("q").cpd.table()[0], [.2, .5, .3], atol=1e-8)
    assert res.value == pytest.approx(0.0, abs=1e-8)


def test_full_control_conditional_arc_is_stationary():
    pdg = generate_chain_pdg(GeneratorSpec(4, 3, seed=2))
    aid = pdg.arc_ids[1]
    f = Focus(alpha={a: 1.0 for a in pdg.arc_ids}, beta={a: 1.0 for a in pdg.arc_ids},
              chi={aid: math.inf})
    lir_step(pdg, f, OdeConfig(), InnerSolverConfig())
    res = solve_inconsistency(pdg, f, PRECISE)
    g = envelope_grad(pdg, f, res.mu_star)[aid]
    assert np.linalg.norm(g) < 1e-5


def test_full_control_linear_softmax_descends_to_stationary():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(2, 2))
    pdg = ParametricPDG([Variable("X", 2), Variable("Y", 2)])
    pdg.add_arc("x", (), ("X",), Cpd(CONSTANT, 1, 2, table=[[.3, .7]]))
    pdg.add_arc("y", (), ("Y",), Cpd(CONSTANT, 1, 2, table=[[.6, .4]]))
    pdg.add_arc("p", ("X",), ("Y",), Cpd(LINEAR_SOFTMAX, 2, 2, params=rng.normal(size=6),
                                          features=feats))
    f = Focus(alpha={}, beta={"x": 1.0, "y": 1.0, "p": 1.0}, chi={"p": math.inf})
    lir_step(pdg, f, OdeConfig(), InnerSolverConfig())
    res = solve_inconsistency(pdg, f, PRECISE)
    assert np.linalg.norm(envelope_grad(pdg, f, res.mu_star)["p"]) < 1e-5


def test_small_control_is_one_sgd_step_on_nll():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(3, 2))
    params = rng.normal(size=9)
    pdg = ParametricPDG([Variable("X", 3), Variable("Y", 3)])
    pdg.add_arc("x", (), ("X",), Cpd(CONSTANT, 1, 3, table=[[0, 1, 0]]), beta=math.inf)
    pdg.add_arc("y", (), ("Y",), Cpd(CONSTANT, 1, 3, table=[[1, 0, 0]]), beta=math.inf)
    pdg.add_arc("p", ("X",), ("Y",), Cpd(LINEAR_SOFTMAX, 3, 3, params=params.copy(),
                                          features=feats))
    eta = 1e-3
    f = Focus.of(pdg, chi={"p": 1.0})
    lir_step(pdg, f, OdeConfig(EULER, 1, eta), InnerSolverConfig())
    x = feats[1]
    W, b = params[:6].reshape(3, 2), params[6:]
    z = W @ x + b
    p = np.exp(z - z.max())
    p /= p.sum()
    dz = p - np.eye(3)[0]
    want = params - eta * np.concatenate([np.outer(dz, x).ravel(), dz])
    assert_allclose(pdg.arc("p").cpd.params, want, atol=1e-12)


def test_single_focus_euler_is_monotone():
    pdg = generate_chain_pdg(GeneratorSpec(5, 4, seed=3))
    f = Focus.uniform(pdg, chi=1.0)
    strat = RefocusStrategy("FixedCycle", foci=[f])
    tr = lir_run(pdg, strat, 8, OdeConfig(EULER, 3, 0.05),
                 InnerSolverConfig(max_iters=2000, tolerance=1e-11, method="lbfgs"))
    v = tr.values()
    assert np.all(np.diff(v) <= 1e-6)
    assert v[-1] < tr.init_value


def test_refocus_reproducible():
    pdg = generate_chain_pdg(GeneratorSpec(6, 5, seed=1))
    for kind in ("uniform", "partial", "hub", "smooth"):
        a = make_refocus(kind, pdg, seed=7)
        b = make_refocus(kind, pdg, seed=7)
        for _ in range(10):
            assert next(a).to_json() == next(b).to_json()


def test_refocus_masks():
    pdg3 = ParametricPDG([Variable("X1", 2), Variable("X2", 2), Variable("X3", 2)])
    t = Cpd(CONSTANT, 2, 2, table=[[.5, .5], [.5, .5]])
    pdg3.add_arc("a", ("X1",), ("X2",), t)
    pdg3.add_arc("b", ("X2",), ("X3",), t)
    pdg3.add_arc("c", (), ("X1",), Cpd(CONSTANT, 1, 2, table=[[.5, .5]]))
    for f in [next(make_refocus("uniform", pdg3)) for _ in range(3)]:
        assert [f.b(a) for a in pdg3.arc_ids] == [1.0, 1.0, 1.0]

    pdg4 = generate_chain_pdg(GeneratorSpec(5, 4, seed=0))
    stream = make_refocus("partial", pdg4, seed=3)
    for _ in range(20):
        f = next(stream)
        assert sorted(f.b(a) for a in pdg4.arc_ids) == [0, 0, 1, 1]

    hub = make_refocus("hub", pdg3, seed=0)
    for _ in range(30):
        f = next(hub)
        on = {a for a in pdg3.arc_ids if f.b(a) == 1}
        assert on in ({"a", "c"}, {"a", "b"}, {"b"})
    smooth = make_refocus("smooth", pdg4, seed=0, rate=2.0)
    ws = np.array([[next(smooth).b(a) for a in pdg4.arc_ids] for _ in range(2000)])
    assert np.all(ws >= 0)
    assert ws.mean() == pytest.approx(0.5, rel=0.05)


def test_hub_on_middle_node_activates_both_arcs():
    pdg = ParametricPDG([Variable("X1", 2), Variable("X2", 2), Variable("X3", 2)])
    t = Cpd(CONSTANT, 2, 2, table=[[.5, .5], [.5, .5]])
    pdg.add_arc("a", ("X1",), ("X2",), t)
    pdg.add_arc("b", ("X2",), ("X3",), t)
    seen = set()
    stream = make_refocus("hub", pdg, seed=0)
    for _ in range(40):
        f = next(stream)
        on = tuple(a for a in pdg.arc_ids if f.b(a) == 1)
        seen.add(on)
    assert ("a", "b") in seen


def test_partial_fraction_validated():
    with pytest.raises(ValueError):
        RefocusStrategy("partial", fraction=0.0)


def test_rk4_richardson_on_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    x0 = np.array([1.0, -1.0])
    T = 0.8
    exact = expm(-A * T) @ x0

    def field(x):
        return -A @ x

    errs = {}
    for m in (EULER, RK4):
        e = []
        for n in (8, 16):
            e.append(np.linalg.norm(integrate(field, x0, T / n, n, m) - exact))
        errs[m] = e[0] / e[1]
    assert errs[RK4] >= 3.5
    assert 1.6 < errs[EULER] < 2.5
    # both agree with each other as the step shrinks
    a = integrate(field, x0, T / 512, 512, EULER)
    b = integrate(field, x0, T / 512, 512, RK4)
    assert np.linalg.norm(a - b) < 5e-3


def test_rk4_lir_step_matches_euler_for_small_steps():
    base = belief_pair((1.0, -0.5, 0.2))
    f = Focus.uniform(base, chi=1.0)
    out = {}
    for m in (EULER, RK4):
        pdg = base.copy()
        lir_step(pdg, f, OdeConfig(m, 4, 1e-3), PRECISE)
        out[m] = pdg.params()["q"]
    assert np.linalg.norm(out[EULER] - out[RK4]) < 1e-5


def test_consistent_pdg_stays_consistent():
    pdg = ParametricPDG([Variable("X", 2), Variable("Y", 2)])
    pdg.add_arc("x", (), ("X",), Cpd(LEARNABLE, 1, 2, table=[[.4, .6]]))
    pdg.add_arc("y", ("X",), ("Y",), Cpd(LEARNABLE, 2, 2, table=[[.3, .7], [.9, .1]]))
    for kind in ("uniform", "partial", "hub", "smooth"):
        tr = lir_run(pdg, RefocusStrategy(kind, seed=0), 3)
        assert tr.init_value < 1e-12
        assert tr.final_value < 1e-8
        # per-step values come from 20 warm Adam iterations and carry its jitter
        assert all(r.value < 1e-3 for r in tr.steps)


def test_two_controllable_beliefs_meet_at_geometric_mean():
    pdg = ParametricPDG([Variable("X", 2)])
    pdg.add_arc("q1", (), ("X",), Cpd(LEARNABLE, 1, 2, table=[[.9, .1]]))
    pdg.add_arc("q2", (), ("X",), Cpd(LEARNABLE, 1, 2, table=[[.1, .9]]))
    tr = lir_run(pdg, RefocusStrategy("uniform"), 20, OdeConfig(EULER, 10, 0.2))
    q1 = tr.pdg.arc("q1").cpd.table()[0]
    q2 = tr.pdg.arc("q2").cpd.table()[0]
    assert_allclose(q1, [.5, .5], atol=1e-3)
    assert_allclose(q2, [.5, .5], atol=1e-3)
    assert tr.final_value < 1e-5


def test_uniform_resolves_chain_7v_6e():
    pdg = generate_chain_pdg(GeneratorSpec.parse("chain_7v_6e", 0))
    tr = lir_run(pdg, RefocusStrategy("uniform", seed=0), 20)
    assert resolution_percentage(tr) >= 90.0
    assert len(tr.steps) == 20
    assert all(math.isfinite(r.value) for r in tr.steps)


def test_lir_run_does_not_mutate_input():
    pdg = generate_chain_pdg(GeneratorSpec(4, 3, seed=0))
    h = pdg.param_hash()
    lir_run(pdg, "uniform", 2)
    assert pdg.param_hash() == h


def test_resolution_and_tv_examples():
    assert resolution_percentage(0.2, 0.2) == 0.0
    assert resolution_percentage(0.2, 0.02) == pytest.approx(90.0)
    with pytest.raises(ValueError):
        resolution_percentage(0.0, 0.0)
    assert tv_distortion([.3, .7], [.3, .7]) == 0.0
    assert tv_distortion([1, 0], [0, 1]) == 1.0
    assert tv_distortion([1, 0], [.5, .5]) == 0.5
    a = JointTable(["X", "Y"], (2, 2), np.array([.1, .2, .3, .4]))
    assert tv_distortion(a, a.reorder(["Y", "X"])) == pytest.approx(0.0, abs=1e-15)


def test_adaptive_default_integrator():
    assert OdeConfig().integrator == ADAPTIVE
    assert OdeConfig().outer_iters_per_step == 10
    assert OdeConfig().step_scale == 0.05
    with pytest.raises(ValueError):
        OdeConfig(outer_iters_per_step=0)
