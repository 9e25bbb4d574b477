import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import jensenshannon

from lirlab.gflownet import (COPRIME, COSINE, ORIGINAL, XOR, HyperGrid, RewardSpec, TabularGFN,
                             TrainConfig, all_trajectories, balanced_policy, batch_from,
                             enumerate_modes, eval_metrics, exact_terminal_distribution,
                             js_divergence, loss, loss_and_grad, loss_lpv, loss_modlpv, loss_modtb,
                             loss_tb, moving_average, raw_reward, reward, sample_trajectories,
                             target_distribution, train)
from lirlab.gflownet.model import TrajectoryBatch
from lirlab.gflownet.train import score_grad

from oracles import grid_paths, hypergrid_reward, path_prob


def _batch(s, n):
    """Batch whose scores (at log Z = 0) are exactly ``s``."""
    s = np.asarray(s, dtype=float)
    m = len(s)
    return TrajectoryBatch([[0]] * m, [[0]] * m, np.zeros(m, dtype=int), np.asarray(n),
                           s, np.zeros(m), np.zeros(m))


def _random_gfn(grid, rng, scale=1.0):
    return TabularGFN(grid, scale * rng.normal(size=(grid.n_states, grid.n_actions)),
                      rng.normal())


def _pf_dicts(gfn):
    p = np.exp(gfn.log_pf())
    return [{**{i: p[s, i] for i in range(gfn.grid.d)}, "stop": p[s, gfn.grid.stop]}
            for s in range(gfn.grid.n_states)]


# ---------- rewards and modes ----------

def test_reward_examples():
    g = HyperGrid(4, 24)
    assert raw_reward(RewardSpec(ORIGINAL), g, (3, 3, 3, 3)) == pytest.approx(2.6)
    assert raw_reward(RewardSpec(ORIGINAL), g, (0, 0, 0, 0)) == pytest.approx(0.6)
    assert raw_reward(RewardSpec(XOR), g, (1, 0, 0, 0)) == 0.0
    assert raw_reward(RewardSpec(XOR), g, (0, 0, 0, 0)) == 111.0


@pytest.mark.parametrize("variant", [ORIGINAL, COSINE, XOR, COPRIME])
def test_reward_matches_scalar_oracle(variant):
    g = HyperGrid(3, 13)
    c = g.coords()
    got = raw_reward(RewardSpec(variant), g, c)
    want = np.array([hypergrid_reward(variant, s, g.H) for s in c])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=0)


def test_reward_floor_is_additive():
    g = HyperGrid(2, 8)
    spec = RewardSpec(XOR)
    c = g.coords()
    np.testing.assert_array_equal(reward(spec, g, c), raw_reward(spec, g, c) + 1e-6)
    assert np.all(raw_reward(spec, g, c) >= 0)


def test_bad_reward_spec():
    with pytest.raises(ValueError):
        RewardSpec("sine")
    with pytest.raises(ValueError):
        RewardSpec(ORIGINAL, floor=0.0)
    assert RewardSpec("BitwiseXor").variant == XOR


@pytest.mark.parametrize("variant,count", [(ORIGINAL, 256), (COSINE, 1280), (XOR, 10752),
                                           (COPRIME, 20736)])
def test_mode_counts(variant, count):
    n, states = enumerate_modes(RewardSpec(variant), 4, 24)
    assert n == count
    assert states.shape == (count, 4)


def test_original_modes_are_band_corners():
    _, states = enumerate_modes(RewardSpec(ORIGINAL), 4, 24)
    assert set(np.unique(states)) == {3, 4, 19, 20}


def test_coprime_values_per_dimension():
    _, states = enumerate_modes(RewardSpec(COPRIME), 1, 24)
    assert sorted(states[:, 0]) == [1, 2, 3, 4, 5, 6, 9, 10, 12, 15, 18, 20]


def test_mode_count_small_grid_brute_force():
    # Independent count for Original on d=2, H=24 using the scalar oracle
    n = sum(hypergrid_reward(ORIGINAL, s, 24) >= 2.6 - 1e-12
            for s in itertools.product(range(24), repeat=2))
    assert enumerate_modes(RewardSpec(ORIGINAL), 2, 24)[0] == n == 16


# ---------- grid and sampling ----------

def test_grid_structure():
    g = HyperGrid(2, 3)
    m = g.action_mask()
    assert m.shape == (9, 3)
    assert m[:, g.stop].all()
    assert not m[g.index((2, 0)), 0] and m[g.index((2, 0)), 1]
    np.testing.assert_array_equal(g.n_parents()[[g.index((0, 0)), g.index((1, 0)), g.index((1, 1))]],
                                  [0, 1, 2])
    with pytest.raises(ValueError):
        HyperGrid(0, 3)


def test_trajectory_enumeration_counts():
    assert len(all_trajectories(HyperGrid(1, 2))) == 2
    g = HyperGrid(2, 3)
    assert len(all_trajectories(g)) == len(grid_paths(2, 3))


def test_deterministic_policy_gives_identical_batch():
    g = HyperGrid(2, 5)
    logits = np.full((g.n_states, g.n_actions), -np.inf)
    logits[:, 0] = 0.0
    logits[g.coords()[:, 0] == g.H - 1, g.stop] = 0.0
    gfn = TabularGFN(g, logits)
    b = sample_trajectories(gfn, RewardSpec(), 20, np.random.default_rng(0))
    assert all(s == b.states[0] for s in b.states)
    assert all(a == [0] * (g.H - 1) + [g.stop] for a in b.actions)
    np.testing.assert_array_equal(b.lengths, g.H)
    np.testing.assert_array_equal(b.log_pf, 0.0)


def test_sampling_is_seeded():
    g = HyperGrid(2, 4)
    gfn = _random_gfn(g, np.random.default_rng(1))
    a = sample_trajectories(gfn, RewardSpec(), 50, np.random.default_rng(7))
    b = sample_trajectories(gfn, RewardSpec(), 50, np.random.default_rng(7))
    assert a.states == b.states and a.actions == b.actions
    with pytest.raises(ValueError):
        sample_trajectories(gfn, RewardSpec(), 0, np.random.default_rng(0))


def test_batch_records_match_path_oracle():
    g = HyperGrid(2, 4)
    spec = RewardSpec(ORIGINAL)
    gfn = _random_gfn(g, np.random.default_rng(2))
    b = sample_trajectories(gfn, spec, 30, np.random.default_rng(3))
    pf = _pf_dicts(gfn)
    coords = g.coords()
    for i in range(b.m):
        path = [tuple(coords[s]) for s in b.states[i]]
        assert b.log_pf[i] == pytest.approx(math.log(path_prob(path, pf, g.index)), abs=1e-12)
        # uniform backward policy: prod over visited non-origin states of 1/#parents
        want_pb = -sum(math.log(sum(x > 0 for x in s)) for s in path[1:])
        assert b.log_pb[i] == pytest.approx(want_pb, abs=1e-12)
        assert b.log_r[i] == pytest.approx(math.log(hypergrid_reward(ORIGINAL, path[-1], 4) + 1e-6))
        assert b.lengths[i] == len(path)


def test_monte_carlo_matches_path_probabilities():
    g = HyperGrid(2, 3)
    gfn = _random_gfn(g, np.random.default_rng(4), scale=0.7)
    m = 100_000
    b = sample_trajectories(gfn, RewardSpec(), m, np.random.default_rng(5))
    pf = _pf_dicts(gfn)
    coords = g.coords()
    counts = {}
    for s in b.states:
        counts[tuple(s)] = counts.get(tuple(s), 0) + 1
    for path in grid_paths(2, 3):
        p = path_prob(path, pf, g.index)
        key = tuple(int(g.index(s)) for s in path)
        sigma = math.sqrt(m * p * (1 - p))
        assert abs(counts.get(key, 0) - m * p) <= 3 * sigma + 1e-9


# ---------- exact evaluation ----------

def test_straight_line_policy_gives_point_mass():
    g = HyperGrid(3, 4)
    logits = np.full((g.n_states, g.n_actions), -np.inf)
    logits[:, 1] = 0.0
    logits[g.coords()[:, 1] == g.H - 1, g.stop] = 0.0
    p = exact_terminal_distribution(TabularGFN(g, logits))
    want = np.zeros(g.n_states)
    want[g.index((0, g.H - 1, 0))] = 1.0
    np.testing.assert_array_equal(p, want)


def test_uniform_two_state_line():
    p = exact_terminal_distribution(TabularGFN(HyperGrid(1, 2)))
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 4), st.integers(0, 2 ** 31))
def test_exact_distribution_matches_enumeration(d, H, seed):
    g = HyperGrid(d, H)
    gfn = _random_gfn(g, np.random.default_rng(seed), scale=2.0)
    p = exact_terminal_distribution(gfn)
    assert abs(p.sum() - 1) < 1e-10
    pf = _pf_dicts(gfn)
    want = np.zeros(g.n_states)
    for path in grid_paths(d, H):
        want[g.index(path[-1])] += path_prob(path, pf, g.index)
    np.testing.assert_allclose(p, want, atol=1e-12)


def test_metric_examples():
    g = HyperGrid(1, 2)
    # p = p*
    bal = balanced_policy(RewardSpec(ORIGINAL), g)
    l1, jsd, cov = eval_metrics(bal, RewardSpec(ORIGINAL))
    assert l1 < 1e-12 and abs(jsd) < 1e-12 and cov is None
    assert js_divergence(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(math.log(2))
    assert np.abs(np.array([1.0, 0]) - np.array([0.5, 0.5])).sum() == 1.0
    # same via the library on a policy that always stops at the origin
    logits = np.array([[-np.inf, 0.0], [-np.inf, 0.0]])
    spec = RewardSpec(ORIGINAL, r1=0.0, r2=0.0)   # flat reward, p* = (1/2, 1/2)
    l1, _, _ = eval_metrics(TabularGFN(g, logits), spec)
    assert l1 == pytest.approx(1.0)


def test_js_divergence_matches_scipy():
    rng = np.random.default_rng(6)
    for _ in range(20):
        p, q = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(7))
        assert js_divergence(p, q) == pytest.approx(jensenshannon(p, q) ** 2, abs=1e-12)


def test_mode_coverage_counts_visited_modes():
    g = HyperGrid(2, 8)
    spec = RewardSpec(ORIGINAL)
    modes = [g.index(s) for s in [(1, 1), (1, 6), (6, 1), (6, 6)]]
    assert eval_metrics(TabularGFN(g), spec, set())[2] == 0.0
    assert eval_metrics(TabularGFN(g), spec, {modes[0], modes[3], 0})[2] == 0.5


# ---------- losses ----------

def test_single_trajectory_loss_values():
    b = _batch([math.log(2)], [1])
    assert loss_tb(b, 0.0) == pytest.approx(math.log(2) ** 2)
    assert loss_modtb(b, 0.0) == pytest.approx(0.4805, abs=1e-4)


def test_variance_loss_values():
    b = _batch([0.0, math.log(2)], [1, 1])
    assert loss_lpv(b) == pytest.approx(math.log(2) ** 2 / 4)
    assert loss_modlpv(b) == pytest.approx(0.1201, abs=1e-4)
    assert loss_lpv(_batch([0.3, 0.3, 0.3], [1, 2, 3])) == 0.0
    with pytest.raises(ValueError):
        loss_lpv(_batch([0.1], [1]))


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12), st.integers(1, 9),
       st.floats(-3, 3))
def test_constant_length_divides_exactly(s, n, log_z):
    b = _batch(s, [n] * len(s))
    np.testing.assert_allclose(loss_modtb(b, log_z), loss_tb(b, log_z) / n, rtol=1e-14, atol=1e-300)
    np.testing.assert_allclose(loss_modlpv(b), loss_lpv(b) / n, rtol=1e-14, atol=1e-300)


def test_loss_clamp_caps_terms():
    b = _batch([20.0, 0.5], [1, 1])
    v, g = loss_and_grad("tb", b, 0.0, clamp=100.0)
    assert v == pytest.approx((100.0 + 0.25) / 2)
    assert g[0] == 0.0 and g[1] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        loss("kl", b)


@pytest.mark.parametrize("kind", ["tb", "modtb", "lpv", "modlpv"])
def test_loss_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(8)
    s, n = rng.normal(size=6), rng.integers(1, 6, size=6)
    _, g = loss_and_grad(kind, _batch(s, n), 0.3)
    h = 1e-6
    fd = np.array([(loss(kind, _batch(s + h * e, n), 0.3) - loss(kind, _batch(s - h * e, n), 0.3))
                   / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_score_gradient_matches_finite_differences():
    g = HyperGrid(2, 3)
    spec = RewardSpec(ORIGINAL)
    gfn = _random_gfn(g, np.random.default_rng(9))
    trajs = all_trajectories(g)
    w = np.random.default_rng(10).normal(size=len(trajs))

    def f(logits):
        return float(w @ batch_from(TabularGFN(g, logits), spec, trajs).scores())

    grad = score_grad(gfn, batch_from(gfn, spec, trajs), w)
    fin = np.isfinite(gfn.logits)
    h = 1e-6
    for k in zip(*np.nonzero(fin)):
        up, dn = gfn.logits.copy(), gfn.logits.copy()
        up[k] += h
        dn[k] -= h
        assert grad[k] == pytest.approx((f(up) - f(dn)) / (2 * h), abs=1e-6)


# ---------- fixed points ----------

@pytest.mark.parametrize("variant", [ORIGINAL, COSINE, XOR, COPRIME])
def test_balanced_policy_zeroes_every_loss(variant):
    g = HyperGrid(2, 5)
    spec = RewardSpec(variant)
    bal = balanced_policy(spec, g)
    b = batch_from(bal, spec, all_trajectories(g))
    np.testing.assert_allclose(b.scores(bal.log_z), 0.0, atol=1e-9)
    assert bal.log_z == pytest.approx(math.log(reward(spec, g, g.coords()).sum()))
    for kind in ("tb", "modtb"):
        assert loss(kind, b, bal.log_z) < 1e-18
    for kind in ("lpv", "modlpv"):
        assert loss(kind, b) < 1e-18
    np.testing.assert_allclose(exact_terminal_distribution(bal), target_distribution(spec, g),
                               atol=1e-12)
    assert eval_metrics(bal, spec)[0] < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([0.0, 1e-3, 0.5, 3.0]))
def test_mod_losses_share_fixed_points(seed, noise):
    # X = 0 iff ModX = 0 on a full-coverage batch; perturbations break both together
    g = HyperGrid(2, 3)
    spec = RewardSpec(ORIGINAL)
    bal = balanced_policy(spec, g)
    rng = np.random.default_rng(seed)
    gfn = TabularGFN(g, bal.logits + noise * rng.normal(size=bal.logits.shape), bal.log_z)
    b = batch_from(gfn, spec, all_trajectories(g))
    for x, mx, kw in (("tb", "modtb", {"log_z": gfn.log_z}), ("lpv", "modlpv", {})):
        vx, vm = loss(x, b, **kw), loss(mx, b, **kw)
        assert (vx < 1e-20) == (vm < 1e-20)
        assert vm <= vx + 1e-15 and vm >= vx / b.lengths.max() - 1e-15


def test_lpv_fixed_point_has_scores_at_minus_log_z():
    g = HyperGrid(2, 4)
    spec = RewardSpec(COSINE)
    bal = balanced_policy(spec, g)
    b = batch_from(bal, spec, all_trajectories(g))
    np.testing.assert_allclose(b.scores(0.0), -bal.log_z, atol=1e-9)


# ---------- training ----------

def test_zero_iterations_leave_parameters():
    g = HyperGrid(2, 4)
    gfn = _random_gfn(g, np.random.default_rng(11))
    tr = train(gfn, RewardSpec(), TrainConfig(iters=0))
    np.testing.assert_array_equal(tr.gfn.logits, gfn.logits)
    assert tr.gfn.log_z == gfn.log_z and tr.losses == []


def test_train_does_not_mutate_input():
    g = HyperGrid(2, 4)
    gfn = TabularGFN(g)
    before = gfn.logits.copy()
    train(gfn, RewardSpec(), TrainConfig(iters=5, batch=8))
    np.testing.assert_array_equal(gfn.logits, before)


def test_lpv_training_leaves_log_z():
    g = HyperGrid(2, 4)
    tr = train(TabularGFN(g), RewardSpec(), TrainConfig(loss="lpv", iters=20, batch=8))
    assert tr.gfn.log_z == 0.0


def test_training_is_reproducible():
    g = HyperGrid(2, 4)
    cfg = TrainConfig(iters=30, batch=16, seed=3, eval_every=10)
    a, b = train(TabularGFN(g), RewardSpec(), cfg), train(TabularGFN(g), RewardSpec(), cfg)
    assert a.losses == b.losses and a.evals == b.evals
    np.testing.assert_array_equal(a.gfn.logits, b.gfn.logits)


def test_modtb_training_reaches_target():
    g = HyperGrid(2, 8)
    spec = RewardSpec(ORIGINAL)
    tr = train(TabularGFN(g), spec, TrainConfig(loss="modtb", iters=3000, batch=64, eval_every=500))
    l1 = tr.evals[-1][2]
    assert l1 < 0.05
    assert tr.evals[-1][4] == 1.0
    ma = moving_average(tr.losses, 100)
    assert ma[-1] < 0.1 * ma[0]
    # coarse monotone trend: block means of the smoothed trace do not increase
    blocks = ma[: len(ma) // 300 * 300].reshape(-1, 300).mean(axis=1)
    assert np.all(np.diff(blocks[:4]) < 0)
    assert math.exp(tr.gfn.log_z) == pytest.approx(reward(spec, g, g.coords()).sum(), rel=0.05)


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.arange(5.0), 2), [0.5, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(moving_average([1.0, 3.0], 100), [2.0])
