"""Randomized verification harnesses: each trial compares a reduction against a reference route.

A harness maps (rng, trial index) to a JSON-ready report with an ``ok`` flag;
``run_verify`` draws the trials from a seeded stream.
"""

import math

import numpy as np
from scipy.spatial.distance import jensenshannon
from scipy.special import softmax

from .rng import make_rng
from .reductions import bp, decision, em, gan, gfn_identity, transformer, triad

HARNESSES = ("em", "bp", "gan", "transformer", "decision", "gfn-identity", "triad")


def _textbook_em(prior, emission, d, iters):
    """Posterior-weighted counts; returns the model after every full iteration."""
    out = [(prior, emission)]
    for _ in range(iters):
        joint = prior[:, None] * emission
        post = joint / joint.sum(axis=0, keepdims=True)
        w = post * d[None, :]
        prior = w.sum(axis=1)
        emission = w / prior[:, None]
        out.append((prior, emission))
    return out


def verify_em(rng, trial, iters=10, tol=1e-10) -> dict:
    k, v = 2, 3
    model = em.LatentVarModel(rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(v), size=k))
    d = rng.dirichlet(np.ones(v))
    tr = em.em_via_lir(model, d, iters=iters)
    ref = _textbook_em(model.prior, model.emissions[0], d, iters)
    dev = max(max(np.abs(tr.thetas[2 * t].prior - p).max(),
                  np.abs(tr.thetas[2 * t].emissions[0] - e).max()) for t, (p, e) in enumerate(ref))
    mono = bool(np.all(np.diff(tr.values) <= 1e-12))
    return {"max_param_dev": float(dev), "monotone": mono, "tolerance": tol,
            "ok": bool(dev < tol and mono)}


def verify_bp(rng, trial, tol=1e-8) -> dict:
    tree = bp.chain_graph([2, 3, 2], rng)
    cyc = bp.cycle_graph(4, 2, rng)
    dev = 0.0
    for g, iters in ((tree, 3), (cyc, 4)):
        sched = bp.flooding_schedule(g) + bp.belief_schedule(g)
        got = bp.bp_via_lir(g, sched, iters)
        ref = bp.sum_product(g, sched, iters)
        for (ka, a), (kb, b) in zip(got.history, ref.history):
            if ka != kb:
                return {"error": "schedule mismatch", "ok": False}
            dev = max(dev, float(np.abs(a - b).max()))
        if g is tree:
            exact = g.brute_force_marginals()
            marg = max(float(np.abs(got.beliefs[x] - exact[x]).max()) for x in g.variables)
    return {"max_message_dev": dev, "tree_marginal_dev": marg, "tolerance": tol,
            "ok": bool(dev < tol and marg < tol)}


def verify_gan(rng, trial, tol=1e-4) -> dict:
    v = int(rng.integers(2, 9))
    p, g = rng.dirichlet(np.ones(v)), rng.dirichlet(np.ones(v))
    d = rng.uniform(0.05, 0.95, v)
    bD, be = [(1, -1), (-1, 1), (1, 1), (-1, -1)][trial % 4]
    chk = gan.gan_identity_check(p, g, d, bD, be)
    l_mix = 0.5 * float(p @ np.log(d) + g @ np.log(1 - d))
    ref = -bD * l_mix + (bD + be) * jensenshannon(p, g) ** 2 - bD * math.log(2)
    err = abs(chk.numeric - ref)
    return {"v": v, "beta_D": bD, "beta_e": be, "numeric": chk.numeric, "reference": float(ref),
            "abs_err": float(err), "tolerance": tol, "ok": bool(err < tol)}


def verify_transformer(rng, trial, tol=1e-4) -> dict:
    n, d = 3, 2
    x = rng.normal(size=(n, d))
    K, Q, V = (rng.normal(size=(d, d)) for _ in range(3))
    r = transformer.transformer_fixed_point(x, K, Q, V)
    k, q, v = x @ K.T, x @ Q.T, x @ V.T
    ref = softmax(q @ k.T, axis=1) @ v
    err = float(np.abs(r.flow - ref).max())
    return {"flow_err": err, "closed_err": float(np.abs(r.closed - ref).max()), "tolerance": tol,
            "ok": bool(err < tol)}


def verify_decision(rng, trial, tol=1e-6) -> dict:
    prior = rng.dirichlet(np.ones(3))
    outcome = rng.dirichlet(np.ones(3), size=(3, 2))
    u = rng.uniform(-2, 2, 3)
    eu = outcome @ u
    small = decision.DecisionProblem(prior, outcome, u, beta_b=1e-3)
    large = decision.DecisionProblem(prior, outcome, u, beta_b=1e3)
    mid = decision.DecisionProblem(prior, outcome, u, beta_b=1.0)
    ok_small = decision.choose(small) == int(np.argmax(prior @ eu))
    ok_large = decision.choose(large) == int(np.argmax(eu.max(axis=0)))
    err = max(abs(decision.numeric_inconsistency(mid, a) - decision.decision_inconsistency(mid, a))
              for a in range(2))
    return {"expected_utility_rule": bool(ok_small), "optimistic_rule": bool(ok_large),
            "numeric_err": float(err), "tolerance": tol,
            "ok": bool(ok_small and ok_large and err < tol)}


def verify_gfn_identity(rng, trial, tol=1e-10, cos_tol=1e-8) -> dict:
    dag = gfn_identity.random_layered_dag(rng, widths=(2, 2))
    params = gfn_identity.random_params(dag, rng)
    Q = rng.dirichlet(np.ones(len(dag.trajectories())))
    num, mod = gfn_identity.gfn_identity_check(dag, params, Q)
    cos = gfn_identity.cosine(gfn_identity.numeric_grad(dag, params, Q),
                              gfn_identity.modtb_grad(dag, params, Q))
    return {"numeric": num, "modtb": mod, "abs_err": abs(num - mod), "grad_cosine": cos,
            "tolerance": tol, "ok": bool(abs(num - mod) < tol and cos > 1 - cos_tol)}


def verify_triad(rng, trial, tol=1e-8) -> dict:
    n, d = 3, 2
    m = triad.LinearClassifier(rng.normal(size=(n, d)), rng.normal(size=n))
    x, y = rng.normal(size=d), int(rng.integers(n))
    pred = triad.triad_resolve(m, x, y, "y", chi=math.inf)
    new = triad.triad_resolve(m, x, y, "theta", steps=1, rate=0.1)
    g = m.probs(x) - np.eye(n)[y]
    sgd = max(float(np.abs(new.W - (m.W - 0.1 * np.outer(g, x))).max()),
              float(np.abs(new.b - (m.b - 0.1 * g)).max()))
    x2 = triad.triad_resolve(m, x, y, "x", steps=1, rate=0.05)
    err_pred = float(np.abs(pred - m.probs(x)).max())
    descends = m.nll(x2, y) < m.nll(x, y) or m.nll(x, y) < 1e-12
    return {"inference_err": err_pred, "sgd_err": sgd, "input_descends": bool(descends),
            "tolerance": tol, "ok": bool(err_pred < tol and sgd < tol and descends)}


_FNS = {"em": verify_em, "bp": verify_bp, "gan": verify_gan, "transformer": verify_transformer,
        "decision": verify_decision, "gfn-identity": verify_gfn_identity, "triad": verify_triad}


def run_verify(name: str, seed: int = 0, trials: int = 5):
    """(list of per-trial reports, all ok)."""
    if name not in _FNS:
        raise ValueError(f"unknown harness {name!r}; expected one of {HARNESSES}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = make_rng(seed, HARNESSES.index(name))
    reports = []
    for t in range(trials):
        rep = _FNS[name](rng, t)
        reports.append({"harness": name, "trial": t, **rep})
    return reports, all(r["ok"] for r in reports)
