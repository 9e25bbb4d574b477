"""GAN objectives as inconsistency of a coin/image PDG over a finite image space.

Variables: coin C (0 = real, 1 = fake), X_real, X_fake and the shown image X.
Hard arcs fix C ~ 1/2, X_real ~ p_data, X_fake ~ G and X = X_real if C is
real else X_fake, so the joint is forced. The discriminator D(C|X) and the
"fair coin" belief e(C|X) = 1/2 carry the focus weights beta_D and beta_e.
"""

from dataclasses import dataclass
import math

import numpy as np

from ..pdg import CONSTANT, LEARNABLE, Cpd, Focus, ParametricPDG, PDGError, Variable
from ..inconsistency import InnerSolverConfig, envelope_grad, solve_inconsistency

MAX_OUTCOMES = 16

DISCRIMINATOR = {"D": 1.0, "e": -1.0}
GENERATOR = {"D": -1.0, "e": 1.0}


@dataclass
class GanCheck:
    numeric: float
    closed: float       # -bD * L_mix + (bD + be) * JS - bD * log 2
    l_mix: float        # 1/2 E_data log D + 1/2 E_G log(1 - D)
    l_gan: float        # E_data log D + E_G log(1 - D)
    js: float

    @property
    def gap(self) -> float:
        return abs(self.numeric - self.closed)


def _check(p, name):
    p = np.asarray(p, dtype=float).ravel()
    if np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
        raise PDGError(f"{name} must be a distribution")
    return p


def gan_pdg(p_data, G, D) -> ParametricPDG:
    p_data, G = _check(p_data, "p_data"), _check(G, "G")
    D = np.asarray(D, dtype=float).ravel()
    v = p_data.size
    if not 1 <= v <= MAX_OUTCOMES or G.size != v or D.size != v:
        raise PDGError(f"need 1..{MAX_OUTCOMES} outcomes and matching p_data, G, D")
    if np.any(D <= 0) or np.any(D >= 1):
        raise PDGError("D must lie strictly inside (0, 1) on every outcome")
    pdg = ParametricPDG([Variable("C", 2), Variable("Xr", v), Variable("Xf", v), Variable("X", v)])
    inf = math.inf
    pdg.add_arc("coin", [], ["C"], Cpd(CONSTANT, 1, 2, table=[[0.5, 0.5]]), beta=inf)
    pdg.add_arc("data", [], ["Xr"], Cpd(CONSTANT, 1, v, table=p_data[None]), beta=inf)
    pdg.add_arc("G", [], ["Xf"], Cpd(LEARNABLE, 1, v, table=G[None]), beta=inf)
    mux = np.zeros((2, v, v, v))
    for r in range(v):
        for f in range(v):
            mux[0, r, f, r] = 1.0
            mux[1, r, f, f] = 1.0
    pdg.add_arc("mux", ["C", "Xr", "Xf"], ["X"], Cpd(CONSTANT, 2 * v * v, v, table=mux.reshape(-1, v)),
                beta=inf)
    pdg.add_arc("D", ["X"], ["C"], Cpd(LEARNABLE, v, 2, table=np.stack([D, 1 - D], axis=1)))
    pdg.add_arc("e", ["X"], ["C"], Cpd(CONSTANT, v, 2, table=np.full((v, 2), 0.5)))
    return pdg


def gan_focus(beta_D: float, beta_e: float, control=()) -> Focus:
    beta = {"coin": math.inf, "data": math.inf, "G": math.inf, "mux": math.inf,
            "D": float(beta_D), "e": float(beta_e)}
    return Focus(alpha={}, beta=beta, gamma=0.0, chi={a: 1.0 for a in control})


def js_divergence(p, q) -> float:
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kp = np.where(p > 0, p * np.log(p / m), 0.0).sum()
        kq = np.where(q > 0, q * np.log(q / m), 0.0).sum()
    return float(0.5 * kp + 0.5 * kq)


def gan_objectives(p_data, G, D):
    """(L_GAN, L_mix): the textbook value and its coin-weighted (halved) version."""
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p_data > 0, p_data * np.log(D), 0.0).sum()
        b = np.where(G > 0, G * np.log(1 - D), 0.0).sum()
    return float(a + b), float(0.5 * a + 0.5 * b)


def gan_identity_check(p_data, G, D, beta_D: float, beta_e: float,
                       cfg: InnerSolverConfig = None) -> GanCheck:
    """Numeric inconsistency of the PDG vs the closed form in L_mix and JS."""
    pdg = gan_pdg(p_data, G, D)
    p_data, G, D = _check(p_data, "p_data"), _check(G, "G"), np.asarray(D, dtype=float).ravel()
    res = solve_inconsistency(pdg, gan_focus(beta_D, beta_e), cfg or InnerSolverConfig())
    l_gan, l_mix = gan_objectives(p_data, G, D)
    js = js_divergence(p_data, G)
    closed = -beta_D * l_mix + (beta_D + beta_e) * js - beta_D * math.log(2)
    return GanCheck(float(res.value), closed, l_mix, l_gan, js)


def discriminator_grad(p_data, G, D) -> np.ndarray:
    """Envelope gradient of the discriminator-focus inconsistency w.r.t. D's logits."""
    pdg = gan_pdg(p_data, G, D)
    focus = gan_focus(**{"beta_D": DISCRIMINATOR["D"], "beta_e": DISCRIMINATOR["e"]}, control=("D",))
    res = solve_inconsistency(pdg, focus, InnerSolverConfig())
    return envelope_grad(pdg, focus, res.mu_star)["D"]
