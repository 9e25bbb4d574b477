"""A self-attention layer as the resolution of Gaussian beliefs about its outputs.

Inputs x_i and outputs x'_j are point masses; arc (i, j) says
X'_j ~ N(v_i, Sigma_ij) with attention phi_ij = exp<k_i, q_j>. Under the
density convention the masked inconsistency is

    F(x') = sum_ij phi_ij / 2 * [log det(2 pi Sigma_ij) + (x'_j - v_i)^T Sigma_ij^-1 (x'_j - v_i)]

and controlling x' runs gradient flow on F.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import softmax

from ..pdg import GAUSSIAN_MEAN, Cpd, PDGError
from ..lir import rk4_step


@dataclass
class TransformerResult:
    closed: np.ndarray      # (n, d) closed-form fixed point
    flow: np.ndarray        # (n, d) gradient-flow solution
    softmax: np.ndarray     # (n, d) x'_j = sum_i softmax_i(<k_i, q_j>) v_i
    attention: np.ndarray   # (n, n) phi_ij, rows i (keys), columns j (queries)
    values: np.ndarray      # (n, d) v_i
    steps: int


def attention_weights(x, W_K, W_Q):
    k, q = x @ W_K.T, x @ W_Q.T
    logits = k @ q.T           # [i, j] = <k_i, q_j>
    return logits


def _covs(n, d, covariances):
    if covariances is None:
        return np.broadcast_to(np.eye(d), (n, n, d, d))
    S = np.asarray(covariances, dtype=float)
    if S.shape != (n, n, d, d):
        raise PDGError(f"covariances must have shape {(n, n, d, d)}")
    return S


def masked_inconsistency(xp, v, phi, covs) -> float:
    n, d = v.shape
    tot = 0.0
    for i in range(n):
        for j in range(n):
            r = xp[j] - v[i]
            S = covs[i, j]
            _, logdet = np.linalg.slogdet(2 * math.pi * S)
            tot += 0.5 * phi[i, j] * (logdet + r @ np.linalg.solve(S, r))
    return float(tot)


def masked_gradient(xp, v, phi, covs) -> np.ndarray:
    """dF/dx'_j = sum_i phi_ij Sigma_ij^-1 (x'_j - v_i)."""
    g = np.zeros_like(xp)
    n = v.shape[0]
    for i in range(n):
        for j in range(n):
            g[j] += phi[i, j] * np.linalg.solve(covs[i, j], xp[j] - v[i])
    return g


def isotropic_value(xp, v, phi) -> float:
    """F for Sigma = I, scored through unit Gaussian cpds on each arc."""
    n = v.shape[0]
    tot = 0.0
    for i in range(n):
        cpd = Cpd(GAUSSIAN_MEAN, 1, 1, params=v[i])
        for j in range(n):
            tot -= phi[i, j] * cpd.gaussian_logpdf(xp[j])
    return float(tot)


def closed_form(v, phi, covs) -> np.ndarray:
    n, d = v.shape
    out = np.zeros((n, d))
    for j in range(n):
        A = np.zeros((d, d))
        b = np.zeros(d)
        for i in range(n):
            P = np.linalg.inv(covs[i, j])
            A += phi[i, j] * P
            b += phi[i, j] * P @ v[i]
        if abs(np.linalg.det(A)) < 1e-300 or np.linalg.cond(A) > 1e14:
            raise PDGError(f"normalizer matrix for output {j} is singular")
        out[j] = np.linalg.solve(A, b)
    return out


def transformer_fixed_point(x, W_K, W_Q, W_V, covariances=None, x0=None, tol: float = 1e-12,
                            max_steps: int = 100000) -> TransformerResult:
    """Closed form and RK4 gradient-flow fixed point of the attention PDG."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    v = x @ np.asarray(W_V, dtype=float).T
    logits = attention_weights(x, np.asarray(W_K, dtype=float), np.asarray(W_Q, dtype=float))
    # scaling phi by a per-output constant leaves every fixed point unchanged;
    # shift by the column max so exp does not overflow
    phi = np.exp(logits - logits.max(axis=0, keepdims=True))
    covs = _covs(n, d, covariances)
    closed = closed_form(v, phi, covs)
    # step size from the largest curvature of F
    curv = max(np.linalg.eigvalsh(sum(phi[i, j] * np.linalg.inv(covs[i, j]) for i in range(n))).max()
               for j in range(n))
    h = 1.0 / curv
    xp = x.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    field = lambda z: -masked_gradient(z.reshape(n, d), v, phi, covs).ravel()
    z = xp.ravel()
    steps = 0
    while steps < max_steps:
        g = field(z)
        if np.sqrt(g @ g) < tol:
            break
        z = rk4_step(field, z, h)
        steps += 1
    return TransformerResult(closed, z.reshape(n, d), softmax(logits, axis=0).T @ v, phi, v, steps)
