"""Pure-NumPy implementations of the per-area numeric kernels.

These are the fallback twins of the compiled kernels in ``saecmse._core``;
``saecmse.kernels`` picks one of the two at import time.  The functions are
vectorised over areas and take raw arrays (family code, y, n, X, beta, nu)
so they can sit inside optimiser and Monte-Carlo loops without touching any
of the higher-level dataset objects.

Per-area quantities, with Q the family's quadratic variance function,
mu the linked prior mean and d = v2/n:

    g1 = y - mu
    g2 = (y - mu)^2 - phi*Q(mu),        phi = (1 + nu/n)/(nu - v2)
    mu2, mu3, mu4 = central moments of y - mu of orders 2..4
    Sigma = [[mu2, mu3], [mu3, mu4 - mu2^2]],  det = mu4*mu2 - mu2^3 - mu3^2
    D = Q(mu) * [[x', 0], [Q'(mu)*phi*x', -kappa]], kappa = (1+v2/n)/(nu-v2)^2

and the aggregates are the estimating-function score s = sum_i D_i' Sigma_i^-1 g_i
and the information U = sum_i D_i' Sigma_i^-1 D_i.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

GAUSSIAN = 0
POISSON_GAMMA = 1
BINOMIAL_BETA = 2

_V_COEFFS = {
    GAUSSIAN: (1.0, 0.0, 0.0),
    POISSON_GAMMA: (0.0, 1.0, 0.0),
    BINOMIAL_BETA: (0.0, 1.0, -1.0),
}

_LN_2PI = math.log(2.0 * math.pi)


def link_mean(code: int, lp: np.ndarray) -> np.ndarray:
    """Vectorised mean link: identity / exp / stable logistic."""
    lp = np.asarray(lp, dtype=float)
    if code == GAUSSIAN:
        return lp.copy()
    if code == POISSON_GAMMA:
        return np.exp(lp)
    out = np.empty_like(lp)
    pos = lp >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-lp[pos]))
    e = np.exp(lp[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def area_blocks(
    code: int,
    y: np.ndarray,
    n: np.ndarray,
    X: np.ndarray,
    beta: np.ndarray,
    nu: float,
) -> dict[str, np.ndarray]:
    """All per-area scalar blocks as arrays of length m.

    Returns mean mu, Q, Q', phi, kappa, g1, g2, mu2, mu3, mu4, det_sigma and
    the Sigma^-1 entries (a11, a12, a22).
    """
    v0, v1, v2 = _V_COEFFS[code]
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    lp = X @ beta
    mu = link_mean(code, lp)
    if code == BINOMIAL_BETA:
        # Q(mu) = mu*(1-mu); use the complementary logistic for accuracy.
        muc = link_mean(code, -lp)
        q = mu * muc
    else:
        q = v0 + v1 * mu + v2 * mu * mu
    qp = v1 + 2.0 * v2 * mu

    phi = (1.0 + nu / n) / (nu - v2)
    kappa = (1.0 + v2 / n) / (nu - v2) ** 2
    g1 = y - mu
    g2 = g1 * g1 - phi * q

    d = v2 / n
    # Central moments of xi under the conjugate prior, from the recursion
    # c_{k+1} = k [Q(m) c_{k-1} + Q'(m) c_k] / (nu - k v2).
    xi2 = q / (nu - v2)
    xi3 = 2.0 * q * qp / ((nu - v2) * (nu - 2.0 * v2))
    xi4 = 3.0 * q * ((nu - 2.0 * v2) * q + 2.0 * qp * qp) / (
        (nu - v2) * (nu - 2.0 * v2) * (nu - 3.0 * v2)
    )
    mu2 = q * (nu / n + 1.0) / (nu - v2)
    mu3 = q * qp * (nu / n + 1.0) * (nu / n + 2.0) / ((nu - v2) * (nu - 2.0 * v2))
    mu4 = (
        (d + 1.0) * (2.0 * d + 1.0) * (3.0 * d + 1.0) * xi4
        + (6.0 / n) * qp * (d + 1.0) * (2.0 * d + 1.0) * xi3
        + ((d + 1.0) / n**2) * (7.0 * qp * qp + 2.0 * n * (4.0 * d + 3.0) * q) * xi2
        + q / n**3 * (n * (2.0 * d + 3.0) * q + qp * qp)
    )

    det = mu4 * mu2 - mu2**3 - mu3 * mu3
    a11 = (mu4 - mu2 * mu2) / det
    a12 = -mu3 / det
    a22 = mu2 / det
    return {
        "mu": mu,
        "q": q,
        "qp": qp,
        "phi": phi,
        "kappa": kappa,
        "g1": g1,
        "g2": g2,
        "mu2": mu2,
        "mu3": mu3,
        "mu4": mu4,
        "det_sigma": det,
        "a11": a11,
        "a12": a12,
        "a22": a22,
    }


def gt_score(
    code: int,
    y: np.ndarray,
    n: np.ndarray,
    X: np.ndarray,
    beta: np.ndarray,
    nu: float,
) -> np.ndarray:
    """Estimating-function score s(eta) = sum_i D_i' Sigma_i^-1 g_i, shape (p+1,)."""
    b = area_blocks(code, y, n, X, beta, nu)
    w1 = b["a11"] * b["g1"] + b["a12"] * b["g2"]
    w2 = b["a12"] * b["g1"] + b["a22"] * b["g2"]
    c_beta = b["q"] * (w1 + b["qp"] * b["phi"] * w2)
    s = np.empty(X.shape[1] + 1)
    s[:-1] = X.T @ c_beta
    s[-1] = -np.sum(b["q"] * b["kappa"] * w2)
    return s


def gt_score_and_info(
    code: int,
    y: np.ndarray,
    n: np.ndarray,
    X: np.ndarray,
    beta: np.ndarray,
    nu: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Score s(eta) together with the information U(eta) = sum_i D_i' Sigma_i^-1 D_i."""
    b = area_blocks(code, y, n, X, beta, nu)
    w1 = b["a11"] * b["g1"] + b["a12"] * b["g2"]
    w2 = b["a12"] * b["g1"] + b["a22"] * b["g2"]
    c_beta = b["q"] * (w1 + b["qp"] * b["phi"] * w2)
    p = X.shape[1]
    s = np.empty(p + 1)
    s[:-1] = X.T @ c_beta
    s[-1] = -np.sum(b["q"] * b["kappa"] * w2)

    q2 = b["q"] * b["q"]
    qpphi = b["qp"] * b["phi"]
    w_xx = q2 * (b["a11"] + 2.0 * b["a12"] * qpphi + b["a22"] * qpphi * qpphi)
    w_xn = -q2 * b["kappa"] * (b["a12"] + b["a22"] * qpphi)
    w_nn = q2 * b["kappa"] ** 2 * b["a22"]

    U = np.empty((p + 1, p + 1))
    U[:p, :p] = (X * w_xx[:, None]).T @ X
    U[:p, -1] = X.T @ w_xn
    U[-1, :p] = U[:p, -1]
    U[-1, -1] = np.sum(w_nn)
    return s, U


def ml_negloglik(
    code: int,
    y: np.ndarray,
    n: np.ndarray,
    X: np.ndarray,
    beta: np.ndarray,
    nu: float,
) -> float:
    """Negative sum of log marginal densities of y (normal / NB / beta-binomial)."""
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    lp = X @ beta
    mu = link_mean(code, lp)
    lg = special.gammaln
    if code == GAUSSIAN:
        var = 1.0 / nu + 1.0 / n
        d = y - mu
        ll = -0.5 * (_LN_2PI + np.log(var)) - 0.5 * d * d / var
        return -float(np.sum(ll))
    if code == POISSON_GAMMA:
        z = np.rint(y * n)
        a = nu * mu
        ll = (
            lg(z + a)
            - lg(z + 1.0)
            - lg(a)
            + z * np.log(n / (n + nu))
            + a * np.log(nu / (n + nu))
        )
        return -float(np.sum(ll))
    z = np.rint(y * n)
    nn = np.rint(n)
    a = nu * mu
    bb = nu * link_mean(code, -lp)
    ll = (
        lg(nn + 1.0)
        - lg(z + 1.0)
        - lg(nn - z + 1.0)
        + lg(z + a)
        + lg(nn - z + bb)
        - lg(nn + nu)
        + lg(nu)
        - lg(a)
        - lg(bb)
    )
    return -float(np.sum(ll))
