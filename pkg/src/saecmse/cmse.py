"""Conditional MSE of the EB predictor: approximation and estimators.

Given the target area's own observation, the conditional MSE of the
empirical Bayes predictor decomposes to second order as T1 + T2:

    T1(y, eta) = posterior variance = Q(xi_hat)/(n + nu - v2)   [O(1)]
    T2(y, eta) = tr[P(y, eta) U(eta)^-1]                        [O(1/m)]

with P the outer product of the gradient of the Bayes estimator in eta.
The analytical second-order unbiased estimator subtracts the plug-in bias
of T1,

    CMSE_hat = T1 + T2 - r'b - tr[R U^-1]/2     (all at eta_hat)

where r and R are the eta-gradient and Hessian of T1 (closed forms below)
and b approximates the conditional bias of the estimating-equation
estimator,

    b = U^-1 (D_t' Sigma_t^-1 g_t + a1 + a2/2).

a1 and a2 collect the second-order terms of the expansion of the
estimating equations; the partial derivatives of R_i = D_i' Sigma_i^-1
they contain are evaluated by symmetric differences with step m^(-5/4).
The y-free unconditional MSE approximation and the RD diagnostic
(100*(CMSE_hat - MSE_hat)/MSE_hat) live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .families import DomainError, FamilyKind
from .model import AreaObservation, Dataset, EstimatingBlocks, Hyperparameters

__all__ = [
    "CmseBreakdown",
    "BiasConstituents",
    "t1_conditional",
    "t2_conditional",
    "eb_gradient",
    "central_difference",
    "t1_derivatives",
    "conditional_bias",
    "cmse_analytical",
    "mse_unconditional",
    "relative_difference",
]


@dataclass(eq=False)
class CmseBreakdown:
    """Per-area error report: CMSE terms, unconditional MSE and RD."""

    area_id: str
    t1: float
    t2: float
    t11: float
    t12: float
    cmse_hat: float
    mse_hat: float
    rd_percent: float
    cmse_floor: float  # max(cmse_hat, t2); companion value, never silently used
    mode: str = "analytical"  # or "bootstrap"
    flags: list[str] = field(default_factory=list)
    n_boot_success: int | None = None


@dataclass(eq=False)
class BiasConstituents:
    """Second-order bias pieces of the estimating-equation estimator.

    Z stacks the expected Hessians of (g1, g2) in q blocks of two rows:
    rows (2k, 2k+1) hold row k of E[Hess g1] and E[Hess g2].
    """

    a1: np.ndarray  # (q,)
    a2: np.ndarray  # (q,)
    b: np.ndarray  # (q,)
    Z: np.ndarray  # (2q, q), target area
    r: np.ndarray  # (q,)
    bigR: np.ndarray  # (q, q)
    lambda_shrink: float  # 1/(n + nu - v2), target area
    cond_cov: np.ndarray  # (q, q), Lemma-style conditional covariance ~ U^-1


# ------------------------------------------------------------------ #
# Leading terms
# ------------------------------------------------------------------ #


def t1_conditional(family: FamilyKind, y: float, n: float, m: float, nu: float) -> float:
    """Posterior variance Q(xi_hat)/(n + nu - v2)."""
    c = family.coefficients
    xi_hat = (n * y + nu * m) / (n + nu)
    return c.q(xi_hat) / (n + nu - c.v2)


def eb_gradient(
    family: FamilyKind, obs: AreaObservation, eta: Hyperparameters
) -> np.ndarray:
    """Gradient of the Bayes estimator in eta = (beta, nu), shape (p+1,)."""
    from .families import mean_link

    c = family.coefficients
    n, nu = obs.n, eta.nu
    m = mean_link(family, float(obs.x @ eta.beta))
    g1 = obs.y - m
    grad = np.empty(eta.q)
    grad[:-1] = (nu / (n + nu)) * c.q(m) * obs.x
    grad[-1] = -n * g1 / (n + nu) ** 2
    return grad


def t2_conditional(
    obs: AreaObservation, eta: Hyperparameters, blocks: EstimatingBlocks
) -> float:
    """Estimation-error term tr[P U^-1] = grad' U^-1 grad >= 0."""
    grad = eb_gradient(blocks.dataset.family, obs, eta)
    return float(grad @ blocks.solve_u(grad))


# ------------------------------------------------------------------ #
# Numerical derivatives (symmetric difference, step m^(-5/4))
# ------------------------------------------------------------------ #


def _z_step(m_areas: int) -> float:
    return float(m_areas) ** -1.25


def central_difference(
    func: Callable[[Hyperparameters], np.ndarray],
    eta: Hyperparameters,
    component_index: int,
    m_areas: int,
) -> np.ndarray:
    """(F(eta + z e_k) - F(eta - z e_k)) / (2z) with z = m^(-5/4)."""
    z = _z_step(m_areas)
    vec = eta.as_vector()
    up, dn = vec.copy(), vec.copy()
    up[component_index] += z
    dn[component_index] -= z
    f_up = np.asarray(func(Hyperparameters.from_vector(up)), dtype=float)
    f_dn = np.asarray(func(Hyperparameters.from_vector(dn)), dtype=float)
    return (f_up - f_dn) / (2.0 * z)


# ------------------------------------------------------------------ #
# T1 derivatives (closed forms)
# ------------------------------------------------------------------ #


def t1_derivatives(
    family: FamilyKind, obs: AreaObservation, eta: Hyperparameters
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient r and Hessian R of T1(y, eta) in eta, both closed form."""
    from .families import mean_link

    c = family.coefficients
    v2 = c.v2
    n, nu, x = obs.n, eta.nu, obs.x
    m = mean_link(family, float(obs.x @ eta.beta))
    q_m, qp_m = c.q(m), c.q_prime(m)
    xi = (n * obs.y + nu * m) / (n + nu)
    q_xi, qp_xi = c.q(xi), c.q_prime(xi)
    g1 = obs.y - m
    lam = 1.0 / (n + nu - v2)
    s = n + nu

    r = np.empty(eta.q)
    r[:-1] = (nu / s) * lam * qp_xi * q_m * x
    r[-1] = -lam * lam * q_xi - lam * n * qp_xi * g1 / s**2

    p = x.shape[0]
    big_r = np.empty((eta.q, eta.q))
    t11 = (nu / s**2) * lam * q_m * (2.0 * v2 * nu * q_m + qp_xi * qp_m * s)
    big_r[:p, :p] = t11 * np.outer(x, x)
    t12 = (
        q_m
        * lam
        / s**2
        * (qp_xi * (n - nu * s * lam) - 2.0 * v2 * n * nu * g1 / s)
    )
    big_r[:p, p] = t12 * x
    big_r[p, :p] = t12 * x
    big_r[p, p] = (
        2.0 * lam**3 * q_xi
        + 2.0 * lam**2 * n * qp_xi * g1 / s**2
        + 2.0 * lam * n * g1 * (s * qp_xi + n * v2 * g1) / s**4
    )
    return r, big_r


# ------------------------------------------------------------------ #
# Conditional bias of the estimating-equation estimator
# ------------------------------------------------------------------ #


def _r_matrices(dataset: Dataset, eta: Hyperparameters) -> np.ndarray:
    """R_i = D_i' Sigma_i^-1 for every area, shape (m, q, 2)."""
    code = dataset.family.code
    b = kernels.area_blocks(code, dataset.y, dataset.n, dataset.X, eta.beta, eta.nu)
    m, p = dataset.m, dataset.p
    Dt = np.zeros((m, p + 1, 2))
    Dt[:, :p, 0] = b["q"][:, None] * dataset.X
    Dt[:, :p, 1] = (b["q"] * b["qp"] * b["phi"])[:, None] * dataset.X
    Dt[:, p, 1] = -b["q"] * b["kappa"]
    A = np.empty((m, 2, 2))
    A[:, 0, 0] = b["a11"]
    A[:, 0, 1] = A[:, 1, 0] = b["a12"]
    A[:, 1, 1] = b["a22"]
    return np.einsum("iab,ibc->iac", Dt, A)


def _dr_matrices(dataset: Dataset, eta: Hyperparameters) -> np.ndarray:
    """Symmetric-difference derivatives dR[k, i] = dR_i/d eta_k, shape (q, m, q, 2)."""
    z = _z_step(dataset.m)
    vec = eta.as_vector()
    q = vec.size
    out = np.empty((q, dataset.m, q, 2))
    for k in range(q):
        up, dn = vec.copy(), vec.copy()
        up[k] += z
        dn[k] -= z
        r_up = _r_matrices(dataset, Hyperparameters.from_vector(up))
        r_dn = _r_matrices(dataset, Hyperparameters.from_vector(dn))
        out[k] = (r_up - r_dn) / (2.0 * z)
    return out


def _expected_g_hessians(
    dataset: Dataset, eta: Hyperparameters
) -> tuple[np.ndarray, np.ndarray]:
    """E[Hess g1], E[Hess g2] w.r.t. eta for every area, each (m, q, q).

    With mu the linked prior mean, Q = Q(mu), Q' = Q'(mu):
      Hess g1:  beta-beta block -Q'Q x x',  nu entries zero (exact).
      E Hess g2: beta-beta {2Q - phi(2 v2 Q + Q'^2)} Q x x',
                 beta-nu   (1 + v2/n)(nu - v2)^-2 Q'Q x,
                 nu-nu     -2 Q (1 + v2/n)(nu - v2)^-3.
    """
    code = dataset.family.code
    v2 = dataset.family.coefficients.v2
    b = kernels.area_blocks(code, dataset.y, dataset.n, dataset.X, eta.beta, eta.nu)
    m, p = dataset.m, dataset.p
    X, n, nu = dataset.X, dataset.n, eta.nu
    q_m, qp, phi, kappa = b["q"], b["qp"], b["phi"], b["kappa"]

    xxt = np.einsum("ia,ib->iab", X, X)
    eh1 = np.zeros((m, p + 1, p + 1))
    eh1[:, :p, :p] = -(qp * q_m)[:, None, None] * xxt

    eh2 = np.zeros((m, p + 1, p + 1))
    w_bb = (2.0 * q_m - phi * (2.0 * v2 * q_m + qp * qp)) * q_m
    eh2[:, :p, :p] = w_bb[:, None, None] * xxt
    w_bn = kappa * qp * q_m
    eh2[:, :p, p] = w_bn[:, None] * X
    eh2[:, p, :p] = w_bn[:, None] * X
    eh2[:, p, p] = -2.0 * q_m * (1.0 + v2 / n) / (nu - v2) ** 3
    return eh1, eh2


def _bias_terms(blocks: EstimatingBlocks) -> tuple[np.ndarray, np.ndarray]:
    """(a1, a2) for the dataset at blocks.eta; cached on the blocks object."""
    if "bias_terms" in blocks._cache:
        return blocks._cache["bias_terms"]
    dataset, eta = blocks.dataset, blocks.eta
    p = dataset.p
    u_inv = blocks.u_inv
    r_all = _r_matrices(dataset, eta)  # (m, q, 2)
    dr = _dr_matrices(dataset, eta)  # (q, m, q, 2)
    d_all = blocks.D  # (m, 2, q)

    # a1, first piece: sum_i sum_k (dR_i/d eta_k) (D_i U^-1)[:, k]
    du = np.einsum("iaj,jk->iak", d_all, u_inv)  # (m, 2, q)
    a1 = np.einsum("kiab,ibk->a", dr, du)
    # a1, second piece: -2 sum_i Q_i (x_i . w_beta) R_i[:, 1],
    # with w = U^-1 R_i (mu2, mu3)'.
    q_arr = kernels.area_blocks(
        dataset.family.code, dataset.y, dataset.n, dataset.X, eta.beta, eta.nu
    )["q"]
    mu_vec = np.stack([blocks.mu2, blocks.mu3], axis=1)  # (m, 2)
    w = np.einsum("jk,ikb,ib->ij", u_inv, r_all, mu_vec)  # (m, q)
    scal = np.einsum("ia,ia->i", dataset.X, w[:, :p])
    a1 = a1 - 2.0 * np.einsum("i,i,ij->j", q_arr, scal, r_all[:, :, 1])

    # a2_l = tr(E[H_l] U^-1) with
    # E[H_l] = sum_i { -(dR_il D_i + transpose) + R_i[l,0] EH1_i + R_i[l,1] EH2_i }
    eh1, eh2 = _expected_g_hessians(dataset, eta)
    A1 = np.einsum("kila,iaj->lkj", dr, d_all)  # (q, q, q)
    B = np.einsum("il,ikj->lkj", r_all[:, :, 0], eh1) + np.einsum(
        "il,ikj->lkj", r_all[:, :, 1], eh2
    )
    M = -(A1 + np.swapaxes(A1, 1, 2)) + B
    a2 = np.einsum("lkj,kj->l", M, u_inv)

    blocks._cache["bias_terms"] = (a1, a2)
    return a1, a2


def _area_index(dataset: Dataset, area: int | AreaObservation) -> int:
    if isinstance(area, (int, np.integer)):
        return int(area)
    for i, obs in enumerate(dataset.areas):
        if obs is area:
            return i
    for i, obs in enumerate(dataset.areas):
        if obs.area_id == area.area_id:
            return i
    raise ValueError(f"area {area.area_id!r} is not part of the dataset")


def conditional_bias(
    area: int | AreaObservation,
    eta: Hyperparameters,
    blocks: EstimatingBlocks,
) -> BiasConstituents:
    """Bias pieces (a1, a2) and the target-conditional b = U^-1(R_t g_t + a1 + a2/2)."""
    dataset = blocks.dataset
    idx = _area_index(dataset, area)
    obs = dataset.areas[idx]
    family = dataset.family
    a1, a2 = _bias_terms(blocks)
    r_t = _r_matrices(dataset, eta)[idx]  # (q, 2)
    b = blocks.solve_u(r_t @ blocks.g[idx] + a1 + 0.5 * a2)
    eh1, eh2 = _expected_g_hessians(dataset, eta)
    q = eta.q
    Z = np.empty((2 * q, q))
    Z[0::2] = eh1[idx]
    Z[1::2] = eh2[idx]
    r, big_r = t1_derivatives(family, obs, eta)
    lam = 1.0 / (obs.n + eta.nu - family.coefficients.v2)
    return BiasConstituents(
        a1=a1,
        a2=a2,
        b=b,
        Z=Z,
        r=r,
        bigR=big_r,
        lambda_shrink=lam,
        cond_cov=blocks.u_inv.copy(),
    )


# ------------------------------------------------------------------ #
# Estimators
# ------------------------------------------------------------------ #


def mse_unconditional(
    area: int | AreaObservation, eta: Hyperparameters, blocks: EstimatingBlocks
) -> float:
    """y-free unconditional MSE approximation T1(eta) + T2(eta) at eta."""
    from .families import mean_link

    dataset = blocks.dataset
    obs = dataset.areas[_area_index(dataset, area)]
    c = dataset.family.coefficients
    n, nu = obs.n, eta.nu
    m = mean_link(dataset.family, float(obs.x @ eta.beta))
    q_m = c.q(m)
    s = n + nu
    t1_bar = nu * q_m / (s * (nu - c.v2))
    u_inv = blocks.u_inv
    p = dataset.p
    t2_bar = (
        nu**2 * q_m**2 * float(obs.x @ u_inv[:p, :p] @ obs.x)
        + n / s * q_m / (nu - c.v2) * u_inv[p, p]
    ) / s**2
    return t1_bar + t2_bar


def relative_difference(cmse_hat: float, mse_hat: float) -> float:
    """Percentage relative difference 100*(CMSE_hat - MSE_hat)/MSE_hat."""
    if not mse_hat > 0:
        raise DomainError(f"mse_hat must be > 0, got {mse_hat}")
    return 100.0 * (cmse_hat - mse_hat) / mse_hat


def cmse_analytical(
    area: int | AreaObservation,
    eta_hat: Hyperparameters,
    blocks: EstimatingBlocks,
) -> CmseBreakdown:
    """Second-order unbiased CMSE estimator for the GT fit, all terms at eta_hat."""
    dataset = blocks.dataset
    idx = _area_index(dataset, area)
    obs = dataset.areas[idx]
    family = dataset.family
    from .families import mean_link

    m_hat = mean_link(family, float(obs.x @ eta_hat.beta))
    t1 = t1_conditional(family, obs.y, obs.n, m_hat, eta_hat.nu)
    t2 = t2_conditional(obs, eta_hat, blocks)
    bias = conditional_bias(idx, eta_hat, blocks)
    t11 = float(bias.r @ bias.b)
    t12 = 0.5 * float(np.sum(bias.bigR * blocks.u_inv))
    cmse = t1 + t2 - t11 - t12
    flags: list[str] = []
    if cmse < 0:
        flags.append("negative cmse_hat; see cmse_floor companion")
    mse = mse_unconditional(idx, eta_hat, blocks)
    return CmseBreakdown(
        area_id=obs.area_id,
        t1=t1,
        t2=t2,
        t11=t11,
        t12=t12,
        cmse_hat=cmse,
        mse_hat=mse,
        rd_percent=relative_difference(cmse, mse),
        cmse_floor=max(cmse, t2),
        mode="analytical",
        flags=flags,
    )
