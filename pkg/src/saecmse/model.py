"""Area-level data model, exact marginal moments and estimating blocks.

An observation is a triple (y_i, n_i, x_i): direct estimate on the rate
scale, size parameter (sample size, exposure, or 1/D_i in the gaussian
case) and covariate vector.  The hyperparameters eta = (beta, nu) combine
the regression coefficients of the linked prior mean with the precision-like
scalar of the conjugate prior.

The estimating blocks are the ingredients of the optimal estimating
equations: per area the residual pair g_i, the derivative matrix D_i and
the covariance Sigma_i of g_i built from the exact central moments
mu_2i..mu_4i, and in aggregate the score s_m = sum D_i' Sigma_i^-1 g_i and
information U = sum D_i' Sigma_i^-1 D_i.  Aggregation always runs in
area_id order so that results are invariant to permutations of the input
rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from . import kernels
from .families import DomainError, FamilyKind, mean_link

__all__ = [
    "AreaObservation",
    "Dataset",
    "Hyperparameters",
    "EstimatingBlocks",
    "SingularMatrixError",
    "residual_pair",
    "central_moments",
    "estimating_blocks",
    "information_matrix",
]


class SingularMatrixError(ArithmeticError):
    """Sigma_i is not positive definite, or U fails its Cholesky factorisation."""


@dataclass(frozen=True, eq=False)
class AreaObservation:
    """One small area: direct estimate y, size parameter n and covariates x."""

    area_id: str
    y: float
    n: float
    x: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        if not self.n > 0:
            raise DomainError(f"area {self.area_id!r}: n must be > 0, got {self.n}")
        if not np.isfinite(self.y):
            raise DomainError(f"area {self.area_id!r}: y is not finite")


def _validate_family_domain(obs: AreaObservation, family: FamilyKind) -> None:
    if family is FamilyKind.GAUSSIAN:
        return
    z = obs.y * obs.n
    if abs(z - round(z)) > 1e-9 or round(z) < 0:
        raise DomainError(
            f"area {obs.area_id!r}: y*n = {z!r} must be a nonnegative integer "
            f"for family {family.value}"
        )
    if family is FamilyKind.BINOMIAL_BETA:
        if abs(obs.n - round(obs.n)) > 1e-9:
            raise DomainError(
                f"area {obs.area_id!r}: n must be an integer for binomial-beta"
            )
        if not 0.0 <= obs.y <= 1.0:
            raise DomainError(
                f"area {obs.area_id!r}: y must lie in [0, 1] for binomial-beta"
            )


@dataclass(eq=False)
class Dataset:
    """m areas sharing one family and one covariate layout."""

    areas: list[AreaObservation]
    family: FamilyKind

    def __post_init__(self) -> None:
        if not self.areas:
            raise ValueError("dataset must contain at least one area")
        p = self.areas[0].x.shape[0]
        for obs in self.areas:
            if obs.x.shape[0] != p:
                raise ValueError(
                    f"area {obs.area_id!r}: covariate length {obs.x.shape[0]} != {p}"
                )
            _validate_family_domain(obs, self.family)
        if len(self.areas) < p + 2:
            raise ValueError(
                f"need at least p+2 = {p + 2} areas to identify (beta, nu), "
                f"got {len(self.areas)}"
            )
        if np.linalg.matrix_rank(self.X) < p:
            raise ValueError("design matrix does not have full column rank")

    @property
    def m(self) -> int:
        return len(self.areas)

    @property
    def p(self) -> int:
        return self.areas[0].x.shape[0]

    @cached_property
    def y(self) -> np.ndarray:
        return np.array([a.y for a in self.areas])

    @cached_property
    def n(self) -> np.ndarray:
        return np.array([a.n for a in self.areas])

    @cached_property
    def X(self) -> np.ndarray:
        return np.array([a.x for a in self.areas])

    @cached_property
    def order(self) -> np.ndarray:
        """Stable permutation sorting areas by area_id (fixed reduction order)."""
        ids = [a.area_id for a in self.areas]
        return np.argsort(ids, kind="stable")

    def with_y(self, y_new: np.ndarray) -> "Dataset":
        """Same design, new direct estimates (used by the bootstrap)."""
        areas = [
            AreaObservation(a.area_id, float(yv), a.n, a.x)
            for a, yv in zip(self.areas, y_new)
        ]
        return Dataset(areas, self.family)


@dataclass(frozen=True, eq=False)
class Hyperparameters:
    """eta = (beta, nu): regression coefficients and prior precision-like scalar."""

    beta: np.ndarray
    nu: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float))
        )
        if not self.nu > 0:
            raise DomainError(f"nu must be > 0, got {self.nu}")

    @property
    def q(self) -> int:
        return self.beta.shape[0] + 1

    def as_vector(self) -> np.ndarray:
        return np.append(self.beta, self.nu)

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Hyperparameters":
        v = np.asarray(v, dtype=float)
        return cls(v[:-1].copy(), float(v[-1]))


def _check_moment_existence(family: FamilyKind, nu: float) -> None:
    v2 = family.coefficients.v2
    if nu <= 3.0 * v2:
        raise DomainError(
            f"moment does not exist: need nu > 3*v2 = {3.0 * v2}, got nu = {nu}"
        )


# ------------------------------------------------------------------ #
# Per-area quantities
# ------------------------------------------------------------------ #


def residual_pair(
    family: FamilyKind, obs: AreaObservation, eta: Hyperparameters
) -> tuple[float, float, float]:
    """(g1, g2, phi) for one area: g1 = y - m, g2 = g1^2 - phi*Q(m)."""
    c = family.coefficients
    m = mean_link(family, float(obs.x @ eta.beta))
    phi = (1.0 + eta.nu / obs.n) / (eta.nu - c.v2)
    g1 = obs.y - m
    g2 = g1 * g1 - phi * c.q(m)
    return g1, g2, phi


def central_moments(
    family: FamilyKind, obs: AreaObservation, eta: Hyperparameters
) -> tuple[float, float, float]:
    """Exact model moments (mu2, mu3, mu4) of y - m for one area."""
    _check_moment_existence(family, eta.nu)
    b = kernels.area_blocks(
        family.code,
        np.array([obs.y]),
        np.array([obs.n]),
        obs.x[None, :],
        eta.beta,
        eta.nu,
    )
    return float(b["mu2"][0]), float(b["mu3"][0]), float(b["mu4"][0])


# ------------------------------------------------------------------ #
# Blocks and aggregates
# ------------------------------------------------------------------ #


@dataclass(eq=False)
class EstimatingBlocks:
    """Per-area estimating blocks plus the aggregated score and information.

    Per-area arrays are in dataset (input) order; s_m and U are reduced in
    area_id order.  The U factorisation is computed once and shared by all
    downstream solves.
    """

    dataset: Dataset
    eta: Hyperparameters
    g: np.ndarray  # (m, 2)
    D: np.ndarray  # (m, 2, p+1)
    Sigma: np.ndarray  # (m, 2, 2)
    det_sigma: np.ndarray  # (m,)
    phi: np.ndarray  # (m,)
    prior_mean: np.ndarray  # (m,)
    mu2: np.ndarray
    mu3: np.ndarray
    mu4: np.ndarray
    s_m: np.ndarray  # (p+1,)
    U: np.ndarray  # (p+1, p+1)
    _u_cho: tuple = field(repr=False, default=None)
    _cache: dict = field(repr=False, default_factory=dict)

    def solve_u(self, b: np.ndarray) -> np.ndarray:
        """U^-1 b through the shared Cholesky factor."""
        return linalg.cho_solve(self._u_cho, b)

    @property
    def u_inv(self) -> np.ndarray:
        if "u_inv" not in self._cache:
            self._cache["u_inv"] = self.solve_u(np.eye(self.U.shape[0]))
        return self._cache["u_inv"]


def estimating_blocks(dataset: Dataset, eta: Hyperparameters) -> EstimatingBlocks:
    """Build all blocks at eta; raises SingularMatrixError on degenerate Sigma or U."""
    _check_moment_existence(dataset.family, eta.nu)
    code = dataset.family.code
    y, n, X = dataset.y, dataset.n, dataset.X
    m, p = dataset.m, dataset.p
    b = kernels.area_blocks(code, y, n, X, eta.beta, eta.nu)

    bad = ~(b["det_sigma"] > 0) | ~np.isfinite(b["det_sigma"])
    if bad.any():
        i = int(np.argmax(bad))
        raise SingularMatrixError(
            f"singular Sigma for area {dataset.areas[i].area_id!r} "
            f"(det = {b['det_sigma'][i]!r})"
        )

    g = np.stack([b["g1"], b["g2"]], axis=1)
    Sigma = np.empty((m, 2, 2))
    Sigma[:, 0, 0] = b["mu2"]
    Sigma[:, 0, 1] = Sigma[:, 1, 0] = b["mu3"]
    Sigma[:, 1, 1] = b["mu4"] - b["mu2"] ** 2
    D = np.zeros((m, 2, p + 1))
    D[:, 0, :p] = b["q"][:, None] * X
    D[:, 1, :p] = (b["q"] * b["qp"] * b["phi"])[:, None] * X
    D[:, 1, p] = -b["q"] * b["kappa"]

    order = dataset.order
    s, U = kernels.gt_score_and_info(
        code, y[order], n[order], X[order], eta.beta, eta.nu
    )
    try:
        u_cho = linalg.cho_factor(U)
    except linalg.LinAlgError as exc:
        raise SingularMatrixError(f"singular U: {exc}") from exc

    return EstimatingBlocks(
        dataset=dataset,
        eta=eta,
        g=g,
        D=D,
        Sigma=Sigma,
        det_sigma=b["det_sigma"].copy(),
        phi=b["phi"].copy(),
        prior_mean=b["mu"].copy(),
        mu2=b["mu2"].copy(),
        mu3=b["mu3"].copy(),
        mu4=b["mu4"].copy(),
        s_m=s,
        U=U,
        _u_cho=u_cho,
    )


def information_matrix(
    family: FamilyKind, n: np.ndarray, X: np.ndarray, eta: Hyperparameters
) -> np.ndarray:
    """U(eta) for a design only; U does not depend on the observed y."""
    n = np.asarray(n, dtype=float)
    X = np.asarray(X, dtype=float)
    mu = kernels.link_mean(family.code, X @ eta.beta)
    _, U = kernels.gt_score_and_info(family.code, mu, n, X, eta.beta, eta.nu)
    return U
