"""NEF-QVF mixture families: Gaussian, Poisson-gamma and binomial-beta.

Each family is a conjugate pair

    y_i | theta_i  ~  exp[n_i(theta_i y_i - psi(theta_i)) + c(y_i, n_i)]
    theta_i        ~  exp[nu(m_i theta_i - psi(theta_i))] C(nu, m_i)

whose conditional variance is a quadratic in the conditional mean,
Var(y|theta) = Q(xi)/n with Q(x) = v0 + v1 x + v2 x^2 and xi = psi'(theta).
The three members used here are

    gaussian        (v0,v1,v2) = (1, 0, 0)    identity link
    poisson-gamma   (v0,v1,v2) = (0, 1, 0)    exponential link
    binomial-beta   (v0,v1,v2) = (0, 1, -1)   logistic link

Conjugacy gives a closed posterior in every case: the posterior mean is the
shrinkage estimator (n*y + nu*m)/(n + nu) and the posterior variance is
Q(posterior mean)/(n + nu - v2).  Marginal densities are the normal,
negative-binomial and beta-binomial laws, evaluated through log-gamma calls.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

__all__ = [
    "FamilyKind",
    "QvfCoefficients",
    "PosteriorParams",
    "DomainError",
    "qvf_eval",
    "mean_link",
    "log_marginal_density",
    "sample_area",
    "sample_dataset",
    "posterior_params",
]

# Lattice tolerance: n*y must be this close to an integer for discrete families.
LATTICE_TOL = 1e-9

_LN_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    """An argument lies outside the family's domain."""


@dataclass(frozen=True)
class QvfCoefficients:
    """Coefficients of the quadratic variance function Q(x) = v0 + v1 x + v2 x^2."""

    v0: float
    v1: float
    v2: float

    def __post_init__(self) -> None:
        if self.v0 == self.v1 == self.v2 == 0.0:
            raise ValueError("QVF coefficients must not all be zero")

    def q(self, x: float) -> float:
        return self.v0 + self.v1 * x + self.v2 * x * x

    def q_prime(self, x: float) -> float:
        return self.v1 + 2.0 * self.v2 * x


class FamilyKind(enum.Enum):
    """The closed set of supported mixture families.

    The tag selects coefficients, link, sampler and marginal density jointly;
    there is no way to combine, say, the logistic link with the Poisson kernel.
    """

    GAUSSIAN = "gaussian"
    POISSON_GAMMA = "poisson-gamma"
    BINOMIAL_BETA = "binomial-beta"

    @property
    def coefficients(self) -> QvfCoefficients:
        return _COEFFS[self]

    @property
    def code(self) -> int:
        """Integer code used by the numeric kernels (0, 1, 2)."""
        return _CODES[self]

    @property
    def discrete(self) -> bool:
        return self is not FamilyKind.GAUSSIAN

    @classmethod
    def from_tag(cls, tag: str) -> "FamilyKind":
        try:
            return cls(tag)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown family {tag!r}; expected one of: {valid}") from None


_COEFFS = {
    FamilyKind.GAUSSIAN: QvfCoefficients(1.0, 0.0, 0.0),
    FamilyKind.POISSON_GAMMA: QvfCoefficients(0.0, 1.0, 0.0),
    FamilyKind.BINOMIAL_BETA: QvfCoefficients(0.0, 1.0, -1.0),
}

_CODES = {
    FamilyKind.GAUSSIAN: 0,
    FamilyKind.POISSON_GAMMA: 1,
    FamilyKind.BINOMIAL_BETA: 2,
}


@dataclass(frozen=True)
class PosteriorParams:
    """Natural parameter pair of the (conjugate) posterior of xi given y.

    gaussian:       (mean, variance) of the normal posterior
    poisson-gamma:  (shape, scale)   of the gamma posterior
    binomial-beta:  (alpha, beta)    of the beta posterior
    """

    family: FamilyKind
    params: tuple[float, float]

    @property
    def mean(self) -> float:
        a, b = self.params
        if self.family is FamilyKind.GAUSSIAN:
            return a
        if self.family is FamilyKind.POISSON_GAMMA:
            return a * b
        return a / (a + b)

    @property
    def variance(self) -> float:
        a, b = self.params
        if self.family is FamilyKind.GAUSSIAN:
            return b
        if self.family is FamilyKind.POISSON_GAMMA:
            return a * b * b
        s = a + b
        return a * b / (s * s * (s + 1.0))


# ------------------------------------------------------------------ #
# Links and the variance function
# ------------------------------------------------------------------ #


def qvf_eval(family: FamilyKind, x: float) -> tuple[float, float]:
    """Evaluate (Q(x), Q'(x)) for the family's variance function."""
    c = family.coefficients
    return c.q(x), c.q_prime(x)


def mean_link(family: FamilyKind, linear_predictor: float) -> float:
    """Map the linear predictor to the prior mean m = psi'(x'beta).

    Identity for gaussian, exp for poisson-gamma and a branch-split logistic
    for binomial-beta (stable for large |linear_predictor|).
    """
    lp = float(linear_predictor)
    if family is FamilyKind.GAUSSIAN:
        return lp
    if family is FamilyKind.POISSON_GAMMA:
        return math.exp(lp)
    if lp >= 0.0:
        return 1.0 / (1.0 + math.exp(-lp))
    e = math.exp(lp)
    return e / (1.0 + e)


def _check_lattice(family: FamilyKind, y: float, n: float) -> float:
    """Validate and return the lattice count z = n*y for discrete families."""
    z = y * n
    zr = round(z)
    if abs(z - zr) > LATTICE_TOL:
        raise DomainError(
            f"{family.value}: y*n = {z!r} is not an integer within {LATTICE_TOL:g}"
        )
    if zr < 0:
        raise DomainError(f"{family.value}: y*n must be nonnegative, got {zr}")
    if family is FamilyKind.BINOMIAL_BETA and zr > round(n) + LATTICE_TOL:
        raise DomainError(f"binomial-beta: y*n = {zr} exceeds n = {n}")
    return float(zr)


# ------------------------------------------------------------------ #
# Marginal density
# ------------------------------------------------------------------ #


def log_marginal_density(family: FamilyKind, y: float, n: float, m: float, nu: float) -> float:
    """Log marginal pmf/density of the direct estimate y under (n, m, nu).

    For the discrete families this is the probability mass at z = n*y
    (negative binomial / beta-binomial); for gaussian the normal density
    with variance 1/nu + 1/n.  All factorial-type terms go through
    log-gamma; no raw factorials are formed.
    """
    if n <= 0.0 or nu <= 0.0:
        raise DomainError(f"need n > 0 and nu > 0, got n={n}, nu={nu}")
    lg = special.gammaln
    if family is FamilyKind.GAUSSIAN:
        var = 1.0 / nu + 1.0 / n
        d = y - m
        return -0.5 * (_LN_2PI + math.log(var)) - 0.5 * d * d / var
    if family is FamilyKind.POISSON_GAMMA:
        z = _check_lattice(family, y, n)
        a = nu * m
        return (
            lg(z + a)
            - lg(z + 1.0)
            - lg(a)
            + z * math.log(n / (n + nu))
            + a * math.log(nu / (n + nu))
        )
    # binomial-beta
    z = _check_lattice(family, y, n)
    nn = round(n)
    a = nu * m
    b = nu * (1.0 - m)
    return (
        lg(nn + 1.0)
        - lg(z + 1.0)
        - lg(nn - z + 1.0)
        + lg(z + a)
        + lg(nn - z + b)
        - lg(nn + nu)
        + lg(nu)
        - lg(a)
        - lg(b)
    )


# ------------------------------------------------------------------ #
# Sampling
# ------------------------------------------------------------------ #


def sample_dataset(
    family: FamilyKind,
    n: np.ndarray,
    prior_mean: np.ndarray,
    nu: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (xi_i, y_i) for a vector of areas from the two-stage model.

    Latent means are drawn from the conjugate prior and observations from
    the conditional kernel; y is returned on the rate scale (z/n for the
    discrete families).
    """
    n = np.asarray(n, dtype=float)
    prior_mean = np.asarray(prior_mean, dtype=float)
    if family is FamilyKind.GAUSSIAN:
        xi = prior_mean + rng.normal(0.0, math.sqrt(1.0 / nu), size=n.shape)
        y = xi + rng.normal(0.0, 1.0, size=n.shape) / np.sqrt(n)
        return xi, y
    if family is FamilyKind.POISSON_GAMMA:
        lam = rng.gamma(shape=nu * prior_mean, scale=1.0 / nu)
        z = rng.poisson(n * lam)
        return lam, z / n
    n_int = np.rint(n).astype(np.int64)
    p = rng.beta(nu * prior_mean, nu * (1.0 - prior_mean))
    z = rng.binomial(n_int, p)
    return p, z / n


def sample_area(
    family: FamilyKind, n: float, m: float, nu: float, rng: np.random.Generator
) -> tuple[float, float]:
    """Draw a single (xi, y) pair; see :func:`sample_dataset`."""
    xi, y = sample_dataset(family, np.array([n]), np.array([m]), nu, rng)
    return float(xi[0]), float(y[0])


# ------------------------------------------------------------------ #
# Posterior
# ------------------------------------------------------------------ #


def posterior_params(
    family: FamilyKind, y: float, n: float, m: float, nu: float
) -> PosteriorParams:
    """Parameters of the posterior of xi given y.

    The posterior mean is always (n*y + nu*m)/(n + nu) and the posterior
    variance Q(posterior mean)/(n + nu - v2).
    """
    if n <= 0.0 or nu <= 0.0:
        raise DomainError(f"need n > 0 and nu > 0, got n={n}, nu={nu}")
    xi_hat = (n * y + nu * m) / (n + nu)
    if family is FamilyKind.GAUSSIAN:
        return PosteriorParams(family, (xi_hat, 1.0 / (n + nu)))
    if family is FamilyKind.POISSON_GAMMA:
        return PosteriorParams(family, ((n + nu) * xi_hat, 1.0 / (n + nu)))
    # Compute 1 - xi_hat from the complements directly so the beta parameter
    # stays accurate when y and m are both close to 1.
    xi_hat_c = (n * (1.0 - y) + nu * (1.0 - m)) / (n + nu)
    return PosteriorParams(family, ((n + nu) * xi_hat, (n + nu) * xi_hat_c))


def marginal_pmf_lattice(
    family: FamilyKind, n: float, m: float, nu: float, tail: float = 1e-13
) -> tuple[np.ndarray, np.ndarray]:
    """Lattice points y = z/n and marginal pmf values for a discrete family.

    For binomial-beta the lattice is z = 0..n.  For poisson-gamma the
    (infinite) negative-binomial lattice is truncated where the upper tail
    mass drops below ``tail``.
    """
    if family is FamilyKind.GAUSSIAN:
        raise DomainError("gaussian marginal has no lattice")
    if family is FamilyKind.BINOMIAL_BETA:
        z_max = int(round(n))
    else:
        r, p = nu * m, nu / (n + nu)
        z_max = int(stats.nbinom.ppf(1.0 - tail, r, p)) + 1
    z = np.arange(z_max + 1, dtype=float)
    y = z / n
    logp = np.array([log_marginal_density(family, yi, n, m, nu) for yi in y])
    return y, np.exp(logp)
