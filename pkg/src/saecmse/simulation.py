"""Simulation harness: quantile conditioning, true CMSE, RB/CV and ratio curves.

The numerical study fixes the target area's direct estimate at a marginal
quantile y_(alpha), regenerates every other area from the model, and

  * approximates the true CMSE by T1(y_(alpha), eta) plus the Monte-Carlo
    average of {xi_hat(y_(alpha), eta_hat) - xi_hat(y_(alpha), eta)}^2
    over R replications;
  * evaluates the CMSE estimators on T fresh replications through their
    relative bias RB and coefficient of variation CV against that truth
    (analytical estimator for GT fits, parametric bootstrap for ML);
  * emits Ratio curves: T1(y)/E[T1] (order 1) and the second-order analog
    {T1+T2}/E[T1+T2] (order 2), the denominators by exact lattice
    summation plus the closed-form unconditional T2.

Default replication sizes are desk scale (R=2000, T=200, B=500); the
paper-scale protocol (R=10000, T=2000) is available via ``paper_scale``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import fitting
from .bootstrap import bootstrap_arrays
from .cmse import cmse_analytical, t1_conditional
from .families import DomainError, FamilyKind, log_marginal_density, mean_link, sample_dataset
from .model import AreaObservation, Dataset, Hyperparameters, SingularMatrixError, estimating_blocks, information_matrix
from .prediction import bayes_estimate
from .util import TAG_EVAL, TAG_TRUE_CMSE, rng_stream

__all__ = [
    "SimConfig",
    "SimRow",
    "SimReport",
    "TrueCmse",
    "RatioParams",
    "marginal_quantile",
    "true_cmse_mc",
    "rb_cv",
    "ratio_curves",
    "simulate_table",
]

_EST_TAG = {"gt": 1, "ml": 2}


@dataclass(frozen=True)
class SimConfig:
    """Study configuration; defaults are the desk-scale replication sizes
    at the reference model setting (m=25, n=10, nu=15, x'beta=0)."""

    family: FamilyKind
    m: int = 25
    n: float = 10.0
    nu_true: float = 15.0
    linear_predictor: float = 0.0
    alphas: tuple[float, ...] = (0.05, 0.25, 0.50, 0.75, 0.95)
    r_true: int = 2000
    t_eval: int = 200
    b_boot: int = 500
    seed: int = 20250801
    threads: int = 1

    def paper_scale(self) -> "SimConfig":
        return replace(self, r_true=10000, t_eval=2000)


@dataclass(frozen=True)
class TrueCmse:
    value: float
    mc_se: float
    n_fail: int


@dataclass(frozen=True)
class SimRow:
    alpha: float
    y_quantile: float
    cmse_true: float  # GT-estimator truth (the reported column)
    cmse_true_se: float
    cmse_true_ml: float  # ML-estimator truth, used for rb_ml internally
    rb_gt: float
    cv_gt: float
    rb_ml: float
    cv_ml: float


@dataclass(frozen=True)
class SimReport:
    config: SimConfig
    rows: list[SimRow] = field(default_factory=list)


# ------------------------------------------------------------------ #
# Marginal quantiles
# ------------------------------------------------------------------ #


def marginal_quantile(
    family: FamilyKind, n: float, m: float, nu: float, alpha: float
) -> float:
    """alpha-quantile of the marginal of y.

    Discrete families: the smallest lattice point y = z/n whose cumulative
    marginal mass reaches alpha.  Gaussian: the exact normal quantile.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must be in (0, 1), got {alpha}")
    if family is FamilyKind.GAUSSIAN:
        return float(stats.norm.ppf(alpha, loc=m, scale=math.sqrt(1.0 / nu + 1.0 / n)))
    z_cap = int(round(n)) if family is FamilyKind.BINOMIAL_BETA else 10_000_000
    cum, z = 0.0, 0
    while True:
        cum += math.exp(log_marginal_density(family, z / n, n, m, nu))
        if cum >= alpha or z >= z_cap:
            return z / n
        z += 1


# ------------------------------------------------------------------ #
# Shared per-replication machinery
# ------------------------------------------------------------------ #


def _study_arrays(config: SimConfig):
    n_vec = np.full(config.m, float(config.n))
    X = np.ones((config.m, 1))
    theta_true = np.array([config.linear_predictor, math.log(config.nu_true)])
    m_link = mean_link(config.family, config.linear_predictor)
    return n_vec, X, theta_true, m_link


def _alpha_key(alpha: float) -> int:
    return int(round(alpha * 1_000_000))


def _make_dataset(family: FamilyKind, y, n, X) -> Dataset:
    width = len(str(len(y)))
    areas = [
        AreaObservation(f"a{i:0{width}d}", float(yi), float(ni), xi)
        for i, (yi, ni, xi) in enumerate(zip(y, n, X))
    ]
    return Dataset(areas, family)


def _true_cmse_chunk(args):
    config, alpha, estimator, lo, hi = args
    family = config.family
    n_vec, X, theta_true, m_link = _study_arrays(config)
    y_q = marginal_quantile(family, config.n, m_link, config.nu_true, alpha)
    xi_true = bayes_estimate(y_q, config.n, m_link, config.nu_true)
    akey = _alpha_key(alpha)
    sq = np.full(hi - lo, np.nan)
    for j, r in enumerate(range(lo, hi)):
        rng = rng_stream(config.seed, TAG_TRUE_CMSE, _EST_TAG[estimator], akey, r)
        _, y_rest = sample_dataset(
            family, n_vec[1:], np.full(config.m - 1, m_link), config.nu_true, rng
        )
        y_vec = np.concatenate(([y_q], y_rest))
        raw = fitting.fit_arrays(
            family.code, y_vec, n_vec, X, estimator, theta_true, warm_only=True
        )
        if not raw["converged"]:
            continue
        m_hat = mean_link(family, float(raw["beta"][0]))
        sq[j] = (bayes_estimate(y_q, config.n, m_hat, raw["nu"]) - xi_true) ** 2
    return sq


def _parallel_chunks(worker, config: SimConfig, total: int, args):
    if config.threads <= 1:
        return worker((*args, 0, total))
    bounds = np.linspace(0, total, config.threads + 1, dtype=int)
    jobs = [
        (*args, int(lo), int(hi))
        for lo, hi in zip(bounds[:-1], bounds[1:])
        if hi > lo
    ]
    out = np.empty(total)
    with ProcessPoolExecutor(max_workers=config.threads) as pool:
        for (lo, hi), part in zip(
            [(j[-2], j[-1]) for j in jobs], pool.map(worker, jobs)
        ):
            out[lo:hi] = part
    return out


def true_cmse_mc(config: SimConfig, alpha: float, estimator: str) -> TrueCmse:
    """MC approximation of the true CMSE at the alpha-quantile conditioning value."""
    family = config.family
    _, _, _, m_link = _study_arrays(config)
    y_q = marginal_quantile(family, config.n, m_link, config.nu_true, alpha)
    t1_true = t1_conditional(family, y_q, config.n, m_link, config.nu_true)
    sq = _parallel_chunks(_true_cmse_chunk, config, config.r_true, (config, alpha, estimator))
    ok = np.isfinite(sq)
    k = int(ok.sum())
    if k == 0:
        raise RuntimeError("all true-CMSE replications failed to converge")
    mean_sq = float(np.sum(sq[ok])) / k
    se = float(np.std(sq[ok], ddof=1)) / math.sqrt(k) if k > 1 else math.inf
    return TrueCmse(t1_true + mean_sq, se, config.r_true - k)


def _estimate_chunk(args):
    config, alpha, estimator, lo, hi = args
    family = config.family
    n_vec, X, theta_true, m_link = _study_arrays(config)
    y_q = marginal_quantile(family, config.n, m_link, config.nu_true, alpha)
    akey = _alpha_key(alpha)
    est = np.full(hi - lo, np.nan)
    for j, t in enumerate(range(lo, hi)):
        rng = rng_stream(config.seed, TAG_EVAL, _EST_TAG[estimator], akey, t)
        _, y_rest = sample_dataset(
            family, n_vec[1:], np.full(config.m - 1, m_link), config.nu_true, rng
        )
        y_vec = np.concatenate(([y_q], y_rest))
        raw = fitting.fit_arrays(
            family.code, y_vec, n_vec, X, estimator, theta_true, warm_only=True
        )
        if not raw["converged"]:
            continue
        try:
            if estimator == "gt":
                dataset = _make_dataset(family, y_vec, n_vec, X)
                eta = Hyperparameters(raw["beta"], raw["nu"])
                blocks = estimating_blocks(dataset, eta)
                est[j] = cmse_analytical(0, eta, blocks).cmse_hat
            else:
                boot_seed = int(rng.integers(0, 2**62))
                t1s, sq_diff, ok = bootstrap_arrays(
                    family, y_vec, n_vec, X, raw["theta"], 0,
                    estimator, config.b_boot, boot_seed,
                )
                if ok.sum() < max(1, config.b_boot // 2):
                    continue
                m_hat = mean_link(family, float(raw["beta"][0]))
                t1_hat = t1_conditional(family, y_q, config.n, m_hat, raw["nu"])
                t1_bar = 2.0 * t1_hat - float(np.sum(t1s[ok])) / ok.sum()
                est[j] = t1_bar + float(np.sum(sq_diff[ok])) / ok.sum()
        except (SingularMatrixError, DomainError):
            continue
    return est


def rb_cv(
    config: SimConfig,
    alpha: float,
    estimator: str,
    cmse_true: float | None = None,
) -> tuple[float, float]:
    """Relative bias and coefficient of variation of the CMSE estimator.

    GT fits are paired with the analytical estimator, ML fits with the
    parametric bootstrap.  ``cmse_true`` defaults to a fresh MC truth for
    the same estimator.
    """
    if cmse_true is None:
        cmse_true = true_cmse_mc(config, alpha, estimator).value
    est = _parallel_chunks(
        _estimate_chunk, config, config.t_eval, (config, alpha, estimator)
    )
    ok = np.isfinite(est)
    if not ok.any():
        raise RuntimeError("all evaluation replications failed")
    e = est[ok]
    rb = (float(np.mean(e)) - cmse_true) / cmse_true
    cv = math.sqrt(float(np.mean((e - cmse_true) ** 2))) / cmse_true
    return rb, cv


def simulate_table(config: SimConfig) -> SimReport:
    """Full RB/CV study: one row per alpha."""
    _, _, _, m_link = _study_arrays(config)
    rows = []
    for alpha in config.alphas:
        y_q = marginal_quantile(config.family, config.n, m_link, config.nu_true, alpha)
        truth_gt = true_cmse_mc(config, alpha, "gt")
        truth_ml = true_cmse_mc(config, alpha, "ml")
        rb_gt_v, cv_gt_v = rb_cv(config, alpha, "gt", truth_gt.value)
        rb_ml_v, cv_ml_v = rb_cv(config, alpha, "ml", truth_ml.value)
        rows.append(
            SimRow(
                alpha=alpha,
                y_quantile=y_q,
                cmse_true=truth_gt.value,
                cmse_true_se=truth_gt.mc_se,
                cmse_true_ml=truth_ml.value,
                rb_gt=rb_gt_v,
                cv_gt=cv_gt_v,
                rb_ml=rb_ml_v,
                cv_ml=cv_ml_v,
            )
        )
    return SimReport(config=config, rows=rows)


# ------------------------------------------------------------------ #
# Ratio curves
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class RatioParams:
    n: float
    nu: float
    linear_predictor: float
    m_areas: int = 25


def _expected_t1(family: FamilyKind, n: float, m: float, nu: float) -> float:
    """E[T1(y, eta)] over the marginal of y: lattice sum (discrete) or exact."""
    c = family.coefficients
    if family is FamilyKind.GAUSSIAN:
        return nu * c.q(m) / ((n + nu) * (nu - c.v2))
    from .families import marginal_pmf_lattice

    y, pmf = marginal_pmf_lattice(family, n, m, nu)
    t1 = np.array([t1_conditional(family, yi, n, m, nu) for yi in y])
    return float(t1 @ pmf)


def ratio_curves(
    family: FamilyKind,
    order: int,
    grid: np.ndarray,
    params: RatioParams,
) -> list[tuple[float, float]]:
    """Ratio_1 or Ratio_2 sampled on a y-grid.

    Ratio_1 = T1(y)/E[T1]; Ratio_2 = {T1(y)+T2(y)}/E[T1+T2] with T2 built
    from the information matrix of ``m_areas`` identical areas.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    grid = np.asarray(grid, dtype=float)
    if family is FamilyKind.BINOMIAL_BETA and (grid.min() < 0 or grid.max() > 1):
        raise DomainError("binomial-beta grid must lie in [0, 1]")
    if family is FamilyKind.POISSON_GAMMA and grid.min() < 0:
        raise DomainError("poisson-gamma grid must be nonnegative")

    n, nu, lp = params.n, params.nu, params.linear_predictor
    m = mean_link(family, lp)
    t1 = np.array([t1_conditional(family, yi, n, m, nu) for yi in grid])
    denom = _expected_t1(family, n, m, nu)
    if order == 1:
        return [(float(y), float(v / denom)) for y, v in zip(grid, t1)]

    c = family.coefficients
    n_vec = np.full(params.m_areas, n)
    X = np.ones((params.m_areas, 1))
    eta = Hyperparameters(np.array([lp]), nu)
    u_inv = np.linalg.inv(information_matrix(family, n_vec, X, eta))
    s = n + nu
    q_m = c.q(m)
    w_b = (nu / s) * q_m
    t2 = np.array(
        [
            np.array([w_b, -n * (yi - m) / s**2])
            @ u_inv
            @ np.array([w_b, -n * (yi - m) / s**2])
            for yi in grid
        ]
    )
    t2_bar = (nu**2 * q_m**2 * u_inv[0, 0] + n / s * q_m / (nu - c.v2) * u_inv[1, 1]) / s**2
    denom2 = denom + t2_bar
    return [(float(y), float(v / denom2)) for y, v in zip(grid, t1 + t2)]
