"""Parametric-bootstrap CMSE estimator (valid for any eta estimator, incl. ML).

With the target observation held fixed, every other area is regenerated
from the fitted model and eta is re-estimated with the same technique,
giving draws eta*_(i).  Two pieces combine into the estimator:

    T1_bar = 2*T1(y_i, eta_hat) - E*[T1(y_i, eta*_(i))]      (bias-corrected T1)
    T2*    = E*[{xi_hat(y_i, eta_hat) - xi_hat(y_i, eta*_(i))}^2]

and CMSE_hat = T1_bar + T2*.  Replication streams are derived from
(seed, rep_index), so results are independent of execution order and a
fixed seed reproduces the estimate bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import fitting
from .cmse import CmseBreakdown, mse_unconditional, relative_difference, t1_conditional
from .families import FamilyKind, sample_dataset
from .fitting import FitResult
from .kernels import link_mean
from .model import Dataset, Hyperparameters, estimating_blocks
from .prediction import bayes_estimate
from .util import TAG_BOOTSTRAP, rng_stream

__all__ = [
    "BootstrapPlan",
    "InsufficientReplicationsError",
    "bootstrap_resample",
    "cmse_bootstrap",
]


class InsufficientReplicationsError(RuntimeError):
    """Too few bootstrap refits succeeded to report an estimate."""


@dataclass(frozen=True)
class BootstrapPlan:
    target_area_index: int
    replications: int
    seed: int
    estimator: str = "gt"  # "gt" or "ml"

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.estimator not in ("gt", "ml"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


def _draw_y_star(
    family: FamilyKind,
    y: np.ndarray,
    n: np.ndarray,
    X: np.ndarray,
    theta_hat: np.ndarray,
    target: int,
    rng: np.random.Generator,
) -> np.ndarray:
    beta, nu = theta_hat[:-1], math.exp(theta_hat[-1])
    prior_mean = link_mean(family.code, X @ beta)
    keep = np.arange(y.size) != target
    _, y_new = sample_dataset(family, n[keep], prior_mean[keep], nu, rng)
    y_star = y.copy()
    y_star[keep] = y_new
    return y_star


def _refit(code, y_star, n, X, method, theta_hat):
    """Warm-started refit with multistart fallback; same technique as the base fit."""
    return fitting.fit_arrays(code, y_star, n, X, method, theta_hat, warm_only=True)


def bootstrap_resample(
    dataset: Dataset, fit: FitResult, plan: BootstrapPlan, rep_index: int
) -> tuple[Dataset, FitResult]:
    """One bootstrap replication: regenerated dataset and the refitted eta.

    The target area's row is carried over bit-identically; the stream is a
    deterministic function of (plan.seed, rep_index).
    """
    if not fit.converged:
        raise ValueError("bootstrap requires a converged fit")
    theta_hat = np.append(fit.eta_hat.beta, math.log(fit.eta_hat.nu))
    rng = rng_stream(plan.seed, TAG_BOOTSTRAP, rep_index)
    y_star = _draw_y_star(
        dataset.family, dataset.y, dataset.n, dataset.X,
        theta_hat, plan.target_area_index, rng,
    )
    dataset_star = dataset.with_y(y_star)
    order = dataset_star.order
    raw = _refit(
        dataset.family.code,
        dataset_star.y[order], dataset_star.n[order], dataset_star.X[order],
        plan.estimator, theta_hat,
    )
    eta_star = FitResult(
        eta_hat=Hyperparameters(raw["beta"], raw["nu"]),
        method=plan.estimator,
        converged=raw["converged"],
        objective_value=raw["objective"],
        equation_norm=raw["norm"] if plan.estimator == "gt" else None,
        gradient_norm=raw["norm"] if plan.estimator == "ml" else None,
        iterations=raw["iterations"],
        multistart_index=raw["index"],
        diagnostics=raw["diagnostics"],
    )
    return dataset_star, eta_star


def _replication_stats(
    family: FamilyKind,
    y: np.ndarray,
    n: np.ndarray,
    X: np.ndarray,
    theta_hat: np.ndarray,
    target: int,
    method: str,
    seed: int,
    rep_indices: range,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(t1_star, sq_diff, ok) arrays for a range of replication indices."""
    code = family.code
    beta_hat, nu_hat = theta_hat[:-1], math.exp(theta_hat[-1])
    y_t, n_t, x_t = float(y[target]), float(n[target]), X[target]
    m_hat = float(link_mean(code, np.atleast_1d(x_t @ beta_hat))[0])
    xi_at_hat = bayes_estimate(y_t, n_t, m_hat, nu_hat)

    t1_star = np.full(len(rep_indices), np.nan)
    sq_diff = np.full(len(rep_indices), np.nan)
    ok = np.zeros(len(rep_indices), dtype=bool)
    for j, rep in enumerate(rep_indices):
        rng = rng_stream(seed, TAG_BOOTSTRAP, rep)
        y_star = _draw_y_star(family, y, n, X, theta_hat, target, rng)
        raw = _refit(code, y_star, n, X, method, theta_hat)
        if not raw["converged"]:
            continue
        m_star = float(link_mean(code, np.atleast_1d(x_t @ raw["beta"]))[0])
        t1_star[j] = t1_conditional(family, y_t, n_t, m_star, raw["nu"])
        sq_diff[j] = (xi_at_hat - bayes_estimate(y_t, n_t, m_star, raw["nu"])) ** 2
        ok[j] = True
    return t1_star, sq_diff, ok


def _replication_worker(args):  # pragma: no cover - exercised via processes
    (family_tag, y, n, X, theta_hat, target, method, seed, lo, hi) = args
    return _replication_stats(
        FamilyKind(family_tag), y, n, X, theta_hat, target, method, seed, range(lo, hi)
    )


def bootstrap_arrays(
    family: FamilyKind,
    y: np.ndarray,
    n: np.ndarray,
    X: np.ndarray,
    theta_hat: np.ndarray,
    target: int,
    method: str,
    replications: int,
    seed: int,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw replication statistics, rep-indexed; array-level fast path."""
    if threads <= 1:
        return _replication_stats(
            family, y, n, X, theta_hat, target, method, seed, range(replications)
        )
    bounds = np.linspace(0, replications, threads + 1, dtype=int)
    jobs = [
        (family.value, y, n, X, theta_hat, target, method, seed, int(lo), int(hi))
        for lo, hi in zip(bounds[:-1], bounds[1:])
        if hi > lo
    ]
    t1_star = np.empty(replications)
    sq_diff = np.empty(replications)
    ok = np.empty(replications, dtype=bool)
    with ProcessPoolExecutor(max_workers=threads) as pool:
        for (lo, hi), part in zip(
            [(j[-2], j[-1]) for j in jobs], pool.map(_replication_worker, jobs)
        ):
            t1_star[lo:hi], sq_diff[lo:hi], ok[lo:hi] = part
    return t1_star, sq_diff, ok


def cmse_bootstrap(
    dataset: Dataset, fit: FitResult, plan: BootstrapPlan, threads: int = 1
) -> CmseBreakdown:
    """Bootstrap CMSE estimate T1_bar + T2* for the planned target area."""
    if not fit.converged:
        raise ValueError("bootstrap requires a converged fit")
    target = plan.target_area_index
    if not 0 <= target < dataset.m:
        raise ValueError(f"target_area_index {target} out of range")
    obs = dataset.areas[target]
    theta_hat = np.append(fit.eta_hat.beta, math.log(fit.eta_hat.nu))
    t1_star, sq_diff, ok = bootstrap_arrays(
        dataset.family, dataset.y, dataset.n, dataset.X,
        theta_hat, target, plan.estimator, plan.replications, plan.seed, threads,
    )
    n_ok = int(ok.sum())
    if plan.replications >= 100:
        required = max(100, plan.replications // 2)
    else:
        required = max(1, plan.replications // 2)
    if n_ok < required:
        raise InsufficientReplicationsError(
            f"only {n_ok} of {plan.replications} bootstrap refits converged "
            f"(need {required})"
        )

    m_hat = float(link_mean(dataset.family.code, np.atleast_1d(obs.x @ fit.eta_hat.beta))[0])
    t1_at_hat = t1_conditional(dataset.family, obs.y, obs.n, m_hat, fit.eta_hat.nu)
    t1_bar = 2.0 * t1_at_hat - float(np.sum(t1_star[ok])) / n_ok
    t2_star = float(np.sum(sq_diff[ok])) / n_ok
    cmse = t1_bar + t2_star

    flags = ["bootstrap-mode"]
    if plan.replications < 100:
        flags.append("replications below production threshold (100)")
    if n_ok < plan.replications:
        flags.append(f"{plan.replications - n_ok} failed replications dropped")
    if cmse < 0:
        flags.append("negative cmse_hat; see cmse_floor companion")

    blocks = estimating_blocks(dataset, fit.eta_hat)
    mse = mse_unconditional(target, fit.eta_hat, blocks)
    return CmseBreakdown(
        area_id=obs.area_id,
        t1=t1_at_hat,
        t2=t2_star,
        t11=t1_at_hat - t1_bar,
        t12=0.0,
        cmse_hat=cmse,
        mse_hat=mse,
        rd_percent=relative_difference(cmse, mse),
        cmse_floor=max(cmse, t2_star),
        mode="bootstrap",
        flags=flags,
        n_boot_success=n_ok,
    )
