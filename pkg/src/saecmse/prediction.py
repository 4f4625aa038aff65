"""Bayes and empirical Bayes prediction of the area means.

The Bayes estimator is the posterior mean (n*y + nu*m)/(n + nu), a convex
combination of the direct estimate and the regression-fitted prior mean;
the empirical Bayes estimator plugs in the fitted hyperparameters.
"""

from __future__ import annotations

from dataclasses import dataclass

from .families import DomainError, mean_link
from .fitting import FitResult
from .model import Dataset

__all__ = ["PredictionRecord", "bayes_estimate", "eb_predict"]


@dataclass(frozen=True)
class PredictionRecord:
    area_id: str
    y: float
    xi_hat: float
    m_hat: float
    shrink_weight: float  # nu_hat / (n + nu_hat), the pull towards m_hat


def bayes_estimate(y: float, n: float, m: float, nu: float) -> float:
    """Posterior mean of xi: weight n/(n+nu) on y, nu/(n+nu) on m."""
    if n <= 0 or nu <= 0:
        raise DomainError(f"need n > 0 and nu > 0, got n={n}, nu={nu}")
    return (n * y + nu * m) / (n + nu)


def eb_predict(dataset: Dataset, fit: FitResult) -> list[PredictionRecord]:
    """Empirical Bayes predictions for every area, in input order."""
    if not fit.converged:
        raise ValueError("eb_predict requires a converged fit")
    beta, nu = fit.eta_hat.beta, fit.eta_hat.nu
    records = []
    for obs in dataset.areas:
        m_hat = mean_link(dataset.family, float(obs.x @ beta))
        records.append(
            PredictionRecord(
                area_id=obs.area_id,
                y=obs.y,
                xi_hat=bayes_estimate(obs.y, obs.n, m_hat, nu),
                m_hat=m_hat,
                shrink_weight=nu / (obs.n + nu),
            )
        )
    return records
