"""Empirical Bayes small area estimation with conditional MSE measures.

Area-level NEF-QVF mixture models (gaussian/Fay-Herriot, Poisson-gamma,
binomial-beta) with estimating-equation and marginal-ML fitting, EB
prediction, second-order conditional and unconditional MSE estimators
(analytical and parametric-bootstrap) and the simulation harness used to
study them.
"""

from .families import (
    DomainError,
    FamilyKind,
    PosteriorParams,
    QvfCoefficients,
    log_marginal_density,
    mean_link,
    posterior_params,
    qvf_eval,
    sample_area,
    sample_dataset,
)
from .model import (
    AreaObservation,
    Dataset,
    EstimatingBlocks,
    Hyperparameters,
    SingularMatrixError,
    central_moments,
    estimating_blocks,
    information_matrix,
    residual_pair,
)
from .fitting import ConvergenceError, FitResult, solve_gt, solve_ml
from .prediction import PredictionRecord, bayes_estimate, eb_predict
from .cmse import (
    BiasConstituents,
    CmseBreakdown,
    central_difference,
    cmse_analytical,
    conditional_bias,
    mse_unconditional,
    relative_difference,
    t1_conditional,
    t1_derivatives,
    t2_conditional,
)
from .bootstrap import BootstrapPlan, InsufficientReplicationsError, bootstrap_resample, cmse_bootstrap
from .simulation import SimConfig, SimReport, marginal_quantile, ratio_curves, rb_cv, simulate_table, true_cmse_mc

__version__ = "0.1.0"
