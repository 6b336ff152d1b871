"""Functional Cox regression for interval-censored data.

Penalized nonparametric maximum likelihood for a proportional-hazards
model with scalar covariates and a functional covariate entering through
int beta(s) Z(s) ds, fitted by a Poisson-augmented EM algorithm.  Includes
approximate leave-one-out tuning of the smoothing parameter,
profile-likelihood standard errors, a global Wald test for the functional
coefficient, and a Monte Carlo simulation harness.
"""

from .data import (
    DegenerateLikelihoodError,
    DesignSet,
    Observation,
    TimeGrid,
    build_design,
    build_time_grid,
    observed_loglik,
)
from .em import EStepResult, FitState, NumericalError, e_step, fit, m_step_lambda, m_step_zeta
from .inference import (
    Constraint,
    InferenceReport,
    WaldResult,
    alpha_covariance,
    chisq_pvalue,
    constrained_fit,
    global_beta_test,
    make_alpha_constraint,
    make_beta_functional_constraint,
    profile_hessian,
    profile_loglik,
    second_difference_hessian,
)
from .kernel import (
    FunctionalCurve,
    GramMatrices,
    KernelContext,
    compute_gram,
    eval_beta,
    integrate_curve,
    k1_eval,
    null_basis_eval,
)
from .simulation import SimConfig, SimSummary, empirical_check_inversion, gen_subject, run_study
from .tuning import (
    CvReport,
    WorkingInfo,
    aloocv_score,
    build_working_info,
    default_gamma_grid,
    loo_lambda,
    loo_zeta,
    select_gamma,
    working_contrib,
)

__version__ = "0.1.0"

__all__ = [
    "Constraint",
    "CvReport",
    "DegenerateLikelihoodError",
    "DesignSet",
    "EStepResult",
    "FitState",
    "FunctionalCurve",
    "GramMatrices",
    "InferenceReport",
    "KernelContext",
    "NumericalError",
    "Observation",
    "SimConfig",
    "SimSummary",
    "TimeGrid",
    "WaldResult",
    "WorkingInfo",
    "alpha_covariance",
    "aloocv_score",
    "build_design",
    "build_time_grid",
    "build_working_info",
    "chisq_pvalue",
    "compute_gram",
    "constrained_fit",
    "default_gamma_grid",
    "e_step",
    "empirical_check_inversion",
    "eval_beta",
    "fit",
    "gen_subject",
    "global_beta_test",
    "integrate_curve",
    "k1_eval",
    "loo_lambda",
    "loo_zeta",
    "m_step_lambda",
    "m_step_zeta",
    "make_alpha_constraint",
    "make_beta_functional_constraint",
    "null_basis_eval",
    "observed_loglik",
    "profile_hessian",
    "profile_loglik",
    "run_study",
    "second_difference_hessian",
    "select_gamma",
    "working_contrib",
]
