"""Conjugate Bayesian trajectory models with predictive stacking.

Exact Normal-Inverse-Gamma inference for three spatial-temporal model
families (a filtered dynamic linear model, a discrete-time trajectory
model with a latent spatial field, and a continuous space-time trajectory
model), plus predictive stacking of means and of distributions over grids
of fixed-hyperparameter candidates, closed-form model evidence for
Bayesian model averaging, and full mixture predictive laws at arbitrary
trajectory points.
"""

from .bayes import (
    ArRandomWalkCov,
    AugmentedSystem,
    DenseCov,
    IdentityCov,
    NigPosterior,
    RowGroup,
    StudentTPredictive,
    evidence_from_posterior,
    log_marginal_likelihood,
    marginal_theta,
    nig_posterior,
    sample_nig,
    system_from_dense,
    t_logdensity,
)
from .continuous import (
    ContinuousTrajSpec,
    FittedContinuous,
    build_system_continuous,
    fit_continuous,
    predict_points_continuous,
)
from .data import TrajectoryDataset, read_trajectory_csv, write_trajectory_csv
from .diagnostics import (
    ConcentrationReport,
    VarianceTermInput,
    sigma_concentration_check,
    variance_term_EA,
    variance_term_profile,
)
from .discrete import (
    DiscreteTrajSpec,
    FittedDiscrete,
    LocationIndex,
    NsdlmSpec,
    build_system_discrete,
    dedup_locations,
    fit_discrete,
    fit_nsdlm,
    predict_epochs_discrete,
    predict_next_discrete,
)
from .dlm import DlmSpec, DlmState, filter_series, filter_step, forecast, \
    no_trend_matern_model, spatial_predict
from .errors import (
    ConfigurationError,
    DataValidationError,
    IdentifiabilityError,
    NumericalRankError,
    ParameterDomainError,
    TrajstackError,
)
from .kernels import (
    GramResult,
    KernelSpec,
    SpaceTimePoint,
    corr_matrix,
    cross_corr,
    gneiting_st_corr,
    gram,
    matern_corr,
    sqexp_corr,
)
from .metrics import MetricReport, dic, mlpd, mse_z, mspe, rmse_relative, waic
from .simulate import (
    SimConfig,
    random_walk_trajectory,
    simulate_continuous,
    simulate_discrete,
    simulate_dlm,
)
from .stacking import (
    CandidateSpec,
    FoldPlan,
    MixturePredictive,
    SigmaSquaredMixture,
    StackingResult,
    StackingRun,
    bma_weights,
    candidate_grid,
    continuous_grid,
    discrete_grid,
    make_folds,
    run_stacking,
    stack_distributions,
    stack_means,
    stacked_mixture,
)

__version__ = "0.1.0"
