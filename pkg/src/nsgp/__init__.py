"""Non-stationary Gaussian process regression.

Gibbs kernels with latent-GP lengthscale fields, a multivariate variant
driven by a matrix-variate process, MAP inference, sparse inducing-point
training, and spatio-temporal kernel compositions. All dense linear
algebra runs in float64.
"""

from jax import config as _jax_config

_jax_config.update("jax_enable_x64", True)

from . import exceptions  # noqa: E402,F401
from .kernels import (  # noqa: E402
    Fgk,
    GramMatrix,
    Mgk,
    Periodic,
    Product,
    SeArd,
    Sum,
    fgk,
    gram,
    gram_diag,
    k_fgk,
    k_mgk,
    k_periodic,
    k_se_ard,
    k_spatiotemporal,
    mgk,
    periodic,
    se_ard,
    spatiotemporal_spec,
    spec_from_json,
    spec_to_json,
    verify_prop2_integral,
)
from .linalg import CholeskyFactor, cholesky_psd, gaussian_cond_mean, kron, log_det_chol, solve_chol  # noqa: E402
from .fields import (  # noqa: E402
    LengthscaleField,
    MatrixField,
    extrapolate_h,
    extrapolate_lengthscale,
    make_lengthscale_field,
    make_matrix_field,
    matnorm_logpdf,
    sample_conditional_h,
    sample_prior_functions,
    sigma_from_h,
)
from .exact import (  # noqa: E402
    GpModel,
    PredictiveDistribution,
    fit_exact,
    log_marginal_likelihood,
    lognormal_predict,
    make_model,
    map_objective_fgk,
    map_objective_mgk,
    posterior_predictive,
    predictive_mc,
)
from .sparse import SparseModel, collapsed_elbo, dynamic_forward_pass, make_sparse, sparse_fit, sparse_predictive  # noqa: E402
from .optim import GradCheckReport, OptimConfig, TrainTrace, grad_check, gradient, minimize  # noqa: E402
from .data import Dataset, kmeans_regimes, load_csv, nlpd, rmse, split, synth_nonstationary  # noqa: E402
from .results import FitResult, load_fit, save_fit  # noqa: E402

__version__ = "0.1.0"
