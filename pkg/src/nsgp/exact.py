"""Exact-inference GP regression: marginal likelihood, MAP objectives for
latent fields, closed-form and Monte-Carlo posterior predictives, and
log-space prediction.

The marginal likelihood and MAP objectives are pure functions of the model
pytree, so the optimizer differentiates through the entire kernel chain
(noise, stationary hyperparameters, log-lengthscale vectors, H entries).
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
import numpy as np
import scipy.stats

from . import fields as fl
from . import kernels as kn
from . import linalg as la
from .exceptions import ConfigError, DimensionMismatch, NonPositiveTarget
from .optim import OptimConfig, minimize


def _static(**kw):
    return dataclasses.field(metadata=dict(static=True), **kw)


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class GpModel:
    """Kernel, Gaussian noise, training data, and optional latent fields."""

    kernel: object
    log_noise2: jnp.ndarray
    x: jnp.ndarray                # (N, D)
    y: jnp.ndarray                # (N,)
    fields: dict                  # ref -> LengthscaleField | MatrixField
    transform: str = _static(default="none")


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class PredictiveDistribution:
    """Gaussian (or log-normal, or Gaussian-mixture) predictive summary."""

    mean: jnp.ndarray             # (N*,)
    var: jnp.ndarray              # (N*,)
    cov: object = None            # (N*, N*) when requested
    components: object = None     # (means (J, N*), vars (J, N*)) for MC mixtures
    transform: str = _static(default="none")


def make_model(kernel, x, y, noise_variance=0.1, fields=None, transform="none") -> GpModel:
    """Assemble a GpModel; with transform='log' the stored targets are log y."""
    x = jnp.atleast_2d(jnp.asarray(x, dtype=jnp.float64))
    y = jnp.asarray(y, dtype=jnp.float64).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{x.shape[0]} inputs vs {y.shape[0]} targets")
    if float(noise_variance) <= 0.0:
        raise ConfigError("noise variance must be positive")
    if transform not in ("none", "log"):
        raise ConfigError(f"unknown target transform '{transform}'")
    if transform == "log":
        if float(jnp.min(y)) <= 0.0:
            raise NonPositiveTarget("log transform requires strictly positive targets")
        y = jnp.log(y)
    return GpModel(
        kernel=kernel,
        log_noise2=jnp.log(jnp.asarray(noise_variance, dtype=jnp.float64)),
        x=x,
        y=y,
        fields=dict(fields or {}),
        transform=transform,
    )


def noise_variance(model: GpModel):
    return jnp.exp(model.log_noise2)


def _train_context(model: GpModel):
    return fl.latent_context(
        model.kernel, model.fields, model.x, rows_at_anchors=True, cols_at_anchors=True
    )


def _noisy_train_gram(model: GpModel):
    """K_f + sigma_n^2*I on the training inputs; the noise conditions the system."""
    k = kn.gram_values(model.kernel, model.x, latent=_train_context(model))
    n = model.x.shape[0]
    return k + noise_variance(model) * jnp.eye(n)


def log_marginal_likelihood(model: GpModel):
    """log N(y | 0, K_f + sigma_n^2 I) via Cholesky."""
    kny = _noisy_train_gram(model)
    lk = la.chol_lower(kny)
    alpha = jax.scipy.linalg.cho_solve((lk, True), model.y)
    n = model.y.shape[0]
    return (
        -0.5 * model.y @ alpha
        - jnp.sum(jnp.log(jnp.diagonal(lk)))
        - 0.5 * n * jnp.log(2.0 * jnp.pi)
    )


def _field_prior_logpdf(field):
    if isinstance(field, fl.LengthscaleField):
        return fl.lengthscale_prior_logpdf(field)
    k_h = kn.gram_values(field.row_kernel, field.anchors) + la.LATENT_JITTER * jnp.eye(
        field.anchors.shape[0]
    )
    return fl.matnorm_logpdf(field.h, k_h, field.psi)


def map_objective(model: GpModel):
    """Data log likelihood plus the log prior of every latent field."""
    total = log_marginal_likelihood(model)
    for ref in sorted(model.fields):
        total = total + _field_prior_logpdf(model.fields[ref])
    return total


def map_objective_fgk(model: GpModel):
    """MAP objective for lengthscale-field models: LML + sum_d log N(lhat_d | mu, K_field)."""
    if not any(isinstance(f, fl.LengthscaleField) for f in model.fields.values()):
        raise ConfigError("model carries no lengthscale field")
    return map_objective(model)


def map_objective_mgk(model: GpModel):
    """MAP objective for matrix-field models: LML + matrix-normal log prior of H."""
    if not any(isinstance(f, fl.MatrixField) for f in model.fields.values()):
        raise ConfigError("model carries no matrix field")
    return map_objective(model)


# ---------------------------------------------------------------------------
# prediction


def posterior_predictive(model: GpModel, x_star, observation_noise=False, full_cov=False):
    """Closed-form Gaussian predictive; latent fields are extrapolated to x_star.

    observation_noise adds sigma_n^2 to the variance (the predictive for a
    noisy observation, used when scoring held-out targets).
    """
    x_star = jnp.atleast_2d(jnp.asarray(x_star, dtype=jnp.float64))
    k = kn.gram_values(model.kernel, model.x, latent=_train_context(model))
    kny = k + noise_variance(model) * jnp.eye(model.x.shape[0])
    factor = la.cholesky_psd(kny, la.KERNEL_JITTER)
    ctx_cross = fl.latent_context(
        model.kernel, model.fields, x_star, model.x, cols_at_anchors=True
    )
    k_sf = kn.gram_values(model.kernel, x_star, model.x, latent=ctx_cross)
    mean = la.gaussian_cond_mean(k_sf, factor, model.y)
    tmp = la.solve_chol(factor, k_sf.T)
    sigma2 = noise_variance(model) if observation_noise else 0.0
    if full_cov:
        ctx_star = fl.latent_context(model.kernel, model.fields, x_star)
        k_ss = kn.gram_values(model.kernel, x_star, latent=ctx_star)
        cov = k_ss - k_sf @ tmp
        cov = 0.5 * (cov + cov.T) + sigma2 * jnp.eye(x_star.shape[0])
        var = jnp.clip(jnp.diagonal(cov), 0.0, None)
        return PredictiveDistribution(mean=mean, var=var, cov=cov)
    ctx_star = fl.latent_context(model.kernel, model.fields, x_star)
    diag_ss = kn.gram_diag(model.kernel, x_star, latent=ctx_star)
    var = jnp.clip(diag_ss - jnp.sum(k_sf * tmp.T, axis=1), 0.0, None) + sigma2
    return PredictiveDistribution(mean=mean, var=var)


def predictive_mc(model: GpModel, x_star, count, seed, observation_noise=False):
    """Monte-Carlo predictive for matrix-field models.

    Draws H* from the conditional latent process, computes the closed-form
    predictive per draw, and returns the mixture's first two moments along
    with the per-component summaries (for exact mixture densities).
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    refs = [r for r, f in model.fields.items() if isinstance(f, fl.MatrixField)]
    if len(refs) != 1:
        raise ConfigError("Monte-Carlo prediction expects exactly one matrix field")
    ref = refs[0]
    field = model.fields[ref]
    nodes = [
        n for n in kn.iter_nodes(model.kernel)
        if isinstance(n, kn.Mgk) and n.field_ref == ref
    ]
    dims = np.asarray(nodes[0].active_dims, dtype=int)
    x_star = jnp.atleast_2d(jnp.asarray(x_star, dtype=jnp.float64))

    kny = _noisy_train_gram(model)
    lk = la.chol_lower(kny)
    alpha = jax.scipy.linalg.cho_solve((lk, True), model.y)
    sig_anchors = fl.sigmas_at(field, None, at_anchors=True)
    omega = fl.omega_of(field)
    sigma2 = noise_variance(model) if observation_noise else 0.0

    def one(h_star):
        sig_star = fl.sigmas_from_rows(h_star, omega)
        ctx_cross = {ref: (sig_star, sig_anchors)}
        k_sf = kn.gram_values(model.kernel, x_star, model.x, latent=ctx_cross)
        ctx_star = {ref: (sig_star, sig_star)}
        diag_ss = kn.gram_diag(model.kernel, x_star, latent=ctx_star)
        mean = k_sf @ alpha
        tmp = jax.scipy.linalg.solve_triangular(lk, k_sf.T, lower=True)
        var = jnp.clip(diag_ss - jnp.sum(tmp**2, axis=0), 0.0, None) + sigma2
        return mean, var

    draws = fl.sample_conditional_h(field, x_star[:, dims], count, seed)
    means, variances = jax.vmap(one)(draws)
    mix_mean = jnp.mean(means, axis=0)
    mix_var = jnp.mean(variances + means**2, axis=0) - mix_mean**2
    return PredictiveDistribution(
        mean=mix_mean,
        var=jnp.clip(mix_var, 0.0, None),
        components=(means, variances),
    )


def lognormal_quantiles(mean, var, quantiles):
    """Quantiles of exp(z) for z ~ N(mean, var); shape (n, len(quantiles))."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.sqrt(np.asarray(var, dtype=np.float64).reshape(-1))
    z = scipy.stats.norm.ppf(np.asarray(quantiles, dtype=np.float64))
    return np.exp(mean[:, None] + std[:, None] * z[None, :])


def lognormal_predict(model: GpModel, x_star, quantiles=(0.05, 0.5, 0.95)):
    """Log-normal predictive quantiles and median for a log-transformed model.

    The model regresses z = log y; Gaussian quantiles in z-space map through
    exp, so every emitted quantile is positive by construction.
    """
    if model.transform != "log":
        raise ConfigError("lognormal_predict requires a log-transformed model")
    pred = posterior_predictive(model, x_star, observation_noise=True)
    qs = lognormal_quantiles(pred.mean, pred.var, quantiles)
    median = np.exp(np.asarray(pred.mean))
    return PredictiveDistribution(
        mean=pred.mean, var=pred.var, transform="lognormal"
    ), qs, median


# ---------------------------------------------------------------------------
# fitting


def trainable_params(model: GpModel):
    """Extract the optimized parameter pytree from a model."""
    params = {"kernel": model.kernel, "log_noise2": model.log_noise2}
    field_params = {}
    for ref, field in model.fields.items():
        if isinstance(field, fl.LengthscaleField):
            field_params[ref] = {"log_values": field.log_values}
        else:
            field_params[ref] = {"h": field.h, "omega_raw": field.omega_raw}
    if field_params:
        params["fields"] = field_params
    return params


def _whitened_params(model: GpModel):
    """Optimizer coordinates with latent fields whitened by their priors.

    The field prior Grams are numerically low rank, so raw field values see
    a huge curvature in the off-prior subspace and first-order steps stall;
    optimizing w with values = mu + L w (H = L_row W L_col^T) is the same
    MAP problem through a bijection but with an identity prior Hessian.
    """
    params = {"kernel": model.kernel, "log_noise2": model.log_noise2}
    field_params = {}
    transforms = {}
    for ref, field in model.fields.items():
        if isinstance(field, fl.LengthscaleField):
            lw = fl.prior_chol(field)
            resid = field.log_values - field.prior_mean[None, :]
            w0 = jax.scipy.linalg.solve_triangular(lw, resid, lower=True)
            field_params[ref] = {"white": w0}
            transforms[ref] = ("lengthscale", lw)
        else:
            lr, lc = fl.prior_chols(field)
            w0 = jax.scipy.linalg.solve_triangular(
                lr,
                jax.scipy.linalg.solve_triangular(lc, field.h.T, lower=True).T,
                lower=True,
            )
            field_params[ref] = {"white": w0, "omega_raw": field.omega_raw}
            transforms[ref] = ("matrix", lr, lc)
    if field_params:
        params["fields"] = field_params
    return params, transforms


def _dewhiten(model: GpModel, params, transforms):
    new_fields = dict(model.fields)
    for ref, sub in params.get("fields", {}).items():
        field = new_fields[ref]
        t = transforms[ref]
        if t[0] == "lengthscale":
            values = field.prior_mean[None, :] + t[1] @ sub["white"]
            new_fields[ref] = dataclasses.replace(field, log_values=values)
        else:
            h = t[1] @ sub["white"] @ t[2].T
            new_fields[ref] = dataclasses.replace(
                field, h=h, omega_raw=sub["omega_raw"]
            )
    return dataclasses.replace(
        model, kernel=params["kernel"], log_noise2=params["log_noise2"], fields=new_fields
    )


def apply_params(model: GpModel, params) -> GpModel:
    """Rebuild a model with updated trainable parameters."""
    new_fields = dict(model.fields)
    for ref, sub in params.get("fields", {}).items():
        new_fields[ref] = dataclasses.replace(new_fields[ref], **sub)
    return dataclasses.replace(
        model, kernel=params["kernel"], log_noise2=params["log_noise2"], fields=new_fields
    )


def fit_exact(model: GpModel, config: OptimConfig):
    """Maximize the exact objective (ML-II or MAP) over all trainable parameters.

    Latent fields are optimized in prior-whitened coordinates (the objective
    is unchanged; see _whitened_params). Returns (fitted model, TrainTrace);
    the trace holds the minimized negative objective per iteration.
    """
    params0, transforms = _whitened_params(model)

    def negative(params):
        return -map_objective(_dewhiten(model, params, transforms))

    best, trace = minimize(negative, params0, config)
    return _dewhiten(model, best, transforms), trace
