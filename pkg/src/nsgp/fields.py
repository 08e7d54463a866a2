"""Latent GP objects driving non-stationarity.

A LengthscaleField stores per-dimension log-lengthscale vectors at anchor
inputs together with the fixed stationary GP prior that smooths them; a
MatrixField stores the latent matrix H whose rows build the input-dependent
Sigma(x) = softplus((h h^T)^2) + diag(Omega). Extrapolation to new inputs
is the conditional-Gaussian (or matrix-normal) expectation from the anchors.
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
import numpy as np

from . import kernels as kn
from . import linalg as la
from .exceptions import ConfigError

# exp() overflow guard on log lengthscales; gradients vanish beyond the clamp.
LOG_CLAMP = 20.0


def _static(**kw):
    return dataclasses.field(metadata=dict(static=True), **kw)


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class LengthscaleField:
    """Per-dimension log-lengthscale vectors at anchors plus their GP prior.

    log_values has one column per output dimension of the Gibbs kernel the
    field feeds; anchors live in that kernel's active-dimension subspace.
    The prior kernel hyperparameters are fixed configuration, not learned.
    """

    anchors: jnp.ndarray          # (Na, K)
    log_values: jnp.ndarray       # (Na, K)
    prior_mean: jnp.ndarray       # (K,)
    prior_kernel: kn.SeArd


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class MatrixField:
    """Latent matrix process H with row kernel K_h, column covariance Psi, offset Omega."""

    anchors: jnp.ndarray          # (Na, K)
    h: jnp.ndarray                # (Na, K)
    omega_raw: jnp.ndarray        # (K,) -> Omega = softplus(omega_raw)
    psi: jnp.ndarray              # (K, K) fixed SPD column covariance
    row_kernel: kn.SeArd


def make_lengthscale_field(anchors, log_values, prior_mean, prior_kernel) -> LengthscaleField:
    anchors = jnp.asarray(anchors, dtype=jnp.float64)
    log_values = jnp.asarray(log_values, dtype=jnp.float64)
    if log_values.ndim == 1:
        log_values = log_values[:, None]
    if anchors.ndim != 2 or log_values.shape[0] != anchors.shape[0]:
        raise ConfigError("log_values must provide one row per anchor input")
    prior_mean = jnp.broadcast_to(
        jnp.asarray(prior_mean, dtype=jnp.float64), (log_values.shape[1],)
    )
    return LengthscaleField(anchors, log_values, prior_mean, prior_kernel)


def make_matrix_field(anchors, h, omega, psi, row_kernel) -> MatrixField:
    anchors = jnp.asarray(anchors, dtype=jnp.float64)
    h = jnp.asarray(h, dtype=jnp.float64)
    if h.shape[0] != anchors.shape[0]:
        raise ConfigError("H must provide one row per anchor input")
    omega = jnp.asarray(omega, dtype=jnp.float64)
    if float(jnp.min(omega)) <= 0.0:
        raise ConfigError("Omega entries must be positive")
    psi = jnp.asarray(psi, dtype=jnp.float64)
    k = h.shape[1]
    if psi.shape != (k, k):
        raise ConfigError(f"Psi must be {k}x{k}")
    # invert the softplus so stored raw values reproduce omega exactly
    omega_raw = jnp.log(jnp.expm1(omega))
    return MatrixField(anchors, h, omega_raw, psi, row_kernel)


def default_field_prior(x_sub, lengthscale_fraction=0.2, mean_fraction=0.2):
    """Fixed field-prior defaults derived from the data.

    SE prior with lengthscale = 20% of the per-dimension input range and
    unit variance; prior mean = log(0.2 * median pairwise distance). The
    factor on the median matters: centering the prior at the full median
    distance puts its mass in the flat-lengthscale regime, where MAP
    solutions interpolate instead of adapting the field.
    """
    x = np.asarray(x_sub, dtype=np.float64)
    span = np.maximum(x.max(axis=0) - x.min(axis=0), 1e-6)
    kernel = kn.se_ard(1.0, lengthscale_fraction * span, tuple(range(x.shape[1])))
    if x.shape[0] > 400:
        idx = np.random.default_rng(0).choice(x.shape[0], 400, replace=False)
        x = x[idx]
    diffs = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    med = np.median(dist[np.triu_indices(x.shape[0], k=1)])
    mu = np.log(max(mean_fraction * med, 1e-3))
    return kernel, mu


# ---------------------------------------------------------------------------
# Sigma construction and matrix-normal density


def sigma_from_h(h_row, omega):
    """Sigma = softplus((h h^T)^2) + diag(Omega); symmetric PSD by construction."""
    h_row = jnp.asarray(h_row, dtype=jnp.float64)
    outer = jnp.outer(h_row, h_row)
    return jax.nn.softplus(outer**2) + jnp.diag(jnp.asarray(omega, dtype=jnp.float64))


def omega_of(field: MatrixField):
    return jax.nn.softplus(field.omega_raw)


def sigmas_from_rows(h_rows, omega):
    """Stack of Sigma matrices, one per row of H."""
    return jax.vmap(lambda h: sigma_from_h(h, omega))(h_rows)


def matnorm_logpdf(h, k_rows, psi):
    """Log density of a zero-mean matrix normal MN(0, K_rows, Psi).

    Equals the multivariate normal density of vec(H) under Psi kron K_rows:
    -(ND/2) log 2pi - (D/2) log|K| - (N/2) log|Psi| - tr(Psi^-1 H^T K^-1 H)/2.
    """
    h = jnp.asarray(h, dtype=jnp.float64)
    n, d = h.shape
    lk = la.chol_lower(k_rows)
    lp = la.chol_lower(psi)
    logdet_k = 2.0 * jnp.sum(jnp.log(jnp.diagonal(lk)))
    logdet_p = 2.0 * jnp.sum(jnp.log(jnp.diagonal(lp)))
    kinh = jax.scipy.linalg.cho_solve((lk, True), h)
    pinht = jax.scipy.linalg.cho_solve((lp, True), h.T)
    trace = jnp.sum(kinh * pinht.T)
    return (
        -0.5 * n * d * jnp.log(2.0 * jnp.pi)
        - 0.5 * d * logdet_k
        - 0.5 * n * logdet_p
        - 0.5 * trace
    )


# ---------------------------------------------------------------------------
# evaluation and extrapolation


def clamped_lengthscales(field: LengthscaleField):
    """Lengthscales at the anchors themselves."""
    return jnp.exp(jnp.clip(field.log_values, -LOG_CLAMP, LOG_CLAMP))


def extrapolate_log_lengthscale(field: LengthscaleField, x_star):
    """Conditional-mean log lengthscales mu + K_*a K_aa^-1 (lhat - mu)."""
    x_star = jnp.asarray(x_star, dtype=jnp.float64)
    k_aa = kn.gram_values(field.prior_kernel, field.anchors) + la.LATENT_JITTER * jnp.eye(
        field.anchors.shape[0]
    )
    k_sa = kn.gram_values(field.prior_kernel, x_star, field.anchors)
    lk = la.chol_lower(k_aa)
    resid = field.log_values - field.prior_mean[None, :]
    return field.prior_mean[None, :] + k_sa @ jax.scipy.linalg.cho_solve((lk, True), resid)


def extrapolate_lengthscale(field: LengthscaleField, x_star):
    """Strictly positive per-dimension lengthscales at new inputs."""
    return jnp.exp(jnp.clip(extrapolate_log_lengthscale(field, x_star), -LOG_CLAMP, LOG_CLAMP))


def lengthscale_prior_logpdf(field: LengthscaleField):
    """Sum over dimensions of log N(lhat_d | mu_d, K_field)."""
    n = field.anchors.shape[0]
    k_aa = kn.gram_values(field.prior_kernel, field.anchors) + la.LATENT_JITTER * jnp.eye(n)
    lk = la.chol_lower(k_aa)
    resid = field.log_values - field.prior_mean[None, :]
    alpha = jax.scipy.linalg.cho_solve((lk, True), resid)
    logdet = 2.0 * jnp.sum(jnp.log(jnp.diagonal(lk)))
    d = field.log_values.shape[1]
    return (
        -0.5 * jnp.sum(resid * alpha)
        - 0.5 * d * logdet
        - 0.5 * d * n * jnp.log(2.0 * jnp.pi)
    )


def prior_chol(field: LengthscaleField):
    """Cholesky of the field prior Gram at the anchors (whitening matrix)."""
    n = field.anchors.shape[0]
    k_aa = kn.gram_values(field.prior_kernel, field.anchors) + la.LATENT_JITTER * jnp.eye(n)
    return la.chol_lower(k_aa)


def prior_chols(field: MatrixField):
    """Row and column prior Cholesky factors of a matrix field."""
    n = field.anchors.shape[0]
    k_h = kn.gram_values(field.row_kernel, field.anchors) + la.LATENT_JITTER * jnp.eye(n)
    return la.chol_lower(k_h), la.chol_lower(field.psi)


def extrapolate_h(field: MatrixField, x_star):
    """Conditional expectation of H at new inputs, reduced path K_*h K_h^-1 H.

    The Kronecker form (Psi kron K_*h)(Psi kron K_h)^-1 vec(H) collapses to
    this because the column covariance is input-independent; the dense path
    is kept in extrapolate_h_kron as a cross-check.
    """
    x_star = jnp.asarray(x_star, dtype=jnp.float64)
    k_aa = kn.gram_values(field.row_kernel, field.anchors) + la.LATENT_JITTER * jnp.eye(
        field.anchors.shape[0]
    )
    k_sa = kn.gram_values(field.row_kernel, x_star, field.anchors)
    lk = la.chol_lower(k_aa)
    return k_sa @ jax.scipy.linalg.cho_solve((lk, True), field.h)


def extrapolate_h_kron(field: MatrixField, x_star):
    """Dense Kronecker-vec path of the conditional expectation (oracle)."""
    x_star = jnp.asarray(x_star, dtype=jnp.float64)
    n_star = x_star.shape[0]
    d = field.h.shape[1]
    k_aa = kn.gram_values(field.row_kernel, field.anchors) + la.LATENT_JITTER * jnp.eye(
        field.anchors.shape[0]
    )
    k_sa = kn.gram_values(field.row_kernel, x_star, field.anchors)
    big = la.kron(field.psi, k_aa)
    cross = la.kron(field.psi, k_sa)
    vec_h = field.h.T.reshape(-1)  # column stacking matches Psi kron K
    vec_star = cross @ jnp.linalg.solve(big, vec_h)
    return vec_star.reshape(d, n_star).T


def sample_conditional_h(field: MatrixField, x_star, count, seed):
    """Matrix-normal conditional draws of H at new inputs; deterministic under seed.

    Mean is the conditional expectation, row covariance is the Schur
    complement K_** - K_*h K_h^-1 K_h*, column covariance is Psi. Returns
    an array of shape (count, N*, D).
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    x_star = jnp.asarray(x_star, dtype=jnp.float64)
    mean = extrapolate_h(field, x_star)
    k_aa = kn.gram_values(field.row_kernel, field.anchors) + la.LATENT_JITTER * jnp.eye(
        field.anchors.shape[0]
    )
    k_sa = kn.gram_values(field.row_kernel, x_star, field.anchors)
    k_ss = kn.gram_values(field.row_kernel, x_star)
    lk = la.chol_lower(k_aa)
    cond = k_ss - k_sa @ jax.scipy.linalg.cho_solve((lk, True), k_sa.T)
    # eigen-based square root: total even when the conditional covariance is ~0
    evals, evecs = jnp.linalg.eigh(0.5 * (cond + cond.T))
    row_sqrt = evecs * jnp.sqrt(jnp.clip(evals, 0.0, None))[None, :]
    col_sqrt = la.cholesky_psd(field.psi, la.LATENT_JITTER).lower
    key = jax.random.PRNGKey(int(seed))
    eps = jax.random.normal(key, (int(count), x_star.shape[0], mean.shape[1]), dtype=jnp.float64)
    return mean[None] + jnp.einsum("ij,njk,lk->nil", row_sqrt, eps, col_sqrt)


# ---------------------------------------------------------------------------
# latent context for Gram assembly


def lengthscales_at(field: LengthscaleField, x_sub, at_anchors=False):
    return clamped_lengthscales(field) if at_anchors else extrapolate_lengthscale(field, x_sub)


def sigmas_at(field: MatrixField, x_sub, at_anchors=False):
    h = field.h if at_anchors else extrapolate_h(field, x_sub)
    return sigmas_from_rows(h, omega_of(field))


def latent_context(spec, fields, x_rows, x_cols=None, rows_at_anchors=False, cols_at_anchors=False):
    """Field values for every Gibbs node of a composition tree.

    x_cols=None reuses the row values (symmetric Gram). The at_anchors
    flags short-circuit extrapolation when the inputs are the anchors
    themselves, which is both exact and cheaper.
    """
    ctx = {}
    x_rows = jnp.asarray(x_rows, dtype=jnp.float64)
    x_cols_arr = None if x_cols is None else jnp.asarray(x_cols, dtype=jnp.float64)
    for node in kn.iter_nodes(spec):
        if not isinstance(node, (kn.Fgk, kn.Mgk)):
            continue
        if node.field_ref in ctx:
            continue
        if fields is None or node.field_ref not in fields:
            raise kn.MissingLatentContext(
                f"model supplies no latent field named '{node.field_ref}'"
            )
        field = fields[node.field_ref]
        dims = np.asarray(node.active_dims, dtype=int)
        eval_at = lengthscales_at if isinstance(node, kn.Fgk) else sigmas_at
        if isinstance(node, kn.Fgk) != isinstance(field, LengthscaleField):
            raise ConfigError(
                f"field '{node.field_ref}' type does not match its kernel node"
            )
        rows = eval_at(field, x_rows[:, dims], rows_at_anchors)
        if x_cols_arr is None:
            cols = rows if rows_at_anchors == cols_at_anchors else eval_at(
                field, x_rows[:, dims], cols_at_anchors
            )
        else:
            cols = eval_at(field, x_cols_arr[:, dims], cols_at_anchors)
        ctx[node.field_ref] = (rows, cols)
    return ctx


# ---------------------------------------------------------------------------
# serialization (FitResult files)


def field_to_json(field):
    if isinstance(field, LengthscaleField):
        return {
            "type": "lengthscale",
            "anchors": np.asarray(field.anchors).tolist(),
            "log_values": np.asarray(field.log_values).tolist(),
            "prior_mean": np.asarray(field.prior_mean).tolist(),
            "prior_kernel": kn.spec_to_json(field.prior_kernel),
        }
    if isinstance(field, MatrixField):
        return {
            "type": "matrix",
            "anchors": np.asarray(field.anchors).tolist(),
            "h": np.asarray(field.h).tolist(),
            "omega": np.asarray(omega_of(field)).tolist(),
            "psi": np.asarray(field.psi).tolist(),
            "row_kernel": kn.spec_to_json(field.row_kernel),
        }
    raise ConfigError(f"unknown field type {type(field).__name__}")


def field_from_json(obj):
    kind = obj.get("type")
    if kind == "lengthscale":
        return make_lengthscale_field(
            jnp.asarray(obj["anchors"], dtype=jnp.float64),
            jnp.asarray(obj["log_values"], dtype=jnp.float64),
            jnp.asarray(obj["prior_mean"], dtype=jnp.float64),
            kn.spec_from_json(obj["prior_kernel"], "field.prior_kernel"),
        )
    if kind == "matrix":
        return make_matrix_field(
            jnp.asarray(obj["anchors"], dtype=jnp.float64),
            jnp.asarray(obj["h"], dtype=jnp.float64),
            jnp.asarray(obj["omega"], dtype=jnp.float64),
            jnp.asarray(obj["psi"], dtype=jnp.float64),
            kn.spec_from_json(obj["row_kernel"], "field.row_kernel"),
        )
    raise ConfigError(f"unknown field type '{kind}'")


# ---------------------------------------------------------------------------
# prior-predictive sampling


@dataclasses.dataclass
class PriorDraws:
    """Function draws plus the latent fields behind them, for inspection."""

    inputs: np.ndarray            # (N, D)
    functions: np.ndarray         # (count, N)
    fields: dict                  # ref -> (count, N, K) lengthscales or Sigma diagonals


def sample_prior_functions(spec, x, count, seed, field_prior_lengthscale=1.0, prior_mean=0.0):
    """Draw functions from the prior predictive of a composition tree.

    Latent log-lengthscale (or H) draws come from a GP prior with unit
    variance and a fixed lengthscale (default 1); the function draw then
    uses the resulting Gram. count=0 returns empty arrays.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    n = x.shape[0]
    if n > 2000:
        raise ConfigError("prior sampling grid is limited to 2000 points")
    if count < 0:
        raise ConfigError("count must be >= 0")
    draws = np.zeros((count, n))
    field_draws = {}
    refs = []
    for node in kn.iter_nodes(spec):
        if isinstance(node, (kn.Fgk, kn.Mgk)) and node.field_ref not in refs:
            refs.append(node.field_ref)
            field_draws[node.field_ref] = []
    key = jax.random.PRNGKey(int(seed))
    for j in range(count):
        key, fkey, ykey = jax.random.split(key, 3)
        ctx = {}
        for node in kn.iter_nodes(spec):
            if not isinstance(node, (kn.Fgk, kn.Mgk)) or node.field_ref in ctx:
                continue
            dims = np.asarray(node.active_dims, dtype=int)
            xs = x[:, dims]
            k = len(node.active_dims)
            prior = kn.se_ard(1.0, [field_prior_lengthscale] * xs.shape[1], tuple(range(xs.shape[1])))
            k_ff = kn.gram_values(prior, xs) + la.KERNEL_JITTER * jnp.eye(n)
            lf = la.chol_lower(k_ff)
            fkey, sub = jax.random.split(fkey)
            eps = jax.random.normal(sub, (n, k), dtype=jnp.float64)
            latent = prior_mean + lf @ eps
            if isinstance(node, kn.Fgk):
                ell = jnp.exp(jnp.clip(latent, -LOG_CLAMP, LOG_CLAMP))
                ctx[node.field_ref] = (ell, ell)
                field_draws[node.field_ref].append(np.asarray(ell))
            else:
                sig = sigmas_from_rows(latent, 0.1 * jnp.ones(k))
                ctx[node.field_ref] = (sig, sig)
                field_draws[node.field_ref].append(
                    np.asarray(jax.vmap(jnp.diagonal)(sig))
                )
        k_nn = kn.gram_values(spec, x, latent=ctx or None) + la.KERNEL_JITTER * jnp.eye(n)
        lm = la.chol_lower(k_nn)
        draws[j] = np.asarray(lm @ jax.random.normal(ykey, (n,), dtype=jnp.float64))
    stacked = {
        ref: (np.stack(vals) if vals else np.zeros((0, n, 1))) for ref, vals in field_draws.items()
    }
    return PriorDraws(inputs=np.asarray(x), functions=draws, fields=stacked)
