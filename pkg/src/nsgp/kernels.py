"""Covariance functions and their sum/product composition trees.

Stationary nodes (squared-exponential with ARD, locally periodic) carry
their own hyperparameters in log space. Non-stationary Gibbs nodes carry
only a reference to a latent field; per-input lengthscales or Sigma
matrices are supplied at Gram time through a latent context built by the
fields module. The factorised Gibbs kernel is

    k(xi, xj) = prod_d sqrt(2 l_d(xi) l_d(xj) / (l_d(xi)^2 + l_d(xj)^2))
                * exp{ -sum_d (xi_d - xj_d)^2 / (l_d(xi)^2 + l_d(xj)^2) }

and the multivariate form replaces the per-dimension lengthscales with a
full input-dependent PSD matrix Sigma(x):

    k(xi, xj) = |Sigma_i|^(1/4) |Sigma_j|^(1/4) |(Sigma_i + Sigma_j)/2|^(-1/2)
                * exp{ -(xi - xj)^T (Sigma_i + Sigma_j)^{-1} (xi - xj) }

With constant fields the factorised form reduces exactly to the SE-ARD
kernel; with diagonal Sigma the multivariate form reduces exactly to the
factorised one.
"""

from __future__ import annotations

import dataclasses
import math

import jax
import jax.numpy as jnp
import numpy as np

from .exceptions import (
    ConfigError,
    DimensionMismatch,
    GridTooCoarse,
    MissingLatentContext,
    NonPositiveLengthscale,
)


def _static(**kw):
    return dataclasses.field(metadata=dict(static=True), **kw)


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class SeArd:
    """Squared-exponential kernel with one lengthscale per active dimension.

    An empty active_dims tuple makes the node a constant equal to its
    signal variance, which is how amplitude enters Gibbs-kernel products.
    """

    log_variance: jnp.ndarray
    log_lengthscales: jnp.ndarray
    active_dims: tuple = _static(default=())


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class Periodic:
    """Periodic kernel sigma^2 exp{-2 sin^2(pi |t - t'| / p) / l^2} on one axis."""

    log_variance: jnp.ndarray
    log_lengthscale: jnp.ndarray
    log_period: jnp.ndarray
    active_dims: tuple = _static(default=(0,))


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class Fgk:
    """Factorised Gibbs kernel node; lengthscales come from a latent field."""

    field_ref: str = _static()
    active_dims: tuple = _static()


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class Mgk:
    """Multivariate Gibbs kernel node; Sigma(x) comes from a latent matrix field."""

    field_ref: str = _static()
    active_dims: tuple = _static()


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class Sum:
    left: object
    right: object


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class Product:
    left: object
    right: object


KERNEL_NODES = (SeArd, Periodic, Fgk, Mgk, Sum, Product)


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class GramMatrix:
    """Dense kernel matrix; symmetric is set when rows and columns share inputs."""

    values: jnp.ndarray
    symmetric: bool = _static(default=False)


def _check_dims(active_dims):
    dims = tuple(int(d) for d in active_dims)
    if len(set(dims)) != len(dims):
        raise ConfigError(f"active_dims {dims} contains duplicates")
    if any(d < 0 for d in dims):
        raise ConfigError(f"active_dims {dims} contains negative indices")
    return dims


def se_ard(variance, lengthscales, active_dims=()) -> SeArd:
    """Build an SE-ARD node from positive hyperparameters."""
    dims = _check_dims(active_dims)
    ell = jnp.atleast_1d(jnp.asarray(lengthscales, dtype=jnp.float64))
    if float(variance) <= 0.0:
        raise ConfigError("signal variance must be positive")
    if ell.shape[0] != len(dims):
        raise ConfigError(
            f"{ell.shape[0]} lengthscales for {len(dims)} active dimensions"
        )
    if len(dims) and float(jnp.min(ell)) <= 0.0:
        raise NonPositiveLengthscale("SE-ARD lengthscales must be positive")
    return SeArd(
        log_variance=jnp.log(jnp.asarray(variance, dtype=jnp.float64)),
        log_lengthscales=jnp.log(ell),
        active_dims=dims,
    )


def periodic(variance, lengthscale, period, active_dim=0) -> Periodic:
    """Build a periodic node from positive hyperparameters."""
    if float(variance) <= 0.0:
        raise ConfigError("signal variance must be positive")
    if float(lengthscale) <= 0.0:
        raise NonPositiveLengthscale("periodic lengthscale must be positive")
    if float(period) <= 0.0:
        raise ConfigError("period must be positive")
    return Periodic(
        log_variance=jnp.log(jnp.asarray(variance, dtype=jnp.float64)),
        log_lengthscale=jnp.log(jnp.asarray(lengthscale, dtype=jnp.float64)),
        log_period=jnp.log(jnp.asarray(period, dtype=jnp.float64)),
        active_dims=(int(active_dim),),
    )


def fgk(field_ref, active_dims) -> Fgk:
    return Fgk(field_ref=str(field_ref), active_dims=_check_dims(active_dims))


def mgk(field_ref, active_dims) -> Mgk:
    return Mgk(field_ref=str(field_ref), active_dims=_check_dims(active_dims))


def iter_nodes(spec):
    """Yield every node of a composition tree, depth first."""
    stack = [spec]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, (Sum, Product)):
            stack.append(node.right)
            stack.append(node.left)


# ---------------------------------------------------------------------------
# pointwise kernels


def k_se_ard(xi, xj, variance, lengthscales):
    """SE-ARD covariance between two points."""
    xi = jnp.atleast_1d(jnp.asarray(xi, dtype=jnp.float64))
    xj = jnp.atleast_1d(jnp.asarray(xj, dtype=jnp.float64))
    ell = jnp.atleast_1d(jnp.asarray(lengthscales, dtype=jnp.float64))
    if xi.shape != xj.shape or xi.shape != ell.shape:
        raise DimensionMismatch(
            f"inputs {xi.shape}/{xj.shape} vs lengthscales {ell.shape}"
        )
    return variance * jnp.exp(-0.5 * jnp.sum(((xi - xj) / ell) ** 2))


def k_periodic(xi, xj, variance, lengthscale, period):
    """Periodic covariance between two scalar (time) inputs."""
    d = jnp.abs(jnp.asarray(xi, dtype=jnp.float64) - jnp.asarray(xj, dtype=jnp.float64))
    return variance * jnp.exp(-2.0 * jnp.sin(jnp.pi * d / period) ** 2 / lengthscale**2)


def k_fgk(xi, xj, li, lj):
    """Factorised Gibbs covariance given per-dimension lengthscales at both points."""
    xi = jnp.atleast_1d(jnp.asarray(xi, dtype=jnp.float64))
    xj = jnp.atleast_1d(jnp.asarray(xj, dtype=jnp.float64))
    li = jnp.atleast_1d(jnp.asarray(li, dtype=jnp.float64))
    lj = jnp.atleast_1d(jnp.asarray(lj, dtype=jnp.float64))
    if not (xi.shape == xj.shape == li.shape == lj.shape):
        raise DimensionMismatch("inputs and lengthscales must share one shape")
    if float(jnp.min(li)) <= 0.0 or float(jnp.min(lj)) <= 0.0:
        raise NonPositiveLengthscale("Gibbs lengthscales must be strictly positive")
    s = li**2 + lj**2
    pref = jnp.prod(jnp.sqrt(2.0 * li * lj / s))
    return pref * jnp.exp(-jnp.sum((xi - xj) ** 2 / s))


def k_mgk(xi, xj, sigma_i, sigma_j):
    """Multivariate Gibbs covariance given Sigma(xi) and Sigma(xj).

    Uses the sum-form prefactor |(Sigma_i + Sigma_j)/2|^(-1/2) and the
    exponent without a 1/2 factor; this is the convention under which a
    diagonal Sigma reproduces the factorised kernel exactly.
    """
    xi = jnp.atleast_1d(jnp.asarray(xi, dtype=jnp.float64))
    xj = jnp.atleast_1d(jnp.asarray(xj, dtype=jnp.float64))
    sigma_i = jnp.asarray(sigma_i, dtype=jnp.float64)
    sigma_j = jnp.asarray(sigma_j, dtype=jnp.float64)
    d = xi.shape[0]
    if sigma_i.shape != (d, d) or sigma_j.shape != (d, d):
        raise DimensionMismatch("Sigma matrices must be DxD for D-dimensional inputs")
    s = sigma_i + sigma_j
    sign, logdet_s = jnp.linalg.slogdet(s)
    if float(sign) <= 0.0:
        from .exceptions import NotPositiveDefinite

        raise NotPositiveDefinite("Sigma_i + Sigma_j is not positive definite")
    logpref = (
        0.25 * jnp.linalg.slogdet(sigma_i)[1]
        + 0.25 * jnp.linalg.slogdet(sigma_j)[1]
        - 0.5 * (logdet_s - d * jnp.log(2.0))
    )
    diff = xi - xj
    quad = diff @ jnp.linalg.solve(s, diff)
    return jnp.exp(logpref - quad)


def verify_prop2_integral(xi, xj, sigma_i, sigma_j, n_grid=192, span_sigmas=8.0):
    """Quadrature check of the Gibbs basis-function overlap integral.

    Integrates exp{-(xi-a)^T Sigma_i^{-1} (xi-a) - (xj-a)^T Sigma_j^{-1} (xj-a)}
    over a with the trapezoid rule, then divides by the analytic Gaussian
    normalizer pi^{D/2} |Sigma_i^{-1} + Sigma_j^{-1}|^{-1/2}, leaving the
    exponent factor exp{-(xi-xj)^T (Sigma_i + Sigma_j)^{-1} (xi-xj)} for
    comparison against the adopted kernel convention. Test-support only.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=np.float64))
    xj = np.atleast_1d(np.asarray(xj, dtype=np.float64))
    d = xi.shape[0]
    if d > 2:
        raise DimensionMismatch("quadrature oracle supports D <= 2 only")
    if span_sigmas < 8.0:
        raise ConfigError("quadrature grid must cover at least 8 standard deviations")
    si = np.asarray(sigma_i, dtype=np.float64).reshape(d, d)
    sj = np.asarray(sigma_j, dtype=np.float64).reshape(d, d)
    ai, aj = np.linalg.inv(si), np.linalg.inv(sj)
    normalizer = math.pi ** (d / 2.0) / math.sqrt(np.linalg.det(ai + aj))

    # Each factor is a Gaussian in a with covariance Sigma/2 around xi or xj.
    std = np.sqrt(np.maximum(np.diagonal(si), np.diagonal(sj)) / 2.0)
    center = 0.5 * (xi + xj)
    half = 0.5 * np.abs(xi - xj) + span_sigmas * std

    def evaluate(n):
        axes = [np.linspace(center[k] - half[k], center[k] + half[k], n) for k in range(d)]
        if d == 1:
            a = axes[0][:, None]
        else:
            g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
            a = np.stack([g0.ravel(), g1.ravel()], axis=1)
        di, dj = a - xi, a - xj
        vals = np.exp(-np.einsum("nk,kl,nl->n", di, ai, di)
                      - np.einsum("nk,kl,nl->n", dj, aj, dj))
        if d == 1:
            return np.trapezoid(vals, axes[0])
        vals = vals.reshape(n, n)
        return np.trapezoid(np.trapezoid(vals, axes[1], axis=1), axes[0])

    coarse = evaluate(n_grid) / normalizer
    fine = evaluate(2 * n_grid) / normalizer
    if abs(fine - coarse) > 1e-6:
        raise GridTooCoarse(
            f"refinement moved the integral by {abs(fine - coarse):.3g} > 1e-6"
        )
    return fine


# ---------------------------------------------------------------------------
# Gram assembly


def _take(x, dims):
    return x[:, np.asarray(dims, dtype=int)]


def _se_block(node: SeArd, x1, x2):
    v = jnp.exp(node.log_variance)
    if not node.active_dims:
        return v * jnp.ones((x1.shape[0], x2.shape[0]))
    ell = jnp.exp(node.log_lengthscales)
    a = _take(x1, node.active_dims) / ell
    b = _take(x2, node.active_dims) / ell
    d2 = jnp.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return v * jnp.exp(-0.5 * d2)


def _periodic_block(node: Periodic, x1, x2):
    v = jnp.exp(node.log_variance)
    ell = jnp.exp(node.log_lengthscale)
    p = jnp.exp(node.log_period)
    t1 = _take(x1, node.active_dims)[:, 0]
    t2 = _take(x2, node.active_dims)[:, 0]
    d = jnp.abs(t1[:, None] - t2[None, :])
    return v * jnp.exp(-2.0 * jnp.sin(jnp.pi * d / p) ** 2 / ell**2)


def _context(latent, node):
    if latent is None or node.field_ref not in latent:
        raise MissingLatentContext(
            f"no field values supplied for latent kernel node '{node.field_ref}'"
        )
    return latent[node.field_ref]


def _fgk_block(node: Fgk, x1, x2, latent):
    l1, l2 = _context(latent, node)
    a = _take(x1, node.active_dims)
    b = _take(x2, node.active_dims)
    s = l1[:, None, :] ** 2 + l2[None, :, :] ** 2
    pref = jnp.prod(jnp.sqrt(2.0 * l1[:, None, :] * l2[None, :, :] / s), axis=-1)
    expo = jnp.exp(-jnp.sum((a[:, None, :] - b[None, :, :]) ** 2 / s, axis=-1))
    return pref * expo


def _mgk_block(node: Mgk, x1, x2, latent):
    s1, s2 = _context(latent, node)
    a = _take(x1, node.active_dims)
    b = _take(x2, node.active_dims)
    d = len(node.active_dims)
    s = s1[:, None, :, :] + s2[None, :, :, :]
    logdet_1 = jnp.linalg.slogdet(s1)[1]
    logdet_2 = jnp.linalg.slogdet(s2)[1]
    logdet_s = jnp.linalg.slogdet(s)[1]
    logpref = (
        0.25 * (logdet_1[:, None] + logdet_2[None, :])
        - 0.5 * (logdet_s - d * jnp.log(2.0))
    )
    diff = a[:, None, :] - b[None, :, :]
    quad = jnp.sum(diff * jnp.linalg.solve(s, diff[..., None])[..., 0], axis=-1)
    return jnp.exp(logpref - quad)


def gram_values(spec, x_rows, x_cols=None, latent=None):
    """Dense kernel matrix of a composition tree; x_cols=None means symmetric."""
    x1 = jnp.asarray(x_rows, dtype=jnp.float64)
    x2 = x1 if x_cols is None else jnp.asarray(x_cols, dtype=jnp.float64)
    if isinstance(spec, Sum):
        return gram_values(spec.left, x1, x2, latent) + gram_values(spec.right, x1, x2, latent)
    if isinstance(spec, Product):
        return gram_values(spec.left, x1, x2, latent) * gram_values(spec.right, x1, x2, latent)
    if isinstance(spec, SeArd):
        return _se_block(spec, x1, x2)
    if isinstance(spec, Periodic):
        return _periodic_block(spec, x1, x2)
    if isinstance(spec, Fgk):
        return _fgk_block(spec, x1, x2, latent)
    if isinstance(spec, Mgk):
        return _mgk_block(spec, x1, x2, latent)
    raise ConfigError(f"unknown kernel node {type(spec).__name__}")


def gram(spec, x_rows, x_cols=None, latent=None) -> GramMatrix:
    """Gram matrix with the symmetric flag set when rows and columns coincide."""
    symmetric = x_cols is None or x_cols is x_rows
    values = gram_values(spec, x_rows, None if symmetric else x_cols, latent)
    return GramMatrix(values=values, symmetric=symmetric)


def gram_diag(spec, x, latent=None):
    """Diagonal of the symmetric Gram without forming the matrix.

    Gibbs nodes have unit diagonal (prefactor and exponent both collapse),
    stationary nodes contribute their signal variance.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    n = x.shape[0]
    if isinstance(spec, Sum):
        return gram_diag(spec.left, x, latent) + gram_diag(spec.right, x, latent)
    if isinstance(spec, Product):
        return gram_diag(spec.left, x, latent) * gram_diag(spec.right, x, latent)
    if isinstance(spec, (SeArd, Periodic)):
        return jnp.exp(spec.log_variance) * jnp.ones(n)
    if isinstance(spec, (Fgk, Mgk)):
        return jnp.ones(n)
    raise ConfigError(f"unknown kernel node {type(spec).__name__}")


def k_spatiotemporal(xi, xj, spec, latent_pointwise=None):
    """Evaluate a composed spatio-temporal tree on a single pair of 3D inputs.

    latent_pointwise maps field refs to (value_at_xi, value_at_xj) for any
    Gibbs node in the tree.
    """
    xi = jnp.asarray(xi, dtype=jnp.float64).reshape(1, -1)
    xj = jnp.asarray(xj, dtype=jnp.float64).reshape(1, -1)
    latent = None
    if latent_pointwise is not None:
        latent = {
            ref: (jnp.asarray(vi, dtype=jnp.float64)[None], jnp.asarray(vj, dtype=jnp.float64)[None])
            for ref, (vi, vj) in latent_pointwise.items()
        }
    return gram_values(spec, xi, xj, latent)[0, 0]


def spatiotemporal_spec(
    temporal_variance,
    temporal_lengthscales,
    periodic_variance,
    periodic_lengthscale,
    period,
    spatial_variance=None,
    spatial_lengthscales=None,
    field_ref=None,
    spatial_dims=(0, 1),
    time_dim=2,
):
    """Additive spatio-temporal composition: SE(space) * PER(time) + spatial term.

    The spatial term is SE-ARD when spatial_variance/spatial_lengthscales are
    given, or a factorised Gibbs node referencing field_ref for the
    non-stationary variant.
    """
    temporal = Product(
        se_ard(temporal_variance, temporal_lengthscales, spatial_dims),
        periodic(periodic_variance, periodic_lengthscale, period, time_dim),
    )
    if field_ref is not None:
        spatial = fgk(field_ref, spatial_dims)
    else:
        if spatial_variance is None or spatial_lengthscales is None:
            raise ConfigError("stationary variant needs spatial variance and lengthscales")
        spatial = se_ard(spatial_variance, spatial_lengthscales, spatial_dims)
    return Sum(temporal, spatial)


# ---------------------------------------------------------------------------
# JSON round trip (CLI config format)


def spec_to_json(spec):
    """Serialize a composition tree to plain JSON-compatible structures."""
    if isinstance(spec, SeArd):
        return {
            "type": "se_ard",
            "variance": float(jnp.exp(spec.log_variance)),
            "lengthscales": [float(v) for v in jnp.exp(spec.log_lengthscales)],
            "active_dims": list(spec.active_dims),
        }
    if isinstance(spec, Periodic):
        return {
            "type": "periodic",
            "variance": float(jnp.exp(spec.log_variance)),
            "lengthscale": float(jnp.exp(spec.log_lengthscale)),
            "period": float(jnp.exp(spec.log_period)),
            "active_dims": list(spec.active_dims),
        }
    if isinstance(spec, Fgk):
        return {"type": "fgk", "field": spec.field_ref, "active_dims": list(spec.active_dims)}
    if isinstance(spec, Mgk):
        return {"type": "mgk", "field": spec.field_ref, "active_dims": list(spec.active_dims)}
    if isinstance(spec, (Sum, Product)):
        return {
            "type": "sum" if isinstance(spec, Sum) else "product",
            "children": [spec_to_json(spec.left), spec_to_json(spec.right)],
        }
    raise ConfigError(f"unknown kernel node {type(spec).__name__}")


def _require(mapping, key, path):
    if key not in mapping:
        raise ConfigError(f"{path}: missing required key '{key}'")
    return mapping[key]


def spec_from_json(obj, path="kernel"):
    """Parse a composition tree; errors name the offending config path."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {type(obj).__name__}")
    kind = _require(obj, "type", path)
    try:
        if kind == "se_ard":
            return se_ard(
                _require(obj, "variance", path),
                _require(obj, "lengthscales", path),
                obj.get("active_dims", ()),
            )
        if kind == "periodic":
            dims = obj.get("active_dims", [0])
            return periodic(
                _require(obj, "variance", path),
                _require(obj, "lengthscale", path),
                _require(obj, "period", path),
                dims[0],
            )
        if kind == "fgk":
            return fgk(_require(obj, "field", path), _require(obj, "active_dims", path))
        if kind == "mgk":
            return mgk(_require(obj, "field", path), _require(obj, "active_dims", path))
        if kind in ("sum", "product"):
            children = _require(obj, "children", path)
            if not isinstance(children, list) or len(children) != 2:
                raise ConfigError(f"{path}.children: expected exactly two children")
            left = spec_from_json(children[0], f"{path}.children[0]")
            right = spec_from_json(children[1], f"{path}.children[1]")
            return Sum(left, right) if kind == "sum" else Product(left, right)
    except (NonPositiveLengthscale, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}.type: unknown kernel type '{kind}'")
