"""Dense linear-algebra primitives with the jitter policy the rest of the library relies on.

Two factorization paths coexist: :func:`cholesky_psd` retries with escalating
diagonal jitter and is meant for eager code (prediction, tests), while
:func:`chol_lower` adds a fixed jitter and stays traceable inside jitted
objectives, where a failed factorization surfaces as NaN.
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl

from .exceptions import DimensionMismatch, NotPositiveDefinite

# Diagonal offsets: kernel Gram matrices flatten easily when lengthscale
# fields grow, latent-side algebra (Psi, conditional covariances) is tiny
# and well scaled, and the inducing Gram in the collapsed bound must stay
# within 1e-6 of the exact marginal likelihood at Z = X.
KERNEL_JITTER = 1e-6
LATENT_JITTER = 1e-8
INDUCING_JITTER = 1e-10

_MAX_RETRIES = 6
_SYM_TOL = 1e-10


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor of A + jitter_used * I."""

    lower: jnp.ndarray
    jitter_used: float = dataclasses.field(metadata=dict(static=True))


def _check_square_symmetric(a):
    a = jnp.asarray(a, dtype=jnp.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(jnp.max(jnp.abs(a))))
    if float(jnp.max(jnp.abs(a - a.T))) > _SYM_TOL * scale:
        raise DimensionMismatch("matrix is not symmetric to tolerance 1e-10")
    return 0.5 * (a + a.T)


def chol_lower(a, jitter=0.0):
    """Lower Cholesky of sym(a) + jitter*I; traceable, NaN on failure."""
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    return jnp.linalg.cholesky(a + jitter * jnp.eye(n, dtype=a.dtype))


def cholesky_psd(a, base_jitter=KERNEL_JITTER) -> CholeskyFactor:
    """Factor a symmetric PSD matrix, escalating jitter geometrically on failure.

    The first attempt adds no jitter; subsequent attempts add
    base_jitter * 10**k for k = 0..5. Raises NotPositiveDefinite once the
    ladder is exhausted.
    """
    a = _check_square_symmetric(a)
    n = a.shape[0]
    eye = jnp.eye(n, dtype=a.dtype)
    jitter = 0.0
    for attempt in range(_MAX_RETRIES + 1):
        chol = jnp.linalg.cholesky(a + jitter * eye)
        if bool(jnp.all(jnp.isfinite(chol))):
            return CholeskyFactor(lower=chol, jitter_used=jitter)
        jitter = base_jitter if attempt == 0 else jitter * 10.0
    raise NotPositiveDefinite(
        f"Cholesky failed for {n}x{n} matrix after jitter {jitter / 10.0:g}"
    )


def solve_chol(factor: CholeskyFactor, b):
    """Solve (A + jitter*I) X = B with two triangular solves."""
    b = jnp.asarray(b, dtype=jnp.float64)
    n = factor.lower.shape[0]
    if b.shape[0] != n:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, factor is {n}x{n}")
    return jsl.cho_solve((factor.lower, True), b)


def log_det_chol(factor: CholeskyFactor):
    """log det of the factored matrix: 2 * sum(log diag L)."""
    return 2.0 * jnp.sum(jnp.log(jnp.diagonal(factor.lower)))


def kron(a, b):
    """Kronecker product with standard block layout."""
    return jnp.kron(jnp.asarray(a, dtype=jnp.float64), jnp.asarray(b, dtype=jnp.float64))


def gaussian_cond_mean(k_star_x, factor_xx: CholeskyFactor, values):
    """Conditional-Gaussian expectation K_*x (K_xx)^-1 values."""
    k_star_x = jnp.asarray(k_star_x, dtype=jnp.float64)
    if k_star_x.shape[-1] != factor_xx.lower.shape[0]:
        raise DimensionMismatch(
            f"cross-covariance has {k_star_x.shape[-1]} columns, "
            f"factor is {factor_xx.lower.shape[0]}x{factor_xx.lower.shape[0]}"
        )
    return k_star_x @ solve_chol(factor_xx, values)
