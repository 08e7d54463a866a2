"""Gradient-based maximization of the model objectives, with gradient verification.

Callers hand over a scalar function of a parameter pytree to *minimize*
(model code negates its objectives). Gradients are exact reverse-mode
gradients; grad_check compares them against central finite differences
and is the main correctness gate for every objective in the library.
"""

from __future__ import annotations

import dataclasses
import time

import jax
import jax.flatten_util
import jax.numpy as jnp
import numpy as np
import scipy.optimize

from .exceptions import DivergedObjective, NonFiniteGradient

_WINDOW = 10


@dataclasses.dataclass(frozen=True)
class OptimConfig:
    algorithm: str = "adam"        # "adam" | "lbfgs"
    step_size: float = 0.01
    max_iters: int = 2000
    convergence_tol: float = 1e-9  # relative objective change over a 10-iter window
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.algorithm not in ("adam", "lbfgs"):
            raise ValueError(f"unknown algorithm '{self.algorithm}'")


@dataclasses.dataclass
class TrainTrace:
    objective_per_iter: np.ndarray
    grad_norm_per_iter: np.ndarray
    wall_time: float


def gradient(objective, params):
    """Exact reverse-mode gradient of a scalar objective at params."""
    g = jax.grad(objective)(params)
    flat, _ = jax.flatten_util.ravel_pytree(g)
    if not bool(jnp.all(jnp.isfinite(flat))):
        raise NonFiniteGradient("gradient contains NaN or infinity")
    return g


def _tree_norm(tree):
    flat, _ = jax.flatten_util.ravel_pytree(tree)
    return float(jnp.linalg.norm(flat))


def _converged(history, tol):
    if len(history) <= _WINDOW or tol <= 0:
        return False
    past, now = history[-1 - _WINDOW], history[-1]
    return abs(now - past) < tol * max(1.0, abs(past))


def _minimize_adam(objective, params0, config, project):
    value_and_grad = jax.jit(jax.value_and_grad(objective))

    @jax.jit
    def step(params, m, v, t, g):
        m = jax.tree_util.tree_map(lambda a, b: 0.9 * a + 0.1 * b, m, g)
        v = jax.tree_util.tree_map(lambda a, b: 0.999 * a + 0.001 * b * b, v, g)
        mhat = jax.tree_util.tree_map(lambda a: a / (1.0 - 0.9**t), m)
        vhat = jax.tree_util.tree_map(lambda a: a / (1.0 - 0.999**t), v)
        params = jax.tree_util.tree_map(
            lambda p, mh, vh: p - config.step_size * mh / (jnp.sqrt(vh) + 1e-8),
            params, mhat, vhat,
        )
        return params, m, v

    params = params0
    m = jax.tree_util.tree_map(jnp.zeros_like, params)
    v = jax.tree_util.tree_map(jnp.zeros_like, params)
    history, grad_norms = [], []
    best_value, best_params = np.inf, params
    for t in range(1, config.max_iters + 1):
        value, g = value_and_grad(params)
        value = float(value)
        if not np.isfinite(value):
            raise DivergedObjective(f"objective became non-finite at iteration {t}")
        history.append(value)
        grad_norms.append(_tree_norm(g))
        if value < best_value:
            best_value, best_params = value, params
        params, m, v = step(params, m, v, t, g)
        if project is not None:
            params = project(params)
        if _converged(history, config.convergence_tol):
            break
    return best_params, history, grad_norms


def _minimize_lbfgs(objective, params0, config, project):
    flat0, unravel = jax.flatten_util.ravel_pytree(params0)
    value_and_grad = jax.jit(jax.value_and_grad(objective))
    state = {"best": (np.inf, np.asarray(flat0)), "last": (np.nan, np.nan)}
    history, grad_norms = [], []

    def fun(x):
        value, g = value_and_grad(unravel(jnp.asarray(x)))
        gflat, _ = jax.flatten_util.ravel_pytree(g)
        value = float(value)
        if not np.isfinite(value):
            raise DivergedObjective("objective became non-finite during line search")
        if value < state["best"][0]:
            state["best"] = (value, np.asarray(x))
        state["last"] = (value, float(jnp.linalg.norm(gflat)))
        return value, np.asarray(gflat)

    def callback(_xk):
        history.append(state["last"][0])
        grad_norms.append(state["last"][1])
        if _converged(history, config.convergence_tol):
            raise StopIteration

    try:
        scipy.optimize.minimize(
            fun, np.asarray(flat0), jac=True, method="L-BFGS-B",
            options={"maxiter": config.max_iters}, callback=callback,
        )
    except StopIteration:
        pass
    if not history:  # converged before the first callback fired
        value, _ = fun(state["best"][1])
        history.append(value)
        grad_norms.append(state["last"][1])
    if project is not None:
        return project(unravel(jnp.asarray(state["best"][1]))), history, grad_norms
    return unravel(jnp.asarray(state["best"][1])), history, grad_norms


def minimize(objective, params0, config: OptimConfig, project=None):
    """Minimize a scalar function of a parameter pytree.

    Returns (best-seen parameters, TrainTrace). Terminates on max_iters or
    when the relative objective change over a 10-iteration window drops
    below convergence_tol. project, when given, is applied to the
    parameters after every step (used to clamp inducing locations).
    """
    start = time.perf_counter()
    v0 = float(objective(params0))
    if not np.isfinite(v0):
        raise DivergedObjective("initial objective is not finite")
    if config.algorithm == "adam":
        best, history, grad_norms = _minimize_adam(objective, params0, config, project)
    else:
        best, history, grad_norms = _minimize_lbfgs(objective, params0, config, project)
    trace = TrainTrace(
        objective_per_iter=np.asarray(history, dtype=np.float64),
        grad_norm_per_iter=np.asarray(grad_norms, dtype=np.float64),
        wall_time=time.perf_counter() - start,
    )
    return best, trace


@dataclasses.dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic and central-difference gradients."""

    max_rel_error: float
    passed: bool
    rel_errors: np.ndarray
    labels: list
    analytic: np.ndarray
    numeric: np.ndarray

    def worst(self, k=5):
        order = np.argsort(-self.rel_errors)[:k]
        return [
            (self.labels[i], float(self.analytic[i]), float(self.numeric[i]),
             float(self.rel_errors[i]))
            for i in order
        ]


def _leaf_labels(params):
    labels = []
    paths = jax.tree_util.tree_flatten_with_path(params)[0]
    for path, leaf in paths:
        name = jax.tree_util.keystr(path)
        size = int(np.size(leaf))
        if size == 1:
            labels.append(name)
        else:
            labels.extend(f"{name}[{i}]" for i in range(size))
    return labels


_JIT_CACHE = {}


def _jitted_pair(objective):
    # keyed on the function object so checks that reuse one objective over
    # many instances (the acceptance gradient gate) compile exactly once
    if objective not in _JIT_CACHE:
        if len(_JIT_CACHE) > 128:
            _JIT_CACHE.clear()
        _JIT_CACHE[objective] = (jax.jit(objective), jax.jit(jax.grad(objective)))
    return _JIT_CACHE[objective]


def grad_check(objective, params, h=1e-5, rel_tol=1e-3):
    """Compare the reverse-mode gradient against central finite differences.

    The relative error per coordinate uses max(|analytic|, |numeric|, 1e-8)
    as denominator; the check passes iff the maximum is within rel_tol.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    flat, unravel = jax.flatten_util.ravel_pytree(params)
    fun, grad = _jitted_pair(objective)
    gflat, _ = jax.flatten_util.ravel_pytree(grad(params))
    analytic = np.asarray(gflat)
    numeric = np.zeros_like(analytic)
    flat = np.asarray(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        numeric[i] = (
            float(fun(unravel(jnp.asarray(flat + e))))
            - float(fun(unravel(jnp.asarray(flat - e))))
        ) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        passed=bool(rel.size == 0 or rel.max() <= rel_tol),
        rel_errors=rel,
        labels=_leaf_labels(params),
        analytic=analytic,
        numeric=numeric,
    )
