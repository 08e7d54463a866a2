import dataclasses

import jax.numpy as jnp
import numpy as np
import pytest
import scipy.stats

from nsgp import fields as fl
from nsgp import kernels as kn
from nsgp import linalg as la
from nsgp.exceptions import ConfigError

from conftest import rand_spd


def _lengthscale_field(rng, n=6, k=2, mu=0.2):
    anchors = jnp.array(rng.uniform(-1.0, 1.0, size=(n, k)))
    prior = kn.se_ard(1.0, [0.6] * k, tuple(range(k)))
    logv = jnp.array(rng.normal(0.0, 0.4, size=(n, k)))
    return fl.make_lengthscale_field(anchors, logv, mu, prior)


def _matrix_field(rng, n=5, k=2):
    anchors = jnp.array(rng.uniform(-1.0, 1.0, size=(n, k)))
    rk = kn.se_ard(1.0, [0.7] * k, tuple(range(k)))
    h = jnp.array(rng.normal(0.0, 0.5, size=(n, k)))
    psi = jnp.array(rand_spd(rng, k, scale=0.3))
    return fl.make_matrix_field(anchors, h, jnp.full(k, 0.15), psi, rk)


# ---------------------------------------------------------------------------
# sigma_from_h


def test_sigma_from_h_zero_row():
    s = np.asarray(fl.sigma_from_h(jnp.zeros(2), jnp.ones(2)))
    sp0 = np.log(2.0)
    np.testing.assert_allclose(s, [[sp0 + 1.0, sp0], [sp0, sp0 + 1.0]], atol=1e-12)
    assert np.linalg.eigvalsh(s).min() > 0


def test_sigma_from_h_unit_row():
    s = np.asarray(fl.sigma_from_h(jnp.array([1.0, 0.0]), jnp.array([0.1, 0.1])))
    sp0, sp1 = np.log(2.0), np.log(1.0 + np.e)
    np.testing.assert_allclose(
        s, [[sp1 + 0.1, sp0], [sp0, sp0 + 0.1]], atol=1e-12
    )
    assert s[0, 0] == pytest.approx(1.31326 + 0.1, abs=1e-5)


def test_sigma_from_h_always_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = rng.normal(size=rng.integers(1, 5))
        s = np.asarray(fl.sigma_from_h(jnp.array(h), jnp.full(h.size, 0.2)))
        np.testing.assert_array_equal(s, s.T)


def test_sigma_from_h_psd_without_jitter():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = rng.integers(1, 5)
        h = rng.normal(size=d)
        h = h / max(np.linalg.norm(h) / 10.0, 1.0)  # ||h|| <= 10
        omega = rng.uniform(0.01, 1.0, size=d)
        s = fl.sigma_from_h(jnp.array(h), jnp.array(omega))
        factor = la.cholesky_psd(s, la.LATENT_JITTER)
        assert factor.jitter_used == 0.0


# ---------------------------------------------------------------------------
# matrix-normal log density


def test_matnorm_standard_normal():
    v = float(fl.matnorm_logpdf(jnp.zeros((1, 1)), jnp.eye(1), jnp.eye(1)))
    assert v == pytest.approx(-0.5 * np.log(2.0 * np.pi), abs=1e-12)


def test_matnorm_matches_kron_vec_density():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n, d = rng.integers(1, 7), rng.integers(1, 4)
        k = rand_spd(rng, n)
        psi = rand_spd(rng, d)
        h = rng.normal(size=(n, d))
        mine = float(fl.matnorm_logpdf(jnp.array(h), jnp.array(k), jnp.array(psi)))
        dense = scipy.stats.multivariate_normal(
            mean=np.zeros(n * d), cov=np.kron(psi, k)
        ).logpdf(h.T.reshape(-1))
        assert mine == pytest.approx(dense, abs=1e-8)


def test_matnorm_diagonal_psi_factorizes_over_columns():
    rng = np.random.default_rng(3)
    n, d = 5, 3
    k = rand_spd(rng, n)
    psis = np.diag(rng.uniform(0.5, 2.0, size=d))
    h = rng.normal(size=(n, d))
    mine = float(fl.matnorm_logpdf(jnp.array(h), jnp.array(k), jnp.array(psis)))
    per_col = sum(
        scipy.stats.multivariate_normal(mean=np.zeros(n), cov=psis[j, j] * k).logpdf(h[:, j])
        for j in range(d)
    )
    assert mine == pytest.approx(per_col, abs=1e-10)


# ---------------------------------------------------------------------------
# lengthscale-field extrapolation


def test_extrapolate_lengthscale_identity_at_anchors():
    rng = np.random.default_rng(4)
    field = _lengthscale_field(rng)
    out = np.asarray(fl.extrapolate_lengthscale(field, field.anchors))
    np.testing.assert_allclose(out, np.exp(np.asarray(field.log_values)), atol=1e-6)


def test_extrapolate_lengthscale_prior_reversion():
    rng = np.random.default_rng(5)
    field = _lengthscale_field(rng, mu=0.3)
    far = np.asarray(fl.extrapolate_lengthscale(field, jnp.array([[40.0, -35.0]])))
    np.testing.assert_allclose(far, np.exp(0.3), rtol=1e-9)


def test_extrapolate_lengthscale_dense_oracle():
    anchors = jnp.array([[0.0], [1.0], [2.0]])
    prior = kn.se_ard(1.0, [1.0], (0,))
    logv = jnp.array([[0.1], [0.5], [-0.2]])
    field = fl.make_lengthscale_field(anchors, logv, 0.0, prior)
    k = np.asarray(kn.gram_values(prior, anchors)) + la.LATENT_JITTER * np.eye(3)
    ks = np.asarray(kn.gram_values(prior, jnp.array([[0.5]]), anchors))
    expected = np.exp(ks @ np.linalg.inv(k) @ np.array([0.1, 0.5, -0.2]))
    got = np.asarray(fl.extrapolate_lengthscale(field, jnp.array([[0.5]])))
    assert got[0, 0] == pytest.approx(expected[0], abs=1e-10)


def test_extrapolate_lengthscale_strictly_positive():
    rng = np.random.default_rng(6)
    field = _lengthscale_field(rng, mu=-3.0)
    wild = dataclasses.replace(field, log_values=field.log_values * 40.0)  # beyond clamp
    xs = jnp.array(rng.uniform(-50.0, 50.0, size=(20, 2)))
    out = np.asarray(fl.extrapolate_lengthscale(wild, xs))
    assert np.all(out > 0.0) and np.all(np.isfinite(out))


# ---------------------------------------------------------------------------
# matrix-field extrapolation and sampling


def test_extrapolate_h_identity_at_anchors():
    rng = np.random.default_rng(7)
    field = _matrix_field(rng)
    out = np.asarray(fl.extrapolate_h(field, field.anchors))
    np.testing.assert_allclose(out, np.asarray(field.h), atol=1e-5)


def test_extrapolate_h_single_anchor_row():
    rng = np.random.default_rng(8)
    field = _matrix_field(rng)
    one = np.asarray(fl.extrapolate_h(field, field.anchors[2:3]))
    np.testing.assert_allclose(one[0], np.asarray(field.h)[2], atol=1e-5)


def test_extrapolate_h_reduced_equals_kron():
    rng = np.random.default_rng(9)
    for _ in range(20):
        field = _matrix_field(rng, n=int(rng.integers(2, 6)), k=int(rng.integers(1, 4)))
        xs = jnp.array(rng.uniform(-1.5, 1.5, size=(3, field.anchors.shape[1])))
        a = np.asarray(fl.extrapolate_h(field, xs))
        b = np.asarray(fl.extrapolate_h_kron(field, xs))
        np.testing.assert_allclose(a, b, atol=1e-8)


def test_sample_conditional_h_collapses_at_anchors():
    rng = np.random.default_rng(10)
    field = _matrix_field(rng)
    draws = np.asarray(fl.sample_conditional_h(field, field.anchors, 6, seed=0))
    np.testing.assert_allclose(draws, np.asarray(field.h)[None], atol=1e-3)


def test_sample_conditional_h_mean_convergence():
    rng = np.random.default_rng(11)
    field = _matrix_field(rng)
    xs = jnp.array(rng.uniform(-1.0, 1.0, size=(4, 2)))
    draws = np.asarray(fl.sample_conditional_h(field, xs, 10000, seed=1))
    mean = np.asarray(fl.extrapolate_h(field, xs))
    stderr = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 3.0 * stderr + 1e-12)


def test_sample_conditional_h_deterministic():
    rng = np.random.default_rng(12)
    field = _matrix_field(rng)
    xs = jnp.array(rng.uniform(-1.0, 1.0, size=(3, 2)))
    a = np.asarray(fl.sample_conditional_h(field, xs, 5, seed=42))
    b = np.asarray(fl.sample_conditional_h(field, xs, 5, seed=42))
    np.testing.assert_array_equal(a, b)


def test_sample_conditional_h_rejects_zero_count():
    rng = np.random.default_rng(13)
    field = _matrix_field(rng)
    with pytest.raises(ConfigError):
        fl.sample_conditional_h(field, field.anchors, 0, seed=0)


# ---------------------------------------------------------------------------
# prior-predictive sampling


def test_sample_prior_stationary_moment():
    x = jnp.linspace(0.0, 1.0, 25)[:, None]
    spec = kn.se_ard(2.0, [0.3], (0,))
    draws = fl.sample_prior_functions(spec, x, 1000, seed=0)
    assert draws.functions.shape == (1000, 25)
    assert draws.functions.var() == pytest.approx(2.0, rel=0.1)


def test_sample_prior_fgk_emits_fields():
    x = jnp.linspace(0.0, 1.0, 30)[:, None]
    draws = fl.sample_prior_functions(kn.fgk("f", (0,)), x, 3, seed=1)
    assert draws.functions.shape == (3, 30)
    assert draws.fields["f"].shape == (3, 30, 1)
    assert np.all(draws.fields["f"] > 0)


def test_sample_prior_count_zero():
    x = jnp.linspace(0.0, 1.0, 10)[:, None]
    draws = fl.sample_prior_functions(kn.se_ard(1.0, [0.2], (0,)), x, 0, seed=0)
    assert draws.functions.shape == (0, 10)


def test_sample_prior_rejects_large_grid():
    x = jnp.linspace(0.0, 1.0, 2001)[:, None]
    with pytest.raises(ConfigError):
        fl.sample_prior_functions(kn.se_ard(1.0, [0.2], (0,)), x, 1, seed=0)


def test_sample_prior_deterministic():
    x = jnp.linspace(0.0, 1.0, 15)[:, None]
    a = fl.sample_prior_functions(kn.mgk("m", (0,)), x, 2, seed=9)
    b = fl.sample_prior_functions(kn.mgk("m", (0,)), x, 2, seed=9)
    np.testing.assert_array_equal(a.functions, b.functions)


# ---------------------------------------------------------------------------
# serialization


def test_field_json_round_trip():
    rng = np.random.default_rng(14)
    for field in (_lengthscale_field(rng), _matrix_field(rng)):
        blob = fl.field_to_json(field)
        back = fl.field_from_json(blob)
        if isinstance(field, fl.LengthscaleField):
            np.testing.assert_allclose(np.asarray(back.log_values), np.asarray(field.log_values))
        else:
            np.testing.assert_allclose(np.asarray(back.h), np.asarray(field.h))
            np.testing.assert_allclose(
                np.asarray(fl.omega_of(back)), np.asarray(fl.omega_of(field)), atol=1e-12
            )
