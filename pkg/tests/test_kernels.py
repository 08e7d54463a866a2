import json

import jax.numpy as jnp
import numpy as np
import pytest

from nsgp import kernels as kn
from nsgp import linalg as la
from nsgp.exceptions import (
    ConfigError,
    DimensionMismatch,
    GridTooCoarse,
    MissingLatentContext,
    NonPositiveLengthscale,
)

from conftest import rand_spd


def test_se_ard_zero_distance():
    assert float(kn.k_se_ard([0.1, 0.2], [0.1, 0.2], 2.0, [1.0, 3.0])) == pytest.approx(2.0)


def test_se_ard_scalar_value():
    v = float(kn.k_se_ard([0.0], [np.sqrt(2.0)], 1.0, [1.0]))
    assert v == pytest.approx(np.exp(-1.0), abs=1e-12)


def test_se_ard_pruning_limit():
    v = float(kn.k_se_ard([0.0, 0.0], [0.0, 7.0], 1.5, [1.0, 1e6]))
    assert v == pytest.approx(1.5, rel=1e-9)


def test_se_ard_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        kn.k_se_ard([0.0, 1.0], [0.0], 1.0, [1.0, 1.0])


def test_periodic_values():
    assert float(kn.k_periodic(0.3, 0.3, 2.5, 1.0, 12.0)) == pytest.approx(2.5)
    assert float(kn.k_periodic(0.0, 12.0, 2.5, 1.0, 12.0)) == pytest.approx(2.5, abs=1e-12)
    assert float(kn.k_periodic(0.0, 6.0, 1.0, 1.0, 12.0)) == pytest.approx(np.exp(-2.0), abs=1e-12)


def test_fgk_stationary_reduction_pointwise():
    rng = np.random.default_rng(0)
    for _ in range(20):
        xi, xj = rng.normal(size=2), rng.normal(size=2)
        ell = rng.uniform(0.3, 2.0, size=2)
        f = float(kn.k_fgk(xi, xj, ell, ell))
        s = float(kn.k_se_ard(xi, xj, 1.0, ell))
        assert f == pytest.approx(s, abs=1e-15)


def test_fgk_scalar_value():
    v = float(kn.k_fgk([0.0], [1.0], [1.0], [np.sqrt(3.0)]))
    expected = np.sqrt(2.0 * np.sqrt(3.0) / 4.0) * np.exp(-0.25)
    assert v == pytest.approx(expected, abs=1e-12)
    assert v == pytest.approx(0.72476, abs=1e-5)


def test_fgk_decays_below_one():
    assert float(kn.k_fgk([0.0], [0.5], [1.0], [1.0])) < 1.0


def test_fgk_rejects_nonpositive_lengthscale():
    with pytest.raises(NonPositiveLengthscale):
        kn.k_fgk([0.0], [1.0], [0.0], [1.0])


def test_mgk_identity_sigma():
    v = float(kn.k_mgk([0.0, 0.0], [1.0, 0.0], np.eye(2), np.eye(2)))
    assert v == pytest.approx(np.exp(-0.5), abs=1e-12)


def test_mgk_equals_one_at_zero_distance():
    rng = np.random.default_rng(1)
    s = rand_spd(rng, 3)
    x = rng.normal(size=3)
    assert float(kn.k_mgk(x, x, s, s)) == pytest.approx(1.0, abs=1e-12)


def test_mgk_diagonal_reduces_to_fgk():
    rng = np.random.default_rng(2)
    for _ in range(100):
        d = rng.integers(1, 4)
        xi, xj = rng.normal(size=d), rng.normal(size=d)
        li, lj = rng.uniform(0.2, 3.0, size=d), rng.uniform(0.2, 3.0, size=d)
        m = float(kn.k_mgk(xi, xj, np.diag(li**2), np.diag(lj**2)))
        f = float(kn.k_fgk(xi, xj, li, lj))
        assert abs(m - f) <= 1e-12


def test_prop2_trivial_same_point():
    v = kn.verify_prop2_integral([0.3], [0.3], [[0.7]], [[0.7]])
    assert v == pytest.approx(1.0, abs=1e-9)


def test_prop2_hand_value_1d():
    v = kn.verify_prop2_integral([0.0], [1.0], [[1.0]], [[1.0]])
    assert v == pytest.approx(np.exp(-0.5), abs=1e-9)


def test_prop2_matches_adopted_exponent_2d():
    rng = np.random.default_rng(3)
    for _ in range(5):
        si = rand_spd(rng, 2, scale=0.5)
        sj = rand_spd(rng, 2, scale=0.5)
        xi, xj = rng.normal(size=2) * 0.5, rng.normal(size=2) * 0.5
        v = kn.verify_prop2_integral(xi, xj, si, sj)
        closed = np.exp(-(xi - xj) @ np.linalg.solve(si + sj, xi - xj))
        assert v == pytest.approx(closed, abs=1e-6)


def test_prop2_grid_too_coarse():
    with pytest.raises(GridTooCoarse):
        kn.verify_prop2_integral([0.0], [1.0], [[1.0]], [[1.0]], n_grid=4)


def test_prop2_rejects_narrow_span():
    with pytest.raises(ConfigError):
        kn.verify_prop2_integral([0.0], [1.0], [[1.0]], [[1.0]], span_sigmas=4.0)


def _st_spec():
    return kn.spatiotemporal_spec(
        1.2, [0.8, 1.1], 0.9, 1.4, 12.0, spatial_variance=0.7, spatial_lengthscales=[1.0, 2.0]
    )


def test_spatiotemporal_diagonal():
    spec = _st_spec()
    x = jnp.array([0.3, -0.2, 5.0])
    v = float(kn.k_spatiotemporal(x, x, spec))
    assert v == pytest.approx(1.2 * 0.9 + 0.7, abs=1e-12)


def test_spatiotemporal_full_period():
    spec = _st_spec()
    xi = jnp.array([0.3, -0.2, 0.0])
    xj = jnp.array([0.3, -0.2, 12.0])
    v = float(kn.k_spatiotemporal(xi, xj, spec))
    assert v == pytest.approx(1.2 * 0.9 + 0.7, abs=1e-12)


def test_spatiotemporal_compositional_oracle():
    spec = _st_spec()
    rng = np.random.default_rng(4)
    for _ in range(10):
        xi, xj = rng.normal(size=3), rng.normal(size=3)
        direct = float(
            kn.k_se_ard(xi[:2], xj[:2], 1.2, [0.8, 1.1])
            * kn.k_periodic(xi[2], xj[2], 0.9, 1.4, 12.0)
            + kn.k_se_ard(xi[:2], xj[:2], 0.7, [1.0, 2.0])
        )
        assert float(kn.k_spatiotemporal(xi, xj, spec)) == pytest.approx(direct, abs=1e-12)


def test_spatiotemporal_nonstationary_variant():
    spec = kn.spatiotemporal_spec(1.2, [0.8, 1.1], 0.9, 1.4, 12.0, field_ref="f")
    rng = np.random.default_rng(5)
    xi, xj = rng.normal(size=3), rng.normal(size=3)
    li, lj = rng.uniform(0.4, 1.5, size=2), rng.uniform(0.4, 1.5, size=2)
    v = float(kn.k_spatiotemporal(xi, xj, spec, latent_pointwise={"f": (li, lj)}))
    direct = float(
        kn.k_se_ard(xi[:2], xj[:2], 1.2, [0.8, 1.1])
        * kn.k_periodic(xi[2], xj[2], 0.9, 1.4, 12.0)
        + kn.k_fgk(xi[:2], xj[:2], li, lj)
    )
    assert v == pytest.approx(direct, abs=1e-12)


def _random_spec_and_latent(rng, n_inputs, d=3):
    """Random composition tree over d-dim inputs plus matching latent context."""
    x = rng.normal(size=(n_inputs, d))
    ell = rng.uniform(0.3, 2.0, size=(n_inputs, 2))
    h = rng.normal(0.0, 0.4, size=(n_inputs, 2))
    from nsgp import fields as fl

    sig = np.asarray(fl.sigmas_from_rows(jnp.array(h), jnp.array([0.2, 0.3])))
    specs = [
        kn.se_ard(1.3, [0.8, 1.2], (0, 1)),
        kn.periodic(0.8, 1.1, 3.0, 2),
        kn.fgk("l", (0, 1)),
        kn.mgk("m", (0, 1)),
        kn.Sum(kn.se_ard(0.5, [1.0], (2,)), kn.fgk("l", (0, 1))),
        kn.Product(kn.se_ard(0.5, [1.0], (2,)), kn.mgk("m", (0, 1))),
    ]
    latent = {"l": (jnp.array(ell), jnp.array(ell)), "m": (jnp.array(sig), jnp.array(sig))}
    return x, specs, latent


def test_gram_symmetry_all_variants():
    rng = np.random.default_rng(6)
    x, specs, latent = _random_spec_and_latent(rng, 12)
    for spec in specs:
        g = kn.gram(spec, jnp.array(x), latent=latent)
        assert g.symmetric
        vals = np.asarray(g.values)
        assert np.max(np.abs(vals - vals.T)) <= 1e-12


def test_gram_psd_before_jitter():
    rng = np.random.default_rng(7)
    for trial in range(6):
        n = rng.integers(5, 31)
        x, specs, latent = _random_spec_and_latent(rng, n)
        for spec in specs:
            vals = np.asarray(kn.gram(spec, jnp.array(x), latent=latent).values)
            assert np.linalg.eigvalsh(vals).min() >= -1e-8


def test_gram_diag_matches_dense():
    rng = np.random.default_rng(8)
    x, specs, latent = _random_spec_and_latent(rng, 9)
    for spec in specs:
        dense = np.diagonal(np.asarray(kn.gram(spec, jnp.array(x), latent=latent).values))
        diag = np.asarray(kn.gram_diag(spec, jnp.array(x), latent=latent))
        np.testing.assert_allclose(dense, diag, atol=1e-12)


def test_gram_sum_product_composition_exact():
    rng = np.random.default_rng(9)
    x, _, latent = _random_spec_and_latent(rng, 8)
    left = kn.se_ard(1.3, [0.8, 1.2], (0, 1))
    right = kn.fgk("l", (0, 1))
    gl = np.asarray(kn.gram(left, jnp.array(x)).values)
    gr = np.asarray(kn.gram(right, jnp.array(x), latent=latent).values)
    gsum = np.asarray(kn.gram(kn.Sum(left, right), jnp.array(x), latent=latent).values)
    gprod = np.asarray(kn.gram(kn.Product(left, right), jnp.array(x), latent=latent).values)
    np.testing.assert_array_equal(gsum, gl + gr)
    np.testing.assert_array_equal(gprod, gl * gr)


def test_gram_se_psd_after_jitter():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(5, 2))
    g = kn.gram(kn.se_ard(1.0, [1.0, 1.0], (0, 1)), jnp.array(x))
    la.cholesky_psd(g.values)  # must not raise


def test_gram_fgk_constant_field_equals_se():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(10, 2))
    ell = np.array([0.7, 1.4])
    field_vals = jnp.array(np.tile(ell, (10, 1)))
    gf = np.asarray(
        kn.gram(kn.fgk("l", (0, 1)), jnp.array(x), latent={"l": (field_vals, field_vals)}).values
    )
    gs = np.asarray(kn.gram(kn.se_ard(1.0, ell, (0, 1)), jnp.array(x)).values)
    assert np.max(np.abs(gf - gs)) <= 1e-12


def test_gram_missing_latent_context():
    with pytest.raises(MissingLatentContext):
        kn.gram(kn.fgk("nope", (0,)), jnp.zeros((3, 1)))


def test_gram_cross_not_symmetric_flag():
    x1, x2 = jnp.zeros((3, 1)), jnp.ones((2, 1))
    g = kn.gram(kn.se_ard(1.0, [1.0], (0,)), x1, x2)
    assert not g.symmetric
    assert g.values.shape == (3, 2)


def test_spec_json_round_trip():
    spec = kn.Sum(
        kn.Product(kn.se_ard(1.2, [0.5, 2.0], (0, 1)), kn.periodic(0.9, 1.1, 12.0, 2)),
        kn.mgk("h", (0, 1)),
    )
    blob = json.dumps(kn.spec_to_json(spec))
    spec2 = kn.spec_from_json(json.loads(blob))
    rng = np.random.default_rng(12)
    x = rng.normal(size=(6, 3))
    h = rng.normal(0, 0.3, size=(6, 2))
    from nsgp import fields as fl

    sig = fl.sigmas_from_rows(jnp.array(h), jnp.array([0.2, 0.2]))
    latent = {"h": (sig, sig)}
    g1 = np.asarray(kn.gram(spec, jnp.array(x), latent=latent).values)
    g2 = np.asarray(kn.gram(spec2, jnp.array(x), latent=latent).values)
    np.testing.assert_array_equal(g1, g2)


def test_spec_json_errors_name_path():
    with pytest.raises(ConfigError, match="kernel.children\\[1\\]"):
        kn.spec_from_json(
            {
                "type": "sum",
                "children": [
                    {"type": "se_ard", "variance": 1.0, "lengthscales": [1.0], "active_dims": [0]},
                    {"type": "se_ard", "lengthscales": [1.0]},
                ],
            }
        )
    with pytest.raises(ConfigError, match="unknown kernel type"):
        kn.spec_from_json({"type": "matern"})


def test_constructor_validation():
    with pytest.raises(ConfigError):
        kn.se_ard(-1.0, [1.0], (0,))
    with pytest.raises(NonPositiveLengthscale):
        kn.se_ard(1.0, [0.0], (0,))
    with pytest.raises(ConfigError):
        kn.se_ard(1.0, [1.0, 1.0], (0, 0))
    with pytest.raises(ConfigError):
        kn.periodic(1.0, 1.0, -3.0)
