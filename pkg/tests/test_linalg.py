import jax.numpy as jnp
import numpy as np
import pytest

from nsgp import linalg as la
from nsgp.exceptions import DimensionMismatch, NotPositiveDefinite

from conftest import rand_spd


def test_cholesky_identity_no_jitter():
    f = la.cholesky_psd(jnp.eye(2), base_jitter=1e-8)
    assert f.jitter_used == 0.0
    np.testing.assert_allclose(np.asarray(f.lower), np.eye(2))


def test_cholesky_rank_one_needs_jitter():
    a = jnp.array([[1.0, 1.0], [1.0, 1.0]])
    f = la.cholesky_psd(a, base_jitter=1e-8)
    assert f.jitter_used > 0.0
    rec = np.asarray(f.lower @ f.lower.T)
    dev = rec - np.asarray(a)
    # only diagonal deviation, equal to the jitter used
    assert abs(dev[0, 1]) < 1e-12 and abs(dev[1, 0]) < 1e-12
    np.testing.assert_allclose(np.diagonal(dev), f.jitter_used, rtol=1e-6)


def test_cholesky_hand_2x2():
    f = la.cholesky_psd(jnp.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(
        np.asarray(f.lower), [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-12
    )


def test_cholesky_rejects_non_spd():
    with pytest.raises(NotPositiveDefinite):
        la.cholesky_psd(-jnp.eye(3), base_jitter=1e-8)


def test_cholesky_rejects_asymmetric():
    with pytest.raises(DimensionMismatch):
        la.cholesky_psd(jnp.array([[1.0, 2.0], [0.0, 1.0]]))


def test_reconstruction_property_random_spd():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n = rng.integers(1, 21)
        a = rand_spd(rng, n)
        f = la.cholesky_psd(jnp.array(a))
        rec = np.asarray(f.lower @ f.lower.T)
        target = a + f.jitter_used * np.eye(n)
        rel = np.linalg.norm(rec - target) / max(np.linalg.norm(target), 1e-300)
        assert rel <= 1e-8
        assert np.all(np.diagonal(np.asarray(f.lower)) > 0)


def test_solve_identity():
    f = la.cholesky_psd(jnp.eye(2))
    b = jnp.array([[3.0], [5.0]])
    np.testing.assert_allclose(np.asarray(la.solve_chol(f, b)), np.asarray(b))


def test_solve_gives_inverse():
    f = la.cholesky_psd(jnp.array([[4.0, 2.0], [2.0, 3.0]]))
    inv = np.asarray(la.solve_chol(f, jnp.eye(2)))
    np.testing.assert_allclose(inv, [[0.375, -0.25], [-0.25, 0.5]], atol=1e-12)


def test_solve_residual_oracle():
    rng = np.random.default_rng(1)
    a = rand_spd(rng, 5)
    b = rng.normal(size=(5, 3))
    f = la.cholesky_psd(jnp.array(a))
    x = np.asarray(la.solve_chol(f, jnp.array(b)))
    resid = (a + f.jitter_used * np.eye(5)) @ x - b
    assert np.linalg.norm(resid) / np.linalg.norm(b) <= 1e-8


def test_solve_dimension_mismatch():
    f = la.cholesky_psd(jnp.eye(3))
    with pytest.raises(DimensionMismatch):
        la.solve_chol(f, jnp.ones((4, 1)))


def test_log_det_examples():
    assert float(la.log_det_chol(la.cholesky_psd(jnp.eye(3)))) == pytest.approx(0.0)
    f = la.cholesky_psd(jnp.diag(jnp.array([2.0, 3.0])))
    assert float(la.log_det_chol(f)) == pytest.approx(np.log(6.0), abs=1e-9)
    f2 = la.cholesky_psd(jnp.array([[4.0, 2.0], [2.0, 3.0]]))
    assert float(la.log_det_chol(f2)) == pytest.approx(np.log(8.0), abs=1e-9)


def test_kron_block_structure():
    a = jnp.array([[1.0, 2.0], [3.0, 4.0]])
    k = np.asarray(la.kron(jnp.eye(2), a))
    np.testing.assert_allclose(k[:2, :2], np.asarray(a))
    np.testing.assert_allclose(k[2:, 2:], np.asarray(a))
    np.testing.assert_allclose(k[:2, 2:], 0.0)

    swap = np.asarray(la.kron(jnp.array([[0.0, 1.0], [1.0, 0.0]]), jnp.eye(2)))
    expected = np.zeros((4, 4))
    expected[:2, 2:] = np.eye(2)
    expected[2:, :2] = np.eye(2)
    np.testing.assert_allclose(swap, expected)


def test_kron_index_identity():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(2, 2))
    b = rng.normal(size=(3, 3))
    k = np.asarray(la.kron(jnp.array(a), jnp.array(b)))
    for i in range(2):
        for j in range(2):
            for p in range(3):
                for q in range(3):
                    assert k[i * 3 + p, j * 3 + q] == pytest.approx(a[i, j] * b[p, q])


def test_kron_mixed_product_property():
    rng = np.random.default_rng(3)
    a, c = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    b, d = rng.normal(size=(3, 2)), rng.normal(size=(2, 4))
    lhs = np.asarray(la.kron(jnp.array(a), jnp.array(b)) @ la.kron(jnp.array(c), jnp.array(d)))
    rhs = np.asarray(la.kron(jnp.array(a @ c), jnp.array(b @ d)))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_kron_inverse_matches_dense_solve():
    rng = np.random.default_rng(4)
    psi = rand_spd(rng, 3)
    k = rand_spd(rng, 4)
    big = np.kron(psi, k)
    v = rng.normal(size=12)
    dense = np.linalg.solve(big, v)
    via_small = np.kron(np.linalg.inv(psi), np.linalg.inv(k)) @ v
    np.testing.assert_allclose(dense, via_small, atol=1e-8)


def test_gaussian_cond_mean_identity():
    rng = np.random.default_rng(5)
    k = rand_spd(rng, 4)
    f = la.cholesky_psd(jnp.array(k), base_jitter=0.0)
    v = rng.normal(size=4)
    out = np.asarray(la.gaussian_cond_mean(jnp.array(k), f, jnp.array(v)))
    np.testing.assert_allclose(out, v, atol=1e-8)


def test_gaussian_cond_mean_zero_cross():
    f = la.cholesky_psd(jnp.eye(3))
    out = np.asarray(la.gaussian_cond_mean(jnp.zeros((2, 3)), f, jnp.ones(3)))
    np.testing.assert_allclose(out, 0.0)


def test_gaussian_cond_mean_dense_oracle():
    # 1D SE kernel, 3 train points, midpoint query
    x = np.array([0.0, 1.0, 2.0])
    xs = 0.5
    k = np.exp(-0.5 * (x[:, None] - x[None, :]) ** 2)
    ks = np.exp(-0.5 * (xs - x) ** 2)[None, :]
    y = np.array([0.3, -1.2, 0.7])
    f = la.cholesky_psd(jnp.array(k))
    mine = float(la.gaussian_cond_mean(jnp.array(ks), f, jnp.array(y))[0])
    direct = float((ks @ np.linalg.inv(k + f.jitter_used * np.eye(3)) @ y)[0])
    assert mine == pytest.approx(direct, abs=1e-10)


def test_gaussian_cond_mean_dimension_mismatch():
    f = la.cholesky_psd(jnp.eye(3))
    with pytest.raises(DimensionMismatch):
        la.gaussian_cond_mean(jnp.ones((2, 4)), f, jnp.ones(3))
