import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from norank.tensor import (
    SingularSystemError,
    fold,
    frobenius_norm,
    khatri_rao,
    least_squares,
    multi_mode_product,
    nmode_product,
    read_dtn1,
    truncated_svd,
    unfold,
    write_dtn1,
)

shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple)


def _unfold_oracle(t, mode):
    """Place each element by the declared column order, one index at a time."""
    others = [m for m in range(t.ndim) if m != mode]
    out = np.zeros((t.shape[mode], t.size // t.shape[mode]))
    for idx in np.ndindex(t.shape):
        col, stride = 0, 1
        for m in others:  # lowest remaining mode varies fastest
            col += idx[m] * stride
            stride *= t.shape[m]
        out[idx[mode], col] = t[idx]
    return out


def test_unfold_matrix_mode0_is_identity():
    m = np.arange(4.0).reshape(2, 2)
    assert np.array_equal(unfold(m, 0), m)


def test_unfold_zero_tensor():
    for mode in range(3):
        u = unfold(np.zeros((2, 3, 4)), mode)
        assert u.shape == ((2, 3, 4)[mode], 24 // (2, 3, 4)[mode])
        assert not u.any()


def test_unfold_matches_index_oracle():
    t = np.random.default_rng(0).normal(size=(2, 3, 4))
    assert unfold(t, 1).shape == (3, 8)
    for mode in range(3):
        assert np.array_equal(unfold(t, mode), _unfold_oracle(t, mode))


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 10**6))
def test_fold_inverts_unfold(shape, seed):
    t = np.random.default_rng(seed).normal(size=shape)
    for mode in range(t.ndim):
        assert np.array_equal(fold(unfold(t, mode), mode, t.shape), t)
        assert frobenius_norm(unfold(t, mode)) == pytest.approx(frobenius_norm(t), rel=1e-14)


def test_nmode_product_identity_and_zero():
    t = np.random.default_rng(1).normal(size=(2, 3, 4))
    assert np.array_equal(multi_mode_product(t, [np.eye(s) for s in t.shape]), t)
    assert not nmode_product(t, np.zeros((5, 3)), 1).any()
    assert nmode_product(t, np.zeros((5, 3)), 1).shape == (2, 5, 4)


def test_nmode_product_on_matrix_is_matmul():
    rng = np.random.default_rng(2)
    a, m = rng.normal(size=(2, 3)), rng.normal(size=(4, 2))
    assert np.allclose(nmode_product(a, m, 0), m @ a, atol=1e-14)


def test_nmode_product_matches_unfolded_form():
    rng = np.random.default_rng(3)
    t, m = rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 4))
    expected = fold(m @ unfold(t, 1), 1, (3, 2, 5))
    assert np.allclose(nmode_product(t, m, 1), expected, atol=1e-13)


def test_nmode_product_rejects_mismatch():
    with pytest.raises(ValueError):
        nmode_product(np.zeros((2, 3)), np.zeros((2, 2)), 1)


def test_khatri_rao_column_structure():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    kr = khatri_rao([a, b])
    for r in range(2):
        assert np.allclose(kr[:, r], np.kron(a[:, r], b[:, r]))


@pytest.mark.parametrize("method", ["jacobi", "lapack", "randomized"])
def test_svd_diagonal(method):
    u, s, v = truncated_svd(np.diag([3.0, 2.0, 1.0]), 2, method=method)
    assert np.allclose(s, [3.0, 2.0], atol=1e-12)


@pytest.mark.parametrize("method", ["jacobi", "lapack", "randomized"])
def test_svd_rank_one(method):
    rng = np.random.default_rng(5)
    m = np.outer(rng.normal(size=7), rng.normal(size=5))
    u, s, v = truncated_svd(m, 1, method=method)
    assert np.linalg.norm(m - (u * s) @ v.T) <= 1e-10


@pytest.mark.parametrize("method", ["jacobi", "lapack", "auto"])
@pytest.mark.parametrize("shape", [(6, 4), (4, 6)])
def test_svd_full_rank_exact(method, shape):
    m = np.random.default_rng(6).normal(size=shape)
    k = min(shape)
    u, s, v = truncated_svd(m, k, method=method)
    assert np.linalg.norm(u.T @ u - np.eye(k)) <= 1e-8
    assert np.linalg.norm(v.T @ v - np.eye(k)) <= 1e-8
    assert np.linalg.norm(m - (u * s) @ v.T) <= 1e-8 * np.linalg.norm(m)
    assert np.all(np.diff(s) <= 0)


def test_svd_routes_agree_and_signs_fixed():
    m = np.random.default_rng(7).normal(size=(30, 12))
    uj, sj, vj = truncated_svd(m, 5, method="jacobi")
    ul, sl, vl = truncated_svd(m, 5, method="lapack")
    assert np.allclose(sj, sl, rtol=1e-12)
    assert np.allclose(uj, ul, atol=1e-9)
    assert np.allclose(vj, vl, atol=1e-9)
    idx = np.argmax(np.abs(uj), axis=0)
    assert np.all(uj[idx, np.arange(5)] > 0)


def test_randomized_svd_on_wide_matrix():
    rng = np.random.default_rng(8)
    # decaying spectrum, short side above the dense threshold
    left = np.linalg.qr(rng.normal(size=(600, 40)))[0]
    right = np.linalg.qr(rng.normal(size=(700, 40)))[0]
    s_true = 2.0 ** -np.arange(40)
    m = (left * s_true) @ right.T
    u, s, v = truncated_svd(m, 10)
    assert np.allclose(s, s_true[:10], rtol=1e-7)


def test_svd_rejects_bad_rank():
    with pytest.raises(ValueError):
        truncated_svd(np.eye(3), 4)
    with pytest.raises(ValueError):
        truncated_svd(np.eye(3), 0)


def test_least_squares_examples():
    rng = np.random.default_rng(9)
    b = rng.normal(size=(4, 2))
    assert np.allclose(least_squares(np.eye(4), b), b)
    assert not least_squares(rng.normal(size=(5, 3)), np.zeros((5, 2)), ridge=0.1).any()
    a = rng.normal(size=(8, 3))
    x_star = rng.normal(size=(3, 2))
    assert np.allclose(least_squares(a, a @ x_star), x_star, atol=1e-8)


def test_least_squares_singular_needs_ridge():
    a = np.ones((4, 2))
    with pytest.raises(SingularSystemError):
        least_squares(a, np.ones(4))
    x = least_squares(a, np.ones(4), ridge=1e-6)
    assert np.all(np.isfinite(x))


def test_least_squares_dual_matches_primal():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(3, 6)), rng.normal(size=(3, 2))
    primal = np.linalg.solve(a.T @ a + 0.5 * np.eye(6), a.T @ b)
    assert np.allclose(least_squares(a, b, ridge=0.5), primal, atol=1e-12)


def test_dtn1_round_trip(tmp_path):
    t = np.random.default_rng(11).normal(size=(2, 3, 4))
    path = tmp_path / "t.dtn"
    write_dtn1(path, t)
    raw = path.read_bytes()
    assert raw[:4] == b"DTN1"
    assert struct.unpack_from("<I3Q", raw, 4) == (3, 2, 3, 4)
    assert np.array_equal(read_dtn1(path), t)


def test_dtn1_rejects_bad_files(tmp_path):
    path = tmp_path / "t.dtn"
    write_dtn1(path, np.ones((2, 2)))
    raw = path.read_bytes()
    (tmp_path / "magic.dtn").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.dtn").write_bytes(raw[:-8])
    (tmp_path / "head.dtn").write_bytes(raw[:10])
    for name in ("magic.dtn", "short.dtn", "head.dtn"):
        with pytest.raises(ValueError):
            read_dtn1(tmp_path / name)
