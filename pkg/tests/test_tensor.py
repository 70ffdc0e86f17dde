import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compressnas.tensor import conv2d, fold, jacobi_eigh, svd_truncated, unfold

from conftest import nested_loop_conv


def test_identity_kernel_returns_input(rng):
    x = rng.standard_normal((5, 7, 6))
    w = np.eye(5)[:, :, None, None]
    np.testing.assert_array_equal(conv2d(x, w), x)


def test_averaging_constant_input():
    out = conv2d(np.ones((1, 4, 4)), np.full((1, 1, 3, 3), 1 / 9))
    assert out.shape == (1, 2, 2)
    np.testing.assert_allclose(out, 1.0, atol=1e-15)


def test_stride2_pad1_matches_loops(rng):
    x = rng.standard_normal((3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(conv2d(x, w, 2, 1), nested_loop_conv(x, w, 2, 1), atol=1e-10, rtol=0)


def test_batched_matches_per_sample(rng):
    x = rng.standard_normal((3, 2, 9, 9))
    w = rng.standard_normal((5, 2, 3, 3))
    y = conv2d(x, w, 2, 1)
    for b in range(3):
        np.testing.assert_allclose(y[b], conv2d(x[b], w, 2, 1), atol=1e-12)


@pytest.mark.parametrize("xs, ws, axis", [((3, 8, 8), (4, 2, 3, 3), "channel"), ((3, 2, 2), (4, 3, 5, 5), "spatial")])
def test_conv_shape_errors_name_axis(xs, ws, axis):
    with pytest.raises(ValueError, match=axis):
        conv2d(np.zeros(xs), np.zeros(ws))


def test_unfold_1x1_rows():
    k = np.arange(6.0).reshape(2, 3, 1, 1)
    np.testing.assert_array_equal(unfold(k, "output"), k[:, :, 0, 0])


def test_unfold_input_shape(rng):
    k = rng.standard_normal((4, 2, 3, 3))
    assert unfold(k, "input").shape == (2, 36)
    assert unfold(k, "output").shape == (4, 18)


@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 3]), st.sampled_from(["output", "input"]))
def test_fold_inverts_unfold(m, n, k, mode):
    t = np.random.default_rng(m * 100 + n * 10 + k).standard_normal((m, n, k, k))
    np.testing.assert_array_equal(fold(unfold(t, mode), mode, t.shape), t)


def test_svd_identity():
    res = svd_truncated(np.eye(3), 3)
    np.testing.assert_allclose(res.singular_values, [1, 1, 1], atol=1e-14)


def test_svd_rank_one():
    a = np.array([2.0, 0.0, 0.0])
    b = np.array([0.0, 3.0, 0.0, 0.0])
    m = np.outer(a, b)
    res = svd_truncated(m, 1)
    assert abs(res.singular_values[0] - 6.0) < 1e-12
    assert np.abs(res.reconstruct() - m).max() < 1e-10


def test_svd_eckart_young_against_numpy(rng):
    m = rng.standard_normal((8, 5))
    ref = np.linalg.svd(m, compute_uv=False)  # independent oracle
    full = svd_truncated(m, 5)
    np.testing.assert_allclose(full.singular_values, ref, atol=1e-12)
    assert np.abs(full.reconstruct() - m).max() < 1e-8
    err = np.linalg.norm(m - svd_truncated(m, 2).reconstruct())
    assert abs(err - np.sqrt(np.sum(ref[2:] ** 2))) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_svd_properties(rows, cols, seed):
    m = np.random.default_rng(seed).standard_normal((rows, cols))
    r = min(rows, cols)
    res = svd_truncated(m, r)
    s = res.singular_values
    assert np.all(np.diff(s) <= 1e-12) and np.all(s >= 0)
    np.testing.assert_allclose(res.left_vectors.T @ res.left_vectors, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(res.right_vectors.T @ res.right_vectors, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(s, np.linalg.svd(m, compute_uv=False), atol=1e-10)
    # sign convention: largest-magnitude entry of each left vector is non-negative
    u = res.left_vectors
    assert np.all(u[np.abs(u).argmax(axis=0), np.arange(r)] >= 0)


def test_svd_rank_deficient_keeps_orthonormal_basis(rng):
    m = np.outer(rng.standard_normal(6), rng.standard_normal(9))
    res = svd_truncated(m, 4)
    np.testing.assert_allclose(res.left_vectors.T @ res.left_vectors, np.eye(4), atol=1e-10)
    assert np.abs(res.reconstruct() - m).max() < 1e-10


def test_svd_rejects_bad_rank():
    with pytest.raises(ValueError):
        svd_truncated(np.eye(3), 4)
    with pytest.raises(ValueError):
        svd_truncated(np.full((2, 2), np.nan), 1)


def test_jacobi_eigenvalues(rng):
    a = rng.standard_normal((7, 7))
    g = a @ a.T
    vals, vecs = jacobi_eigh(g)
    np.testing.assert_allclose(np.sort(vals), np.linalg.eigvalsh(g), atol=1e-10)
    np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, g, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(0, 2))
def test_conv_is_linear(seed, stride, pad):
    r = np.random.default_rng(seed)
    x1, x2 = r.standard_normal((2, 2, 7, 7))
    w = r.standard_normal((3, 2, 3, 3))
    lhs = conv2d(2.0 * x1 - x2, w, stride, pad)
    rhs = 2.0 * conv2d(x1, w, stride, pad) - conv2d(x2, w, stride, pad)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
