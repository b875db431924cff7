import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmproto.exceptions import (
    DegenerateCovarianceError,
    DimensionMismatchError,
    ExactZeroRowError,
    NonFiniteValueError,
)
from mmproto.tensor import dot_scores, l2_normalize_rows, pca_project_2d

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def matrices(rows=st.integers(1, 6), dims=st.integers(1, 6)):
    return st.tuples(rows, dims).flatmap(lambda s: arrays(np.float32, s, elements=finite))


def test_normalize_345():
    np.testing.assert_allclose(l2_normalize_rows([[3, 4]]), [[0.6, 0.8]], atol=1e-7)


def test_normalize_axis_vectors():
    np.testing.assert_array_equal(l2_normalize_rows([[1, 0], [0, 2]]), [[1, 0], [0, 1]])


def test_normalize_zero_row_strict():
    with pytest.raises(ExactZeroRowError):
        l2_normalize_rows([[0, 0]], strict=True)
    np.testing.assert_array_equal(l2_normalize_rows([[0, 0]]), [[0, 0]])


def test_normalize_leaves_input_untouched():
    m = np.array([[3.0, 4.0]], dtype=np.float32)
    l2_normalize_rows(m)
    np.testing.assert_array_equal(m, [[3.0, 4.0]])


def test_non_finite_rejected():
    with pytest.raises(NonFiniteValueError):
        l2_normalize_rows([[np.nan, 1.0]])


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_normalize_unit_norm_and_idempotent(m):
    once = l2_normalize_rows(m)
    norms = np.linalg.norm(once.astype(np.float64), axis=1)
    nonzero = np.linalg.norm(m.astype(np.float64), axis=1) > 1e-6
    np.testing.assert_allclose(norms[nonzero], 1.0, atol=1e-5)
    # rows under the eps guard are scaled, not normalized, so only these are fixed points
    row_norms = np.linalg.norm(m.astype(np.float64), axis=1)
    stable = (row_norms >= 1e-12) | (row_norms == 0)
    np.testing.assert_allclose(l2_normalize_rows(once)[stable], once[stable], atol=1e-6)


def test_sub_eps_row_is_divided_by_eps():
    out = l2_normalize_rows(np.array([[3e-13, 4e-13]]), eps=1e-12)
    np.testing.assert_allclose(out, [[0.3, 0.4]], rtol=1e-12)


def test_dot_scores_examples():
    np.testing.assert_array_equal(dot_scores([[1, 0]], [[1, 0]]), [[1.0]])
    np.testing.assert_array_equal(dot_scores([[1, 0], [0, 1]], [[2, 3]]), [[2.0, 3.0]])
    b = np.random.default_rng(0).standard_normal((2, 3)).astype(np.float32)
    np.testing.assert_array_equal(dot_scores(np.eye(3), b), b)


def test_dot_scores_dim_mismatch():
    with pytest.raises(DimensionMismatchError):
        dot_scores(np.ones((2, 3)), np.ones((2, 4)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_dot_scores_transpose_exact_and_matches_loop(c, n, d, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((c, d)).astype(np.float32)
    b = r.standard_normal((n, d)).astype(np.float32)
    out = dot_scores(a, b)
    assert out.shape == (n, c)
    np.testing.assert_array_equal(out, dot_scores(b, a).T)
    np.testing.assert_array_equal(out, dot_scores(a, b))
    loop = np.array([[sum(float(b[i, k]) * float(a[j, k]) for k in range(d))
                      for j in range(c)] for i in range(n)])
    np.testing.assert_allclose(out, loop, rtol=1e-6, atol=1e-6)


def test_dot_scores_transpose_exact_equal_shapes(rng):
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((7, 5)).astype(np.float32)
    np.testing.assert_array_equal(dot_scores(a, b), dot_scores(b, a).T)


def test_cosine_scores_bounded(rng):
    a = l2_normalize_rows(rng.standard_normal((20, 16)))
    b = l2_normalize_rows(rng.standard_normal((30, 16)))
    s = dot_scores(a, b)
    assert s.min() >= -1 - 1e-5 and s.max() <= 1 + 1e-5


def test_pca_recovers_plane(rng):
    plane = rng.standard_normal((12, 2))
    basis, _ = np.linalg.qr(rng.standard_normal((5, 2)))
    points = plane @ basis.T + rng.standard_normal(5)
    proj = pca_project_2d(points.astype(np.float32)).astype(np.float64)

    def pdist(p):
        return np.linalg.norm(p[:, None] - p[None], axis=-1)

    np.testing.assert_allclose(pdist(proj), pdist(points.astype(np.float32).astype(np.float64)),
                               atol=1e-5)


def test_pca_collinear_second_component_flat():
    pts = np.array([[0, 0, 0], [1, 2, 3], [2, 4, 6]], dtype=np.float32)
    proj = pca_project_2d(pts)
    assert np.var(proj[:, 1]) < 1e-10
    assert np.var(proj[:, 0]) > 1


def test_pca_against_covariance_eigendecomposition(rng):
    m = rng.standard_normal((50, 16)).astype(np.float32)
    proj = pca_project_2d(m).astype(np.float64)
    centered = m.astype(np.float64) - m.astype(np.float64).mean(axis=0)
    vals, vecs = np.linalg.eigh(centered.T @ centered / (len(m) - 1))
    order = np.argsort(vals)[::-1][:2]
    top = vecs[:, order]
    for j in range(2):
        nz = np.flatnonzero(np.abs(top[:, j]) > 1e-12)[0]
        top[:, j] *= np.sign(top[nz, j])
    np.testing.assert_allclose(proj, centered @ top, atol=1e-4)
    var = proj.var(axis=0, ddof=1)
    assert var[0] >= var[1]
    np.testing.assert_allclose(var, vals[order], rtol=1e-4)


def test_pca_sign_convention(rng):
    m = rng.standard_normal((10, 4)).astype(np.float32)
    a = pca_project_2d(m)
    b = pca_project_2d(-m)
    # flipping the data flips the scores, never the loading sign
    np.testing.assert_allclose(a, -b, atol=1e-5)


def test_pca_degenerate():
    with pytest.raises(DegenerateCovarianceError):
        pca_project_2d(np.ones((4, 3)))
    with pytest.raises(DimensionMismatchError):
        pca_project_2d(np.ones((2, 3)))
