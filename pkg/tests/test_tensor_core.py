import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nntc.tensor_core import (
    ObservationMask,
    SparseTensor,
    check_shape,
    fold,
    frobenius_norm,
    inner_product,
    mode_product,
    project_omega,
    restricted_sym_mode_product,
    sym_product_on_omega,
    unfold,
)

shapes = st.lists(st.integers(1, 4), min_size=2, max_size=4).map(tuple)


def _tensor(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_check_shape_rejects_bad_shapes():
    with pytest.raises(ValueError):
        check_shape((3,))
    with pytest.raises(ValueError):
        check_shape((2, 0, 2))
    assert check_shape([2, 3]) == (2, 3)


def test_unfold_column_convention():
    # column of entry (i, j, k) in the mode-0 unfolding is j + k * n1
    t = np.arange(24.0).reshape(2, 3, 4)
    m = unfold(t, 0)
    assert m.shape == (2, 12)
    for i in range(2):
        for j in range(3):
            for k in range(4):
                assert m[i, j + 3 * k] == t[i, j, k]
    m = unfold(t, 2)
    assert m[3, 1 + 2 * 2] == t[1, 2, 3]


def test_unfold_small_fixture():
    # canonical 2x2x2 tensor with values 1..8 in C order
    t = np.arange(1.0, 9.0).reshape(2, 2, 2)
    assert np.array_equal(unfold(t, 0), [[1, 3, 2, 4], [5, 7, 6, 8]])
    assert np.array_equal(unfold(t, 1), [[1, 5, 2, 6], [3, 7, 4, 8]])
    assert np.array_equal(unfold(t, 2), [[1, 5, 3, 7], [2, 6, 4, 8]])


@given(shapes, st.data())
@settings(max_examples=60, deadline=None)
def test_fold_inverts_unfold(shape, data):
    k = data.draw(st.integers(0, len(shape) - 1))
    t = _tensor(shape)
    m = unfold(t, k)
    assert m.shape == (shape[k], math.prod(shape) // shape[k])
    assert np.array_equal(fold(m, k, shape), t)


def test_fold_rejects_wrong_size():
    with pytest.raises(ValueError):
        fold(np.zeros((2, 5)), 0, (2, 3))
    with pytest.raises(ValueError):
        unfold(np.zeros((2, 3)), 2)


@given(shapes, st.data())
@settings(max_examples=60, deadline=None)
def test_mode_product_matches_matrix_product_on_unfolding(shape, data):
    k = data.draw(st.integers(0, len(shape) - 1))
    t = _tensor(shape, 1)
    x = np.random.default_rng(2).standard_normal((3, shape[k]))
    out = mode_product(t, x, k)
    assert out.shape[k] == 3
    new_shape = shape[:k] + (3,) + shape[k + 1:]
    assert np.allclose(unfold(out, k), x @ unfold(t, k), rtol=1e-13, atol=1e-13)
    assert np.allclose(fold(x @ unfold(t, k), k, new_shape), out)


def test_mode_product_einsum_and_commutation():
    t = _tensor((3, 4, 5))
    a, b = np.ones((2, 3)), np.arange(8.0).reshape(2, 4)
    want = np.einsum("pi,ijk->pjk", a, t)
    assert np.allclose(mode_product(t, a, 0), want)
    ab = mode_product(mode_product(t, a, 0), b, 1)
    ba = mode_product(mode_product(t, b, 1), a, 0)
    assert np.allclose(ab, ba)
    with pytest.raises(ValueError):
        mode_product(t, np.ones((2, 5)), 0)


def test_sparse_tensor_validation():
    with pytest.raises(ValueError, match="duplicate or out of order"):
        SparseTensor((2, 2), [[0, 1], [0, 1]], [1.0, 2.0])
    with pytest.raises(ValueError, match="duplicate or out of order"):
        SparseTensor((2, 2), [[1, 0], [0, 1]], [1.0, 2.0])
    with pytest.raises(ValueError, match="out of bounds"):
        SparseTensor((2, 2), [[0, 2]], [1.0])
    with pytest.raises(ValueError, match="non-finite"):
        SparseTensor((2, 2), [[0, 0]], [np.nan])
    with pytest.raises(ValueError):
        SparseTensor((2, 2), [[0, 0]], [1.0, 2.0])


def test_sparse_tensor_keeps_explicit_zeros():
    s = SparseTensor((2, 3), [[0, 0], [1, 2]], [0.0, 5.0])
    assert s.nnz == 2
    assert s.support() == ObservationMask((2, 3), [[0, 0], [1, 2]])
    assert np.array_equal(s.to_dense(), [[0, 0, 0], [0, 0, 5.0]])


def test_from_unsorted_sorts_and_from_dense():
    s = SparseTensor.from_unsorted((2, 3), [[1, 2], [0, 1]], [3.0, 4.0])
    assert np.array_equal(s.indices, [[0, 1], [1, 2]])
    assert np.array_equal(s.values, [4.0, 3.0])
    d = np.array([[0.0, 1.0], [2.0, 0.0]])
    assert SparseTensor.from_dense(d).nnz == 2
    assert SparseTensor.from_dense(d, keep_zeros=True).nnz == 4
    assert np.array_equal(SparseTensor.from_dense(d).to_dense(), d)


def test_observation_mask_from_linear_sorts_and_dedups():
    m = ObservationMask.from_linear((2, 3), [5, 0, 3, 0])
    assert len(m) == 3
    assert np.array_equal(m.linear, [0, 3, 5])
    assert m.dense_mask().sum() == 3
    assert len(ObservationMask.full((2, 2))) == 4


def _random_mask(shape, m, seed):
    rng = np.random.default_rng(seed)
    return ObservationMask.from_linear(shape, rng.choice(math.prod(shape), size=m, replace=False))


@pytest.mark.parametrize("k", [0, 1, 2])
def test_sym_product_on_omega_matches_dense(k):
    shape = (4, 5, 3)
    omega = _random_mask(shape, 25, k)
    rng = np.random.default_rng(10 + k)
    z = project_omega(rng.standard_normal(shape), omega)
    u = rng.standard_normal((shape[k], 2))
    dense = mode_product(mode_product(z.to_dense(), u.T, k), u, k)
    got = sym_product_on_omega(z.values, u, k, omega)
    assert np.allclose(got, dense[omega.tuple_index()], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_restricted_product_with_different_supports(k):
    shape = (3, 4, 2)
    rng = np.random.default_rng(k)
    z = SparseTensor.from_dense(np.where(rng.uniform(size=shape) < 0.5, rng.standard_normal(shape), 0.0))
    omega = _random_mask(shape, 10, k + 5)
    u = rng.standard_normal((shape[k], 2))
    dense = mode_product(mode_product(z.to_dense(), u.T, k), u, k)
    got = restricted_sym_mode_product(z, u, k, omega)
    assert got.support() == omega
    assert np.allclose(got.values, dense[omega.tuple_index()], atol=1e-12)


def test_project_omega_dense_and_sparse():
    t = np.arange(6.0).reshape(2, 3)
    omega = ObservationMask((2, 3), [[0, 0], [1, 1]])
    p = project_omega(t, omega)
    assert np.array_equal(p.values, [0.0, 4.0])
    assert p.support() == omega
    s = SparseTensor((2, 3), [[1, 1], [1, 2]], [7.0, 8.0])
    assert np.array_equal(project_omega(s, omega).values, [0.0, 7.0])


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_inner_product_all_storage_mixes(seed):
    rng = np.random.default_rng(seed)
    shape = (3, 2, 4)
    a = np.where(rng.uniform(size=shape) < 0.4, rng.standard_normal(shape), 0.0)
    b = np.where(rng.uniform(size=shape) < 0.6, rng.standard_normal(shape), 0.0)
    sa, sb = SparseTensor.from_dense(a), SparseTensor.from_dense(b)
    want = float(np.sum(a * b))
    for x, y in ((sa, sb), (sa, b), (a, sb), (a, b)):
        assert inner_product(x, y) == pytest.approx(want, abs=1e-12)
    assert frobenius_norm(sa) == pytest.approx(np.linalg.norm(a))
    with pytest.raises(ValueError):
        inner_product(a, np.zeros((3, 2)))
