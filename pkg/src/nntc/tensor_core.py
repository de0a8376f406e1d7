"""Dense and coordinate-format tensors, mode-k unfoldings and k-mode products.

Dense tensors are plain ``numpy.ndarray`` objects in C order (first index
slowest, last index fastest). Sparse tensors are stored as a sorted list of
coordinates. Modes are 0-based throughout the Python API.

Unfoldings follow the Kolda-Bader convention: in ``unfold(t, k)`` the column of
the fiber with multi-index ``i`` is ``sum_{m != k} i_m * J_m`` where
``J_m = prod_{l < m, l != k} n_l``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

_INDEX_LIMIT = np.iinfo(np.int64).max


def check_shape(shape) -> tuple[int, ...]:
    """Validate a tensor shape and return it as a tuple of ints."""
    dims = tuple(int(n) for n in shape)
    if len(dims) < 2:
        raise ValueError(f"tensor order must be >= 2, got shape {dims}")
    if any(n < 1 for n in dims):
        raise ValueError(f"all dimensions must be >= 1, got {dims}")
    if math.prod(dims) > _INDEX_LIMIT:
        raise ValueError(f"shape {dims} exceeds the int64 index range")
    return dims


def as_dense(t, shape=None) -> np.ndarray:
    """Return ``t`` as a finite float64 array, optionally checking its shape."""
    arr = np.asarray(t, dtype=np.float64)
    check_shape(arr.shape)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"shape mismatch: {arr.shape} != {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _check_mode(k: int, order: int) -> int:
    k = int(k)
    if not 0 <= k < order:
        raise ValueError(f"mode {k} out of range for an order-{order} tensor")
    return k


def column_strides(shape, k: int) -> np.ndarray:
    """Strides ``J_m`` of the mode-k unfolding (0 for ``m == k``)."""
    strides = np.zeros(len(shape), dtype=np.int64)
    acc = 1
    for m, n in enumerate(shape):
        if m == k:
            continue
        strides[m] = acc
        acc *= n
    return strides


def unfold(t, k: int) -> np.ndarray:
    """Mode-k unfolding, an ``n_k x prod_{j != k} n_j`` matrix."""
    t = np.asarray(t)
    k = _check_mode(k, t.ndim)
    return np.reshape(np.moveaxis(t, k, 0), (t.shape[k], -1), order="F")


def fold(m, k: int, shape) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    shape = check_shape(shape)
    k = _check_mode(k, len(shape))
    m = np.asarray(m)
    rest = shape[:k] + shape[k + 1:]
    if m.shape != (shape[k], math.prod(rest)):
        raise ValueError(
            f"matrix of shape {m.shape} cannot be folded into {shape} along mode {k}"
        )
    return np.moveaxis(np.reshape(m, (shape[k],) + rest, order="F"), 0, k)


def mode_product(t, x, k: int) -> np.ndarray:
    """k-mode product ``t x_k x``; mode k of the result has size ``x.shape[0]``."""
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    k = _check_mode(k, t.ndim)
    if x.ndim != 2 or x.shape[1] != t.shape[k]:
        raise ValueError(
            f"matrix of shape {x.shape} incompatible with mode {k} of size {t.shape[k]}"
        )
    return np.moveaxis(np.tensordot(x, t, axes=(1, k)), 0, k)


def _linear_index(indices: np.ndarray, shape) -> np.ndarray:
    if indices.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.ravel_multi_index(tuple(indices.T), shape).astype(np.int64)


def _check_indices(indices, shape) -> tuple[np.ndarray, np.ndarray]:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        indices = indices.reshape(0, len(shape))
    if indices.ndim != 2 or indices.shape[1] != len(shape):
        raise ValueError(f"indices must be an (m, {len(shape)}) array")
    if np.any(indices < 0) or np.any(indices >= np.asarray(shape)):
        bad = np.flatnonzero(np.any((indices < 0) | (indices >= np.asarray(shape)), axis=1))[0]
        raise ValueError(f"index {tuple(indices[bad])} out of bounds for shape {shape}")
    lin = _linear_index(indices, shape)
    if np.any(np.diff(lin) <= 0):
        bad = int(np.flatnonzero(np.diff(lin) <= 0)[0]) + 1
        raise ValueError(
            f"indices must be strictly ascending; entry {bad} {tuple(indices[bad])} "
            "is a duplicate or out of order"
        )
    return indices, lin


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Coordinate-format tensor with strictly ascending (lexicographic) indices.

    Explicit zeros are kept: the support is the stored index set.
    """

    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray
    linear: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = check_shape(self.shape)
        indices, lin = _check_indices(self.indices, shape)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] != indices.shape[0]:
            raise ValueError("indices and values differ in length")
        if not np.all(np.isfinite(values)):
            raise ValueError("sparse tensor contains non-finite values")
        indices.flags.writeable = False
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "linear", lin)

    @classmethod
    def from_unsorted(cls, shape, indices, values) -> "SparseTensor":
        """Build from coordinates in any order; duplicates are rejected."""
        shape = check_shape(shape)
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, len(shape))
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if np.any(indices < 0) or np.any(indices >= np.asarray(shape)):
            raise ValueError("index out of bounds")
        order = np.argsort(_linear_index(indices, shape), kind="stable")
        return cls(shape, indices[order], values[order])

    @classmethod
    def from_dense(cls, t, keep_zeros: bool = False) -> "SparseTensor":
        t = as_dense(t)
        if keep_zeros:
            idx = np.argwhere(np.ones_like(t, dtype=bool))
        else:
            idx = np.argwhere(t != 0)
        return cls(t.shape, idx, t[tuple(idx.T)])

    @property
    def order(self) -> int:
        return len(self.shape)

    @property
    def nnz(self) -> int:
        return self.values.shape[0]

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out.reshape(-1)[self.linear] = self.values
        return out

    def with_values(self, values) -> "SparseTensor":
        """Same support, new values."""
        return SparseTensor(self.shape, self.indices, values)

    def support(self) -> "ObservationMask":
        return ObservationMask(self.shape, self.indices)

    def __repr__(self):
        return f"SparseTensor(shape={self.shape}, nnz={self.nnz})"


@dataclass(frozen=True)
class _ModeIndex:
    rows: np.ndarray        # i_k of every entry
    cols: np.ndarray        # Kolda-Bader column of every entry in the full unfolding
    inverse: np.ndarray     # position of each entry's column among the distinct columns
    scatter: sp.csr_matrix  # (distinct columns) x |omega| incidence matrix


@dataclass(frozen=True, eq=False)
class ObservationMask:
    """The observed index set, strictly ascending."""

    shape: tuple[int, ...]
    indices: np.ndarray
    linear: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = check_shape(self.shape)
        indices, lin = _check_indices(self.indices, shape)
        indices.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "linear", lin)

    @classmethod
    def from_linear(cls, shape, linear) -> "ObservationMask":
        shape = check_shape(shape)
        linear = np.unique(np.asarray(linear, dtype=np.int64))
        idx = np.stack(np.unravel_index(linear, shape), axis=1) if linear.size else np.zeros((0, len(shape)), dtype=np.int64)
        return cls(shape, idx)

    @classmethod
    def full(cls, shape) -> "ObservationMask":
        shape = check_shape(shape)
        return cls.from_linear(shape, np.arange(math.prod(shape)))

    def __len__(self):
        return self.indices.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ObservationMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.linear, other.linear)

    __hash__ = None

    def tuple_index(self) -> tuple[np.ndarray, ...]:
        """Fancy index selecting the observed entries of a dense array."""
        return tuple(self.indices.T)

    def dense_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[self.tuple_index()] = True
        return out

    @cached_property
    def _modes(self) -> tuple[_ModeIndex, ...]:
        out = []
        m = len(self)
        for k in range(len(self.shape)):
            rows = self.indices[:, k].copy()
            cols = self.indices @ column_strides(self.shape, k)
            ucols, inverse = np.unique(cols, return_inverse=True)
            scatter = sp.csr_matrix(
                (np.ones(m), (inverse, np.arange(m))), shape=(ucols.size, m)
            )
            out.append(_ModeIndex(rows, cols, inverse, scatter))
        return tuple(out)

    def mode_index(self, k: int) -> _ModeIndex:
        return self._modes[_check_mode(k, len(self.shape))]

    def __repr__(self):
        return f"ObservationMask(shape={self.shape}, size={len(self)})"


def _as_projector_factor(u, n: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != n:
        raise ValueError(f"factor of shape {u.shape} incompatible with mode size {n}")
    return u


def sym_product_on_omega(values, u, k: int, omega: ObservationMask) -> np.ndarray:
    """Values of ``(Z x_k u u^T)`` on omega for Z supported on omega.

    ``values`` are Z's entries aligned with ``omega``. Cost is
    ``O(|omega| r)``: first ``M = u^T Z_k`` over the occupied columns, then one
    length-r dot product per observed entry.
    """
    idx = omega.mode_index(k)
    u = _as_projector_factor(u, omega.shape[k])
    rows_u = u[idx.rows]
    m_t = idx.scatter @ (values[:, None] * rows_u)
    return np.einsum("ij,ij->i", rows_u, m_t[idx.inverse])


def restricted_sym_mode_product(z: SparseTensor, u, k: int, omega: ObservationMask) -> SparseTensor:
    """``(z x_k u u^T)`` restricted to omega, for any sparse ``z``."""
    if z.shape != omega.shape:
        raise ValueError(f"shape mismatch: {z.shape} != {omega.shape}")
    k = _check_mode(k, z.order)
    u = _as_projector_factor(u, z.shape[k])
    strides = column_strides(z.shape, k)
    zcols = z.indices @ strides
    ocols = omega.indices @ strides
    ucols, inverse = np.unique(np.concatenate([zcols, ocols]), return_inverse=True)
    zinv, oinv = inverse[: z.nnz], inverse[z.nnz:]
    m_t = np.zeros((ucols.size, u.shape[1]))
    np.add.at(m_t, zinv, z.values[:, None] * u[z.indices[:, k]])
    out = np.einsum("ij,ij->i", u[omega.indices[:, k]], m_t[oinv])
    return SparseTensor(omega.shape, omega.indices, out)


def project_omega(t, omega: ObservationMask) -> SparseTensor:
    """Entries of ``t`` on omega; the support equals omega, zeros included."""
    if isinstance(t, SparseTensor):
        if t.shape != omega.shape:
            raise ValueError(f"shape mismatch: {t.shape} != {omega.shape}")
        vals = np.zeros(len(omega))
        _, it, io = np.intersect1d(t.linear, omega.linear, assume_unique=True, return_indices=True)
        vals[io] = t.values[it]
        return SparseTensor(omega.shape, omega.indices, vals)
    t = as_dense(t, omega.shape)
    return SparseTensor(omega.shape, omega.indices, t[omega.tuple_index()])


def inner_product(a, b) -> float:
    """Sum of the products of entries, for any mix of dense and sparse operands."""
    a_sparse, b_sparse = isinstance(a, SparseTensor), isinstance(b, SparseTensor)
    shape_a = a.shape if a_sparse else np.shape(a)
    shape_b = b.shape if b_sparse else np.shape(b)
    if tuple(shape_a) != tuple(shape_b):
        raise ValueError(f"shape mismatch: {tuple(shape_a)} != {tuple(shape_b)}")
    if a_sparse and b_sparse:
        _, ia, ib = np.intersect1d(a.linear, b.linear, assume_unique=True, return_indices=True)
        return float(np.dot(a.values[ia], b.values[ib]))
    if a_sparse:
        return float(np.dot(a.values, np.asarray(b, dtype=np.float64).reshape(-1)[a.linear]))
    if b_sparse:
        return inner_product(b, a)
    return float(np.vdot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def frobenius_norm(t) -> float:
    if isinstance(t, SparseTensor):
        return float(np.linalg.norm(t.values))
    return float(np.linalg.norm(np.asarray(t).reshape(-1)))
