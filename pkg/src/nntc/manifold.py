"""Geometry of the unit-Frobenius sphere {U in R^{n x r} : ||U||_F = 1}.

Each factor ``U`` parameterizes a trace-one PSD matrix ``U U^T`` of rank at
most r. Points are plain 2-D arrays; points of the K-fold product are lists of
such arrays. The embedded sphere metric is used: tangent vectors satisfy
``<U, xi>_F = 0``, the retraction is metric projection (renormalization) and
vector transport is tangent projection at the target point.
"""
from __future__ import annotations

import numpy as np


def _check_dims(n: int, r: int) -> None:
    if not (isinstance(n, (int, np.integer)) and isinstance(r, (int, np.integer))):
        raise TypeError("n and r must be integers")
    if not n >= r >= 1:
        raise ValueError(f"need n >= r >= 1, got n={n}, r={r}")


def normalize(u) -> np.ndarray:
    """Scale ``u`` onto the sphere."""
    u = np.asarray(u, dtype=np.float64)
    nrm = np.linalg.norm(u)
    if nrm == 0 or not np.isfinite(nrm):
        raise ValueError("cannot normalize a zero or non-finite matrix")
    return u / nrm


def random_point(n: int, r: int, rng_seed=None) -> np.ndarray:
    """i.i.d. standard normal entries scaled to unit Frobenius norm.

    ``rng_seed`` may be an int, ``None`` or a ``numpy.random.Generator``.
    """
    _check_dims(n, r)
    rng = np.random.default_rng(rng_seed)
    return normalize(rng.standard_normal((n, r)))


def random_product_point(shapes, rng_seed=None) -> list[np.ndarray]:
    rng = np.random.default_rng(rng_seed)
    return [random_point(n, r, rng) for n, r in shapes]


def _check_pair(u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} != {v.shape}")
    return u, v


def inner(xi, eta) -> float:
    return float(np.vdot(xi, eta))


def project_to_tangent(u, v) -> np.ndarray:
    """Remove the radial component of ``v`` at ``u``."""
    u, v = _check_pair(u, v)
    return v - np.vdot(u, v) * u


def retract(u, xi, step: float = 1.0) -> np.ndarray:
    """``(u + step * xi) / ||u + step * xi||_F``."""
    u, xi = _check_pair(u, xi)
    if step == 0:
        return u.copy()
    y = u + step * xi
    nrm = np.linalg.norm(y)
    # ||u + t xi||^2 = 1 + t^2 ||xi||^2 for tangent xi
    assert nrm > 0, "retraction through the origin"
    return y / nrm


def transport(u_from, u_to, xi) -> np.ndarray:
    """Move a tangent vector at ``u_from`` into the tangent space at ``u_to``."""
    _check_pair(u_from, xi)
    return project_to_tangent(u_to, xi)


# Product manifold: componentwise, no coupling between factors.

def product_inner(xis, etas) -> float:
    if len(xis) != len(etas):
        raise ValueError("component count mismatch")
    return float(sum(inner(a, b) for a, b in zip(xis, etas)))


def product_norm(xis) -> float:
    return float(np.sqrt(product_inner(xis, xis)))


def riemannian_gradient(us, euc_grads) -> list[np.ndarray]:
    """Tangent projection of the Euclidean gradient, per component."""
    if len(us) != len(euc_grads):
        raise ValueError("component count mismatch")
    return [project_to_tangent(u, g) for u, g in zip(us, euc_grads)]


def product_retract(us, xis, step: float) -> list[np.ndarray]:
    if len(us) != len(xis):
        raise ValueError("component count mismatch")
    return [retract(u, xi, step) for u, xi in zip(us, xis)]


def product_transport(us_from, us_to, xis) -> list[np.ndarray]:
    if not len(us_from) == len(us_to) == len(xis):
        raise ValueError("component count mismatch")
    return [transport(a, b, xi) for a, b, xi in zip(us_from, us_to, xis)]
