"""Metrics, synthetic data, observation sampling and reference oracles.

The oracles deliberately avoid the solver kernels: eigenvalues come from a
self-contained cyclic Jacobi iteration, the Z oracle assembles the normal
matrix explicitly and factors it with Cholesky, and the S oracle enumerates
active sets of a dense Kronecker-assembled quadratic.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import manifold
from .inner_solver import (
    DualPair,
    InnerConfig,
    ProblemData,
    _normal_values,
    _rhs_values,
    alternating_inner_solve,
    cg_solve_z,
    nnls_objective,
    nnls_solve_s,
)
from .tensor_core import ObservationMask, SparseTensor, as_dense, check_shape, mode_product

JACOBI_TOL = 1e-13
JACOBI_MAX_SWEEPS = 60
PINV_RTOL = 1e-12


class OracleError(RuntimeError):
    """An oracle detected an inconsistency (non-SPD assembly, no convergence)."""


@dataclass(frozen=True)
class SyntheticSpec:
    shape: tuple[int, ...]
    core_rank: tuple[int, ...]
    seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        shape = check_shape(self.shape)
        rank = tuple(int(r) for r in self.core_rank)
        if len(rank) != len(shape):
            raise ValueError("core_rank and shape differ in length")
        if any(not 1 <= r <= n for r, n in zip(rank, shape)):
            raise ValueError(f"need 1 <= r_k <= n_k, got rank {rank} for shape {shape}")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be nonnegative")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "core_rank", rank)


@dataclass(frozen=True)
class Metrics:
    rmse: float
    negative_fraction: float
    min_entry: float


def rmse(w, w_true) -> float:
    """Root-mean-square error over all entries."""
    w = np.asarray(w, dtype=np.float64)
    w_true = np.asarray(w_true, dtype=np.float64)
    if w.shape != w_true.shape:
        raise ValueError(f"shape mismatch: {w.shape} != {w_true.shape}")
    d = (w - w_true).reshape(-1)
    return float(math.sqrt(float(d @ d) / d.size))


def metrics(w, w_true) -> Metrics:
    w = np.asarray(w, dtype=np.float64)
    return Metrics(rmse(w, w_true), float(np.mean(w < 0)), float(w.min()))


def sample_mask(shape, fraction: float, seed=None) -> ObservationMask:
    """Uniform sample of ``round(fraction * prod(shape))`` indices without replacement."""
    shape = check_shape(shape)
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    total = math.prod(shape)
    m = int(round(fraction * total))
    if m < 1:
        raise ValueError(f"fraction {fraction} selects no entries of a {total}-entry tensor")
    rng = np.random.default_rng(seed)
    return ObservationMask.from_linear(shape, rng.choice(total, size=m, replace=False))


def synth_nonneg_lowrank(spec: SyntheticSpec) -> np.ndarray:
    """Tucker tensor with uniform[0, 1] core and factors, plus optional noise.

    Noise is Gaussian with standard deviation ``noise_sigma`` and the
    result is truncated at zero.
    """
    rng = np.random.default_rng(spec.seed)
    t = rng.uniform(size=spec.core_rank)
    for k, (n, r) in enumerate(zip(spec.shape, spec.core_rank)):
        t = mode_product(t, rng.uniform(size=(n, r)), k)
    if spec.noise_sigma > 0:
        t = np.maximum(t + spec.noise_sigma * rng.standard_normal(spec.shape), 0.0)
    return t


def observed_mean_baseline(y: SparseTensor) -> np.ndarray:
    """Constant fill with the mean of the observed values."""
    return np.full(y.shape, float(np.mean(y.values)))


# -- self-contained symmetric eigensolver -----------------------------------

def jacobi_eigh(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending.
    Iterates until the off-diagonal Frobenius norm is at most
    ``tol * ||a||_F``.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(a)
    for _ in range(max_sweeps + 1):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise OracleError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def _clamp_gram_eigs(w: np.ndarray, shape) -> np.ndarray:
    # Gram eigenvalues at rounding level are exact zeros of X X^T; left in,
    # their square roots would add O(sqrt(eps)) to the nuclear norm.
    floor = max(shape) * np.finfo(float).eps * max(float(w.max()), 0.0)
    return np.where(w > floor, w, 0.0)


def svd_nuclear_norm(x) -> float:
    """Sum of singular values via Jacobi on the smaller Gram matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("matrix contains non-finite values")
    gram = x @ x.T if x.shape[0] <= x.shape[1] else x.T @ x
    w, _ = jacobi_eigh(gram)
    return float(np.sum(np.sqrt(_clamp_gram_eigs(w, x.shape))))


def lemma1_check(x):
    """Both sides of ``||X||_*^2 = <Theta^+ X, X>`` at the closed-form optimum.

    ``Theta = sqrt(X X^T) / tr(sqrt(X X^T))``. Returns ``(lhs, rhs, theta)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.any(x):
        raise ValueError("X must be nonzero")
    lhs = svd_nuclear_norm(x) ** 2
    w, v = jacobi_eigh(x @ x.T)
    w = _clamp_gram_eigs(w, x.shape)
    root = np.sqrt(w)
    theta_eigs = root / root.sum()
    theta = (v * theta_eigs) @ v.T
    keep = theta_eigs > PINV_RTOL * theta_eigs.max()
    inv = np.zeros_like(theta_eigs)
    inv[keep] = 1.0 / theta_eigs[keep]
    theta_pinv = (v * inv) @ v.T
    rhs = float(np.sum((theta_pinv @ x) * x))
    return lhs, rhs, theta


# -- inner-problem oracles ---------------------------------------------------

DENSE_ORACLE_MAX_OMEGA = 500
NNLS_ORACLE_MAX_ENTRIES = 16


def assemble_normal_matrix(p: ProblemData) -> np.ndarray:
    """Explicit ``|omega| x |omega|`` matrix of the Z-block operator, by probing."""
    m = len(p.omega)
    if m > DENSE_ORACLE_MAX_OMEGA:
        raise ValueError(f"|omega| = {m} exceeds the dense-oracle guard {DENSE_ORACLE_MAX_OMEGA}")
    a = np.empty((m, m))
    e = np.zeros(m)
    for j in range(m):
        e[j] = 1.0
        a[:, j] = _normal_values(e, p)
        e[j] = 0.0
    return a


def dense_inner_oracle(p: ProblemData, s) -> SparseTensor:
    """Reference Z-block solution by dense Cholesky."""
    s = as_dense(s, p.shape)
    a = assemble_normal_matrix(p)
    asym = np.max(np.abs(a - a.T))
    if asym > 1e-12 * max(np.max(np.abs(a)), 1.0):
        raise OracleError(f"assembled operator is not symmetric (max asymmetry {asym:.3e})")
    try:
        chol = np.linalg.cholesky(0.5 * (a + a.T))
    except np.linalg.LinAlgError as exc:
        raise OracleError("assembled operator is not positive definite") from exc
    b = _rhs_values(p, s)
    x = np.linalg.solve(chol.T, np.linalg.solve(chol, b))
    return p.y.with_values(x)


def nnls_hessian(p: ProblemData) -> np.ndarray:
    """Dense ``sum_k lam_k (I x ... x U_k U_k^T x ... x I)`` in C order."""
    total = math.prod(p.shape)
    h = np.zeros((total, total))
    for k, (lam, u) in enumerate(zip(p.lam, p.u)):
        term = np.ones((1, 1))
        for j, n in enumerate(p.shape):
            term = np.kron(term, u @ u.T if j == k else np.eye(n))
        h += lam * term
    return h


def _quad_objective(h, z, s):
    x = z + s
    return 0.5 * float(x @ h @ x)


def nnls_exhaustive_oracle(p: ProblemData, z: SparseTensor) -> np.ndarray:
    """Minimizer of the S-block NNLS by enumerating every free set.

    For each subset of entries allowed to be nonzero, solve the stationarity
    system on that subset by least squares, keep the nonnegative candidates
    and return the one with the smallest objective.
    """
    total = math.prod(p.shape)
    if total > NNLS_ORACLE_MAX_ENTRIES:
        raise ValueError(f"{total} entries exceed the exhaustive-oracle guard {NNLS_ORACLE_MAX_ENTRIES}")
    h = nnls_hessian(p)
    zd = z.to_dense().reshape(-1)
    b = h @ zd
    best = np.zeros(total)
    best_f = _quad_objective(h, zd, best)
    scale = max(np.max(np.abs(zd)), 1.0)
    for size in range(1, total + 1):
        for free in itertools.combinations(range(total), size):
            f_idx = list(free)
            sol, *_ = np.linalg.lstsq(h[np.ix_(f_idx, f_idx)], -b[f_idx], rcond=None)
            if np.any(sol < -1e-12 * scale):
                continue
            cand = np.zeros(total)
            cand[f_idx] = np.maximum(sol, 0.0)
            f = _quad_objective(h, zd, cand)
            if f < best_f:
                best, best_f = cand, f
    return best.reshape(p.shape)


# -- randomized check suites ---------------------------------------------------

def random_problem(rng, shape, n_obs: int, rank, c=None, lam=None, u=None) -> ProblemData:
    """Random instance: uniform[0.1, 1] observations on a random omega.

    Factors default to Gaussian points on the sphere, weights to
    uniform[0.1, 1] and ``C`` to uniform[0.1, 10].
    """
    shape = check_shape(shape)
    total = math.prod(shape)
    omega = ObservationMask.from_linear(shape, rng.choice(total, size=n_obs, replace=False))
    y = SparseTensor(shape, omega.indices, rng.uniform(0.1, 1.0, n_obs))
    if lam is None:
        lam = tuple(rng.uniform(0.1, 1.0, len(shape)))
    if c is None:
        c = float(rng.uniform(0.1, 10.0))
    if u is None:
        u = tuple(manifold.random_point(n, r, rng) for n, r in zip(shape, rank))
    return ProblemData(y, omega, lam, c, tuple(u))


def lemma1_suite(n: int = 100, seed=0) -> list[float]:
    """Relative gaps ``|lhs - rhs| / lhs`` on random matrices up to 8 x 12.

    Every other matrix is built rank-deficient.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        rows, cols = int(rng.integers(1, 9)), int(rng.integers(1, 13))
        if i % 2:
            k = int(rng.integers(1, min(rows, cols) + 1))
            x = rng.standard_normal((rows, k)) @ rng.standard_normal((k, cols))
        else:
            x = rng.standard_normal((rows, cols))
        lhs, rhs, _ = lemma1_check(x)
        out.append(abs(lhs - rhs) / lhs)
    return out


Z_SUITE_CONFIG = InnerConfig(cg_tol=1e-13, cg_max_iters=1000)


def z_oracle_suite(n: int = 50, seed=0, cfg: InnerConfig = Z_SUITE_CONFIG) -> list[float]:
    """Relative errors of :func:`cg_solve_z` against :func:`dense_inner_oracle`.

    Shapes up to 5 x 6 x 7 with at most 200 observed entries.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        shape = tuple(int(rng.integers(2, m + 1)) for m in (5, 6, 7))
        total = math.prod(shape)
        m = int(rng.integers(1, min(200, total) + 1))
        rank = tuple(int(rng.integers(1, d + 1)) for d in shape)
        p = random_problem(rng, shape, m, rank)
        s = np.maximum(rng.standard_normal(shape), 0.0)
        want = dense_inner_oracle(p, s).values
        got, _ = cg_solve_z(p, s, DualPair.zeros(p.omega).z, cfg)
        out.append(float(np.linalg.norm(got.values - want) / max(np.linalg.norm(want), np.finfo(float).tiny)))
    return out


NNLS_SUITE_SHAPES = ((2, 2), (2, 3), (3, 3), (3, 4), (2, 6), (2, 2, 2), (2, 2, 3), (2, 3, 2), (3, 2, 2))
NNLS_SUITE_CONFIG = InnerConfig(nnls_tol=1e-12, nnls_max_iters=1000)


def nnls_oracle_suite(n: int = 30, seed=0, cfg: InnerConfig = NNLS_SUITE_CONFIG):
    """Absolute objective gaps of :func:`nnls_solve_s` against the exhaustive oracle."""
    return [abs(a - b) for a, b, _ in nnls_oracle_cases(n, seed, cfg)]


def nnls_oracle_cases(n: int = 30, seed=0, cfg: InnerConfig = NNLS_SUITE_CONFIG):
    """``(ours, oracle, min_entry)`` per instance, with at most 12 entries each."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        shape = NNLS_SUITE_SHAPES[i % len(NNLS_SUITE_SHAPES)]
        total = math.prod(shape)
        rank = tuple(int(rng.integers(1, d + 1)) for d in shape)
        p = random_problem(rng, shape, int(rng.integers(1, total + 1)), rank)
        z = p.y.with_values(rng.standard_normal(len(p.omega)))
        s, _ = nnls_solve_s(p, z, np.zeros(shape), cfg)
        ref = nnls_exhaustive_oracle(p, z)
        h = nnls_hessian(p)
        zd = z.to_dense().reshape(-1)
        out.append((nnls_objective(p, z, s), _quad_objective(h, zd, ref.reshape(-1)), float(s.min())))
    return out


GRADCHECK_SHAPE = (4, 3, 2)
GRADCHECK_RANK = (2, 2, 1)


def gradcheck_config(tol: float = 1e-10) -> InnerConfig:
    return InnerConfig(cg_tol=tol, cg_max_iters=1000, nnls_tol=tol, nnls_max_iters=5000,
                       alternations=1000, alt_rel_tol=tol)


def gradient_check_suite(n: int = 10, n_dirs: int = 5, seed=0, h: float = 1e-5,
                         tol: float = 1e-10) -> list[float]:
    """Central differences of ``g`` along retraction curves vs ``<grad g, xi>``.

    Instances are 4 x 3 x 2 with rank (2, 2, 1), half the entries observed,
    and mixed-sign factors so the nonnegativity multiplier is active at
    some points. Returns one relative error per direction.
    """
    from .outer_solver import cost_g, euclidean_gradient

    rng = np.random.default_rng(seed)
    cfg = gradcheck_config(tol)
    total = math.prod(GRADCHECK_SHAPE)
    out = []
    for _ in range(n):
        u = [manifold.normalize(np.abs(rng.standard_normal((d, r))) - 0.3)
             for d, r in zip(GRADCHECK_SHAPE, GRADCHECK_RANK)]
        p = random_problem(rng, GRADCHECK_SHAPE, total // 2, GRADCHECK_RANK,
                           lam=tuple(rng.dirichlet(np.ones(3))), u=u)
        dual, _ = alternating_inner_solve(p, DualPair.zeros(p.omega), cfg)
        egrad = euclidean_gradient(p.u, p, dual)

        def g_at(v):
            q = p.with_factors(v)
            d, _ = alternating_inner_solve(q, dual, cfg)
            return cost_g(q.u, q, d)

        for _ in range(n_dirs):
            xi = [manifold.project_to_tangent(a, rng.standard_normal(a.shape)) for a in p.u]
            exact = manifold.product_inner(egrad, xi)
            fd = (g_at(manifold.product_retract(p.u, xi, h))
                  - g_at(manifold.product_retract(p.u, xi, -h))) / (2.0 * h)
            out.append(abs(fd - exact) / max(abs(exact), np.finfo(float).tiny))
    return out
