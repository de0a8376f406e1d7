"""Inner concave maximization over the dual pair (Z, S) for fixed factors U.

The inner objective is

    phi(Z, S) = <Z, Y> - ||Z||^2 / (4C) - sum_k lam_k / 2 ||U_k^T (Z_k + S_k)||^2

with Z supported on the observed set and S >= 0 elementwise. It is maximized
by block ascent: an exact linear CG solve in Z, then a nonnegative least
squares solve in S.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    ObservationMask,
    SparseTensor,
    as_dense,
    mode_product,
    sym_product_on_omega,
)


@dataclass(frozen=True)
class InnerConfig:
    cg_tol: float = 1e-8
    cg_max_iters: int = 250
    nnls_tol: float = 1e-8
    nnls_max_iters: int = 100
    alternations: int = 3
    alt_rel_tol: float = 1e-6
    # Forbid S on observed entries with positive value.
    restrict_s_support: bool = False

    def __post_init__(self):
        for name in ("cg_tol", "nnls_tol", "alt_rel_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("cg_max_iters", "nnls_max_iters", "alternations"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True, eq=False)
class ProblemData:
    """Observed data, regularization weights and the current factors."""

    y: SparseTensor
    omega: ObservationMask
    lam: tuple[float, ...]
    c: float
    u: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.y.shape != self.omega.shape or not np.array_equal(self.y.linear, self.omega.linear):
            raise ValueError("support of the observed tensor must equal omega")
        if len(self.omega) < 1:
            raise ValueError("omega must contain at least one index")
        order = len(self.omega.shape)
        lam = tuple(float(v) for v in self.lam)
        if len(lam) != order:
            raise ValueError(f"expected {order} regularization weights, got {len(lam)}")
        # lam_k = 0 is allowed here for diagnostics; the outer solver requires lam_k > 0
        if any(not (v >= 0 and math.isfinite(v)) for v in lam):
            raise ValueError("regularization weights must be finite and nonnegative")
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ValueError("C must be positive")
        u = tuple(np.asarray(x, dtype=np.float64) for x in self.u)
        if len(u) != order:
            raise ValueError(f"expected {order} factors, got {len(u)}")
        for k, (x, n) in enumerate(zip(u, self.omega.shape)):
            if x.ndim != 2 or x.shape[0] != n:
                raise ValueError(f"factor {k} has shape {x.shape}, expected ({n}, r)")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "u", u)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.omega.shape

    def with_factors(self, u) -> "ProblemData":
        return ProblemData(self.y, self.omega, self.lam, self.c, tuple(u))


@dataclass(frozen=True, eq=False)
class DualPair:
    z: SparseTensor
    s: np.ndarray

    @classmethod
    def zeros(cls, omega: ObservationMask) -> "DualPair":
        return cls(SparseTensor(omega.shape, omega.indices, np.zeros(len(omega))), np.zeros(omega.shape))


@dataclass
class CGStats:
    iters: int
    residual: float
    converged: bool


@dataclass
class NNLSStats:
    iters: int
    kkt_residual: float
    converged: bool
    objective: float
    restarts: int = 0


@dataclass
class InnerStats:
    cg_iters: int = 0
    nnls_iters: int = 0
    alternations_used: int = 0
    objective: float = 0.0
    cg_residual: float = 0.0
    nnls_kkt_residual: float = 0.0
    # Smallest change of the objective over any block step (negative = decrease).
    min_step_gain: float = math.inf
    history: list[float] = field(default_factory=list)


def _z_values(z: SparseTensor, omega: ObservationMask) -> np.ndarray:
    if z.shape != omega.shape or not np.array_equal(z.linear, omega.linear):
        raise ValueError("Z must be supported exactly on omega")
    return np.array(z.values)


def _embed(values: np.ndarray, omega: ObservationMask) -> np.ndarray:
    out = np.zeros(omega.shape)
    out.reshape(-1)[omega.linear] = values
    return out


def _normal_values(zv: np.ndarray, p: ProblemData) -> np.ndarray:
    out = zv / (2.0 * p.c)
    for k, (lam, u) in enumerate(zip(p.lam, p.u)):
        if lam:
            out += lam * sym_product_on_omega(zv, u, k, p.omega)
    return out


def apply_normal_operator(z: SparseTensor, p: ProblemData) -> SparseTensor:
    """``Z/(2C) + sum_k lam_k (Z x_k U_k U_k^T)``, restricted to omega."""
    return z.with_values(_normal_values(_z_values(z, p.omega), p))


def _sym_dense(x: np.ndarray, u: np.ndarray, k: int) -> np.ndarray:
    return mode_product(mode_product(x, u.T, k), u, k)


def _rhs_values(p: ProblemData, s: np.ndarray) -> np.ndarray:
    out = np.array(p.y.values)
    if not np.any(s):
        return out
    sel = p.omega.tuple_index()
    for k, (lam, u) in enumerate(zip(p.lam, p.u)):
        if lam:
            out -= lam * _sym_dense(s, u, k)[sel]
    return out


def build_rhs(p: ProblemData, s) -> SparseTensor:
    """``Y - sum_k lam_k (S x_k U_k U_k^T)``, restricted to omega."""
    s = as_dense(s, p.shape)
    return p.y.with_values(_rhs_values(p, s))


def _cg(p: ProblemData, b: np.ndarray, x: np.ndarray, tol: float, max_iters: int):
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), CGStats(0, 0.0, True)
    r = b - _normal_values(x, p)
    rr = float(r @ r)
    rel = math.sqrt(rr) / bnorm
    d = r.copy()
    it = 0
    while rel > tol and it < max_iters:
        ad = _normal_values(d, p)
        alpha = rr / float(d @ ad)
        x = x + alpha * d
        r = r - alpha * ad
        rr_new = float(r @ r)
        it += 1
        if not math.isfinite(rr_new):
            raise FloatingPointError("non-finite residual in CG; inputs are ill-conditioned")
        rel = math.sqrt(rr_new) / bnorm
        d = r + (rr_new / rr) * d
        rr = rr_new
    if it:
        rel = float(np.linalg.norm(b - _normal_values(x, p))) / bnorm
    return x, CGStats(it, rel, rel <= tol)


def cg_solve_z(p: ProblemData, s, z0: SparseTensor, cfg: InnerConfig = InnerConfig()):
    """Solve the Z block exactly (to ``cfg.cg_tol`` relative residual) by linear CG.

    Returns ``(z, CGStats)``; ``z`` is supported on omega.
    """
    s = as_dense(s, p.shape)
    x, stats = _cg(p, _rhs_values(p, s), _z_values(z0, p.omega), cfg.cg_tol, cfg.cg_max_iters)
    return p.y.with_values(x), stats


def _moments(x: np.ndarray, p: ProblemData):
    """Objective ``sum_k lam_k/2 ||U_k^T X_k||^2`` and its gradient in X."""
    f = 0.0
    grad = np.zeros_like(x)
    for k, (lam, u) in enumerate(zip(p.lam, p.u)):
        if not lam:
            continue
        m = mode_product(x, u.T, k)
        f += 0.5 * lam * float(np.vdot(m, m))
        grad += lam * mode_product(m, u, k)
    return f, grad


def nnls_objective(p: ProblemData, z: SparseTensor, s) -> float:
    """``sum_k lam_k/2 ||U_k^T (Z_k + S_k)||^2``."""
    s = as_dense(s, p.shape)
    return _moments(_embed(_z_values(z, p.omega), p.omega) + s, p)[0]


def lipschitz_bound(p: ProblemData) -> float:
    """Spectral norm of the Hessian ``sum_k lam_k (I x_k U_k U_k^T)``.

    The mode-wise projectors commute, so the bound is attained:
    ``sum_k lam_k ||U_k||_2^2 <= sum_k lam_k``.
    """
    return float(sum(lam * np.linalg.norm(u, 2) ** 2 for lam, u in zip(p.lam, p.u)))


def _s_mask(p: ProblemData, cfg: InnerConfig) -> np.ndarray | None:
    if not cfg.restrict_s_support:
        return None
    allowed = np.ones(p.shape, dtype=bool)
    sel = p.omega.tuple_index()
    allowed[sel] = ~(p.y.values > 0)
    return allowed


def _hessian_apply(v: np.ndarray, p: ProblemData) -> np.ndarray:
    out = np.zeros_like(v)
    for k, (lam, u) in enumerate(zip(p.lam, p.u)):
        if lam:
            out += lam * _sym_dense(v, u, k)
    return out


def _face_cg(p: ProblemData, g: np.ndarray, free: np.ndarray, max_iters: int) -> np.ndarray:
    """Approximate Newton step on the free variables: ``H_FF d = -g_F``."""
    d = np.zeros_like(g)
    r = np.where(free, -g, 0.0)
    rr = float(np.vdot(r, r))
    stop = (FACE_CG_RTOL ** 2) * rr
    q = r.copy()
    for _ in range(max_iters):
        if rr <= stop or rr == 0.0:
            break
        hq = _hessian_apply(q, p)
        hq[~free] = 0.0
        curv = float(np.vdot(q, hq))
        if not curv > 0:
            break
        a = rr / curv
        d += a * q
        r -= a * hq
        rr_new = float(np.vdot(r, r))
        q = r + (rr_new / rr) * q
        rr = rr_new
    return d


FACE_CG_ITERS = 25
FACE_CG_RTOL = 1e-12
ARC_BACKTRACKS = 12


def nnls_solve_s(p: ProblemData, z: SparseTensor, s0, cfg: InnerConfig = InnerConfig()):
    """Minimize ``sum_k lam_k/2 ||U_k^T (Z_k + S_k)||^2`` over ``S >= 0``.

    Each iteration takes a projected gradient step with step ``1/L``
    (``L`` from :func:`lipschitz_bound`), which fixes the active set,
    then runs CG on the free entries and searches back along the projected
    arc. Every iterate has an objective no larger than the previous one.
    Stops when ``||S - max(0, S - grad)||_F <= cfg.nnls_tol``.

    Returns ``(s, NNLSStats)``; ``restarts`` counts face steps rejected by
    the arc search.
    """
    s0 = as_dense(s0, p.shape)
    if np.any(s0 < 0):
        raise ValueError("initial S must be nonnegative")
    zd = _embed(_z_values(z, p.omega), p.omega)
    allowed = _s_mask(p, cfg)

    def proj(v):
        v = np.maximum(v, 0.0)
        if allowed is not None:
            v[~allowed] = 0.0
        return v

    def kkt(s, g):
        return float(np.linalg.norm(s - proj(s - g)))

    def moments(s):
        f, g = _moments(zd + s, p)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite NNLS gradient")
        return f, g

    s = proj(s0)
    f, g = moments(s)
    res = kkt(s, g)
    lip = lipschitz_bound(p)
    if lip == 0:
        return s, NNLSStats(0, res, res <= cfg.nnls_tol, f)

    it = rejected = 0
    while res > cfg.nnls_tol and it < cfg.nnls_max_iters:
        it += 1
        s_pg = proj(s - g / lip)
        f_pg, g_pg = moments(s_pg)
        if f_pg > f:
            # only rounding can get here; keep the current iterate
            s_pg, f_pg, g_pg = s, f, g
        free = (s_pg > 0) | (g_pg < 0)
        if allowed is not None:
            free &= allowed
        d = _face_cg(p, g_pg, free, FACE_CG_ITERS)
        s, f, g = s_pg, f_pg, g_pg
        if np.any(d):
            alpha = 1.0
            for _ in range(ARC_BACKTRACKS):
                s_c = proj(s_pg + alpha * d)
                f_c, g_c = moments(s_c)
                if f_c <= f_pg + 1e-4 * float(np.vdot(g_pg, s_c - s_pg)):
                    s, f, g = s_c, f_c, g_c
                    break
                alpha *= 0.5
            else:
                rejected += 1
        res = kkt(s, g)
    return s, NNLSStats(it, res, res <= cfg.nnls_tol, f, rejected)


def inner_objective(p: ProblemData, z: SparseTensor, s) -> float:
    """Value of the inner objective at ``(z, s)``."""
    zv = _z_values(z, p.omega)
    return float(zv @ p.y.values - zv @ zv / (4.0 * p.c)) - nnls_objective(p, z, s)


def _z_terms(p: ProblemData, zv: np.ndarray) -> float:
    return float(zv @ p.y.values - zv @ zv / (4.0 * p.c))


def _joint_face_step(p: ProblemData, z: SparseTensor, s: np.ndarray, phi: float,
                     cfg: InnerConfig, allowed: np.ndarray | None):
    """Newton step in ``(Z, S_F)`` with ``F = {S > 0}``, then a projected arc search.

    Block ascent alone is slow when Z and S compete for the same entries;
    this step maximizes the objective jointly over the current face.
    Returns ``(z, s, phi, cg_iters)``; the objective does not decrease.
    """
    face = s > 0
    if allowed is not None:
        face &= allowed
    if not face.any():
        return z, s, phi, 0
    sel = p.omega.tuple_index()
    two_c = 2.0 * p.c
    zv = z.values
    hx = _hessian_apply(_embed(zv, p.omega) + s, p)
    rz = p.y.values - zv / two_c - hx[sel]
    rs = np.where(face, -hx, 0.0)

    def apply(vz, vs):
        he = _hessian_apply(_embed(vz, p.omega) + vs, p)
        return vz / two_c + he[sel], np.where(face, he, 0.0)

    bnorm = math.sqrt(float(rz @ rz) + float(np.vdot(rs, rs)))
    if bnorm == 0:
        return z, s, phi, 0
    dz, ds = np.zeros_like(zv), np.zeros_like(s)
    qz, qs = rz.copy(), rs.copy()
    rr = bnorm * bnorm
    it = 0
    while math.sqrt(rr) > cfg.cg_tol * bnorm and it < cfg.cg_max_iters:
        az, as_ = apply(qz, qs)
        curv = float(qz @ az) + float(np.vdot(qs, as_))
        if not curv > 0:
            break
        a = rr / curv
        dz += a * qz
        ds += a * qs
        rz -= a * az
        rs -= a * as_
        rr_new = float(rz @ rz) + float(np.vdot(rs, rs))
        qz = rz + (rr_new / rr) * qz
        qs = rs + (rr_new / rr) * qs
        rr = rr_new
        it += 1
    t = 1.0
    for _ in range(ARC_BACKTRACKS):
        z_new = z.with_values(zv + t * dz)
        s_new = np.maximum(s + t * ds, 0.0)
        phi_new = inner_objective(p, z_new, s_new)
        if phi_new >= phi:
            return z_new, s_new, phi_new, it
        t *= 0.5
    return z, s, phi, it


def alternating_inner_solve(p: ProblemData, warm: DualPair, cfg: InnerConfig = InnerConfig()):
    """Block ascent on ``(Z, S)`` from a warm start.

    Each round solves for Z, then for S, then takes a joint step over Z and
    the free entries of S. Stops after ``cfg.alternations`` rounds or when a
    round changes the objective by less than ``cfg.alt_rel_tol`` relatively.
    Returns ``(DualPair, InnerStats)``.
    """
    z, s = warm.z, as_dense(warm.s, p.shape)
    if np.any(s < 0):
        raise ValueError("warm-start S must be nonnegative")
    allowed = _s_mask(p, cfg)
    stats = InnerStats()
    phi = inner_objective(p, z, s)
    stats.history.append(phi)
    for _ in range(cfg.alternations):
        z, cst = cg_solve_z(p, s, z, cfg)
        phi_z = inner_objective(p, z, s)
        s, nst = nnls_solve_s(p, z, s, cfg)
        phi_s = _z_terms(p, z.values) - nst.objective
        z, s, phi_j, jit = _joint_face_step(p, z, s, phi_s, cfg, allowed)

        stats.cg_iters += cst.iters + jit
        stats.nnls_iters += nst.iters
        stats.alternations_used += 1
        stats.cg_residual = cst.residual
        stats.nnls_kkt_residual = nst.kkt_residual
        stats.min_step_gain = min(stats.min_step_gain, phi_z - phi, phi_s - phi_z, phi_j - phi_s)
        stats.history.extend([phi_z, phi_s, phi_j])

        change = abs(phi_j - phi)
        phi = phi_j
        if change <= cfg.alt_rel_tol * max(abs(phi), np.finfo(float).tiny):
            break
    stats.objective = phi
    return DualPair(z, s), stats
