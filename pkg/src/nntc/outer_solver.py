"""Riemannian conjugate gradient over the product of unit-Frobenius spheres.

The outer problem minimizes ``g(U)``, the optimal value of the inner
maximization, over ``U = (U_1, ..., U_K)`` with ``||U_k||_F = 1``. At the
inner maximizer ``(Z, S)`` the Euclidean gradient is
``-(lam_k (Z_k + S_k)(Z_k + S_k)^T U_k)_k``. The completed tensor is

    W = sum_k lam_k (Z + S) x_k (U_k U_k^T).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import manifold
from .inner_solver import DualPair, InnerConfig, InnerStats, ProblemData, alternating_inner_solve
from .tensor_core import ObservationMask, SparseTensor, check_shape, mode_product, unfold

log = logging.getLogger(__name__)

BETA_RULES = ("hs+", "pr+", "fr", "sd")
INIT_RULES = ("spectral", "random")


@dataclass(frozen=True)
class ArmijoConfig:
    c1: float = 1e-4
    factor: float = 0.5
    max_backtracks: int = 5

    def __post_init__(self):
        if not 0 < self.c1 < 1:
            raise ValueError("c1 must lie in (0, 1)")
        if not 0 < self.factor < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be >= 0")


@dataclass(frozen=True)
class SolverConfig:
    """Outer-loop settings.

    ``lam=None`` means equal weights ``1/K``.
    """

    rank: tuple[int, ...]
    lam: tuple[float, ...] | None = None
    c: float = 10.0
    tau: float = 1e-5
    max_outer_iters: int = 200
    armijo: ArmijoConfig = ArmijoConfig()
    beta_rule: str = "hs+"
    seed: int = 0
    init: str = "spectral"
    inner: InnerConfig = InnerConfig()
    stagnation_tol: float = 1e-9
    stagnation_window: int = 5

    def __post_init__(self):
        rank = tuple(int(r) for r in self.rank)
        if len(rank) < 2 or any(r < 1 for r in rank):
            raise ValueError(f"rank must be a tuple of >= 2 positive integers, got {self.rank}")
        object.__setattr__(self, "rank", rank)
        if self.lam is not None:
            lam = tuple(float(v) for v in self.lam)
            if len(lam) != len(rank):
                raise ValueError("lam and rank differ in length")
            if any(not (v > 0 and math.isfinite(v)) for v in lam):
                raise ValueError("every lam_k must be positive")
            object.__setattr__(self, "lam", lam)
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ValueError("C must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if int(self.max_outer_iters) < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.beta_rule not in BETA_RULES:
            raise ValueError(f"beta_rule must be one of {BETA_RULES}")
        if self.init not in INIT_RULES:
            raise ValueError(f"init must be one of {INIT_RULES}")

    def weights(self) -> tuple[float, ...]:
        if self.lam is not None:
            return self.lam
        return (1.0 / len(self.rank),) * len(self.rank)


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    grad_norm: float
    step: float
    displacement: float
    slope: float
    backtracks: int
    cg_iters: int
    nnls_iters: int
    alternations: int
    elapsed: float
    rmse: float | None = None


@dataclass
class SolverState:
    u: list[np.ndarray]
    dual: DualPair
    cost: float
    grad: list[np.ndarray]
    grad_norm: float
    direction: list[np.ndarray]
    iteration: int = 0
    trace: list[IterationRecord] = field(default_factory=list)
    status: str = "running"
    initial_cost: float = math.nan
    last_displacement: float | None = None
    inner_stats: InnerStats | None = None
    started: float = field(default_factory=time.perf_counter)

    @property
    def terminated(self) -> bool:
        return self.status != "running"


@dataclass(frozen=True, eq=False)
class CompletionModel:
    u: tuple[np.ndarray, ...]
    dual: DualPair
    lam: tuple[float, ...]
    c: float
    shape: tuple[int, ...]

    def __post_init__(self):
        shape = check_shape(self.shape)
        object.__setattr__(self, "shape", shape)
        if len(self.u) != len(shape) or len(self.lam) != len(shape):
            raise ValueError("model components do not match the tensor order")
        for k, x in enumerate(self.u):
            if x.shape[0] != shape[k]:
                raise ValueError(f"factor {k} has {x.shape[0]} rows, expected {shape[k]}")
        if self.dual.s.shape != shape or self.dual.z.shape != shape:
            raise ValueError("dual pair shape mismatch")
        if np.any(self.dual.s < 0):
            raise ValueError("S must be nonnegative")


def _dense_sum(dual: DualPair) -> np.ndarray:
    x = np.array(dual.s, dtype=np.float64)
    x.reshape(-1)[dual.z.linear] += dual.z.values
    return x


def _other_axes(order: int, k: int) -> list[int]:
    return [m for m in range(order) if m != k]


def _cost_and_grad(u, p: ProblemData, dual: DualPair):
    x = _dense_sum(dual)
    zv = dual.z.values
    cost = float(zv @ p.y.values - zv @ zv / (4.0 * p.c))
    grads = []
    for k, (lam, uk) in enumerate(zip(p.lam, u)):
        m = mode_product(x, uk.T, k)
        cost -= 0.5 * lam * float(np.vdot(m, m))
        axes = _other_axes(x.ndim, k)
        grads.append(-lam * np.tensordot(x, m, axes=(axes, axes)))
    return cost, grads


def _check_dual(p: ProblemData, dual: DualPair) -> None:
    if dual.z.shape != p.shape or not np.array_equal(dual.z.linear, p.omega.linear):
        raise ValueError("Z must be supported exactly on omega")
    if dual.s.shape != p.shape:
        raise ValueError(f"S has shape {dual.s.shape}, expected {p.shape}")


def cost_g(u, p: ProblemData, dual: DualPair) -> float:
    """``<Z, Y> - ||Z||^2/(4C) - sum_k lam_k/2 ||U_k^T (Z_k + S_k)||^2``."""
    _check_dual(p, dual)
    return _cost_and_grad(u, p, dual)[0]


def euclidean_gradient(u, p: ProblemData, dual: DualPair) -> list[np.ndarray]:
    """``-lam_k (Z_k + S_k)(Z_k + S_k)^T U_k`` for each mode.

    Computed as ``(Z + S)_k M_k`` with ``M_k = (Z_k + S_k)^T U_k`` so the
    large ``n_k x n_k`` Gram matrix is never formed.
    """
    _check_dual(p, dual)
    return _cost_and_grad(u, p, dual)[1]


def _evaluate(p: ProblemData, u, warm: DualPair, cfg: InnerConfig):
    q = p.with_factors(u)
    dual, stats = alternating_inner_solve(q, warm, cfg)
    cost, egrad = _cost_and_grad(q.u, q, dual)
    return dual, stats, cost, egrad


def spectral_init(y: SparseTensor, rank) -> list[np.ndarray]:
    """Starting factors from the zero-filled observations.

    For each mode, ``U_k U_k^T`` is the trace-one matrix
    ``sqrt(X X^T) / tr(sqrt(X X^T))`` of the zero-filled unfolding ``X``,
    truncated to its leading ``r_k`` eigenvectors. For nonnegative data the
    leading eigenvector is nonnegative, so nonnegative tensors are
    representable from the first iterate on.
    """
    yd = y.to_dense()
    out = []
    for k, r in enumerate(rank):
        q, sv, _ = np.linalg.svd(unfold(yd, k), full_matrices=False)
        q, sv = q[:, :r], sv[:r]
        if q.shape[1] < r or not np.any(sv):
            raise ValueError(f"rank {r} exceeds the rank available in mode {k}")
        if np.sum(q[:, 0]) < 0:
            q[:, 0] = -q[:, 0]
        # keep every direction live so the line search can grow it
        sv = np.maximum(sv, 1e-3 * sv[0])
        out.append(manifold.normalize(q * np.sqrt(sv)))
    return out


def initial_state(p: ProblemData, cfg: SolverConfig, u0=None) -> SolverState:
    """Evaluate the inner problem at the starting factors."""
    if u0 is None:
        shapes = list(zip(p.shape, cfg.rank))
        for n, r in shapes:
            if r > n:
                raise ValueError(f"rank {r} exceeds mode size {n}")
        if cfg.init == "spectral":
            u0 = spectral_init(p.y, cfg.rank)
        else:
            u0 = manifold.random_product_point(shapes, cfg.seed)
    u0 = [manifold.normalize(x) for x in u0]
    dual, stats, cost, egrad = _evaluate(p, u0, DualPair.zeros(p.omega), cfg.inner)
    grad = manifold.riemannian_gradient(u0, egrad)
    return SolverState(
        u=u0,
        dual=dual,
        cost=cost,
        grad=grad,
        grad_norm=manifold.product_norm(grad),
        direction=[-g for g in grad],
        initial_cost=cost,
        inner_stats=stats,
    )


def _beta(rule: str, grad_new, grad_old_t, dir_old_t, grad_old_sq: float) -> float:
    if rule == "sd":
        return 0.0
    if rule == "fr":
        return manifold.product_inner(grad_new, grad_new) / grad_old_sq if grad_old_sq else 0.0
    diff = [a - b for a, b in zip(grad_new, grad_old_t)]
    num = manifold.product_inner(grad_new, diff)
    if rule == "hs+":
        den = manifold.product_inner(dir_old_t, diff)
    else:
        den = grad_old_sq
    if den == 0 or not math.isfinite(num / den):
        return 0.0
    return max(num / den, 0.0)


def _line_search(state: SolverState, p: ProblemData, cfg: SolverConfig, d, displacement: float):
    """Armijo backtracking along ``d``; returns the accepted trial or None."""
    dnorm = manifold.product_norm(d)
    slope = manifold.product_inner(state.grad, d)
    t = displacement / dnorm
    arm = cfg.armijo
    for b in range(arm.max_backtracks + 1):
        u_new = manifold.product_retract(state.u, d, t)
        dual, stats, cost, egrad = _evaluate(p, u_new, state.dual, cfg.inner)
        if cost <= state.cost + arm.c1 * t * slope:
            return u_new, dual, stats, cost, egrad, t, slope, b
        t *= arm.factor
    return None, t * dnorm


def rcg_iterate(state: SolverState, p: ProblemData, cfg: SolverConfig,
                truth: np.ndarray | None = None) -> SolverState:
    """One Riemannian CG update with Armijo backtracking.

    Returns a new state; the input state is not modified. If the gradient
    norm is already at most ``cfg.tau`` the state is returned with status
    ``"converged"``.
    """
    if state.terminated:
        return state
    if state.grad_norm <= cfg.tau:
        return replace(state, status="converged")

    d = state.direction
    if manifold.product_inner(d, state.grad) >= 0:
        d = [-g for g in state.grad]
    first = 1.0 if state.last_displacement is None else min(1.0, 2.0 * state.last_displacement)
    found = _line_search(state, p, cfg, d, first)
    if found[0] is None and cfg.beta_rule != "sd":
        log.debug("line search failed along the CG direction; retrying along -grad")
        d = [-g for g in state.grad]
        found = _line_search(state, p, cfg, d, found[1])
    if found[0] is None:
        return replace(state, status="line_search_failed")

    u_new, dual, stats, cost, egrad, t, slope, backtracks = found
    grad_new = manifold.riemannian_gradient(u_new, egrad)
    grad_old_t = manifold.product_transport(state.u, u_new, state.grad)
    dir_old_t = manifold.product_transport(state.u, u_new, d)
    beta = _beta(cfg.beta_rule, grad_new, grad_old_t, dir_old_t, state.grad_norm ** 2)
    direction = [-g + beta * x for g, x in zip(grad_new, dir_old_t)]
    if manifold.product_inner(direction, grad_new) >= 0:
        direction = [-g for g in grad_new]

    dnorm = manifold.product_norm(d)
    record = IterationRecord(
        iteration=state.iteration + 1,
        cost=cost,
        grad_norm=manifold.product_norm(grad_new),
        step=t,
        displacement=t * dnorm,
        slope=slope,
        backtracks=backtracks,
        cg_iters=stats.cg_iters,
        nnls_iters=stats.nnls_iters,
        alternations=stats.alternations_used,
        elapsed=time.perf_counter() - state.started,
    )
    if truth is not None:
        model = CompletionModel(tuple(u_new), dual, p.lam, p.c, p.shape)
        record.rmse = heldout_rmse(model, truth, p.omega)
    return replace(
        state,
        u=u_new,
        dual=dual,
        cost=cost,
        grad=grad_new,
        grad_norm=record.grad_norm,
        direction=direction,
        iteration=state.iteration + 1,
        trace=state.trace + [record],
        last_displacement=record.displacement,
        inner_stats=stats,
    )


def _stagnated(trace, cfg: SolverConfig) -> bool:
    w = cfg.stagnation_window
    if len(trace) <= w:
        return False
    old, new = trace[-1 - w].cost, trace[-1].cost
    return abs(old - new) <= cfg.stagnation_tol * max(abs(new), np.finfo(float).tiny)


def solve(y: SparseTensor, omega: ObservationMask, cfg: SolverConfig,
          truth=None, u0=None, callback=None):
    """Complete a partially observed nonnegative tensor.

    Parameters
    ----------
    y : SparseTensor
        Observed entries; its support must equal ``omega``.
    omega : ObservationMask
        Observed index set, at least one entry.
    cfg : SolverConfig
    truth : ndarray, optional
        Full ground truth; when given, each trace record carries the RMSE on
        the unobserved entries.
    u0 : list of ndarray, optional
        Starting factors; random (seeded by ``cfg.seed``) otherwise.
    callback : callable, optional
        Called with the state after every accepted iteration.

    Returns
    -------
    model : CompletionModel
    state : SolverState
        Final state with the full trace and a termination ``status``.
    """
    if len(omega) == 0:
        raise ValueError("the observation mask is empty")
    order = len(omega.shape)
    if len(cfg.rank) != order:
        raise ValueError(f"rank has {len(cfg.rank)} entries for an order-{order} tensor")
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64)
        if truth.shape != omega.shape:
            raise ValueError("truth shape mismatch")
    p = ProblemData(y, omega, cfg.weights(), cfg.c, tuple(np.zeros((n, 1)) for n in omega.shape))
    state = initial_state(p, cfg, u0)
    while not state.terminated:
        if state.iteration >= cfg.max_outer_iters:
            state = replace(state, status="max_iters")
            break
        state = rcg_iterate(state, p, cfg, truth)
        if state.terminated:
            break
        if callback is not None:
            callback(state)
        if _stagnated(state.trace, cfg):
            state = replace(state, status="stagnated")
    log.info("outer solve finished: %s after %d iterations, cost %.6g, |grad| %.3g",
             state.status, state.iteration, state.cost, state.grad_norm)
    model = CompletionModel(tuple(state.u), state.dual, p.lam, p.c, p.shape)
    return model, state


DEFAULT_MAX_ELEMENTS = 50_000_000


def components(m: CompletionModel, max_elements: int = DEFAULT_MAX_ELEMENTS) -> list[np.ndarray]:
    """The K terms ``lam_k (Z + S) x_k (U_k U_k^T)``."""
    if math.prod(m.shape) > max_elements:
        raise MemoryError(f"tensor of shape {m.shape} exceeds the {max_elements}-element cap")
    x = _dense_sum(m.dual)
    return [lam * mode_product(mode_product(x, u.T, k), u, k)
            for k, (lam, u) in enumerate(zip(m.lam, m.u))]


def reconstruct(m: CompletionModel, max_elements: int = DEFAULT_MAX_ELEMENTS) -> np.ndarray:
    out = np.zeros(m.shape)
    for w in components(m, max_elements):
        out += w
    return out


def predict_entries(m: CompletionModel, indices) -> np.ndarray:
    """Entries of the completed tensor at ``indices`` (an ``(n, K)`` array)."""
    order = len(m.shape)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return np.zeros(0)
    idx = idx.reshape(-1, order)
    if np.any(idx < 0) or np.any(idx >= np.asarray(m.shape)):
        raise IndexError("index out of bounds")
    x = _dense_sum(m.dual)
    out = np.zeros(idx.shape[0])
    for k, (lam, u) in enumerate(zip(m.lam, m.u)):
        mk = np.moveaxis(mode_product(x, u.T, k), k, -1)
        other = tuple(idx[:, j] for j in range(order) if j != k)
        out += lam * np.einsum("ij,ij->i", u[idx[:, k]], mk[other])
    return out


def heldout_rmse(m: CompletionModel, truth: np.ndarray, omega: ObservationMask) -> float:
    """RMSE over the entries not in omega (all entries if omega is full)."""
    w = reconstruct(m)
    held = ~omega.dense_mask()
    if not held.any():
        held = np.ones(m.shape, dtype=bool)
    diff = (w - truth)[held]
    return float(np.sqrt(np.mean(diff * diff)))
