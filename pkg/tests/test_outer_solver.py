import numpy as np
import pytest

from nntc import evaluation as ev
from nntc import manifold as mf
from nntc.inner_solver import DualPair, InnerConfig, alternating_inner_solve
from nntc.outer_solver import (
    ArmijoConfig,
    CompletionModel,
    SolverConfig,
    components,
    cost_g,
    euclidean_gradient,
    heldout_rmse,
    predict_entries,
    reconstruct,
    solve,
    spectral_init,
)
from nntc.tensor_core import project_omega


@pytest.fixture(scope="module")
def small_run():
    truth = ev.synth_nonneg_lowrank(ev.SyntheticSpec((6, 5, 4), (2, 2, 2), seed=3))
    omega = ev.sample_mask(truth.shape, 0.5, seed=3)
    y = project_omega(truth, omega)
    cfg = SolverConfig(rank=(2, 2, 2), max_outer_iters=25)
    model, state = solve(y, omega, cfg, truth=truth)
    return truth, omega, y, model, state


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(rank=(2,))
    with pytest.raises(ValueError):
        SolverConfig(rank=(2, 2), lam=(1.0, 0.0))
    with pytest.raises(ValueError):
        SolverConfig(rank=(2, 2), beta_rule="dy")
    with pytest.raises(ValueError):
        ArmijoConfig(c1=1.5)
    assert SolverConfig(rank=(1, 1, 1)).weights() == pytest.approx((1 / 3,) * 3)


def test_gradient_formula_matches_finite_differences_at_fixed_dual():
    # by Danskin only the explicit dependence on U matters, so fix the dual pair
    rng = np.random.default_rng(0)
    p = ev.random_problem(rng, (4, 3, 3), 15, (2, 2, 2))
    dual, _ = alternating_inner_solve(p, DualPair.zeros(p.omega), InnerConfig())
    g = euclidean_gradient(p.u, p, dual)
    for k in range(3):
        e = np.zeros_like(p.u[k])
        e[1, 0] = 1.0
        up = [x + 1e-6 * e if j == k else x for j, x in enumerate(p.u)]
        um = [x - 1e-6 * e if j == k else x for j, x in enumerate(p.u)]
        fd = (cost_g(up, p, dual) - cost_g(um, p, dual)) / 2e-6
        assert fd == pytest.approx(g[k][1, 0], rel=1e-6, abs=1e-9)


def test_spectral_init_on_sphere_and_nonnegative_leading_direction():
    truth = ev.synth_nonneg_lowrank(ev.SyntheticSpec((5, 4, 3), (2, 2, 2)))
    y = project_omega(truth, ev.sample_mask(truth.shape, 0.6, 0))
    us = spectral_init(y, (2, 2, 1))
    assert [u.shape for u in us] == [(5, 2), (4, 2), (3, 1)]
    for u in us:
        assert np.linalg.norm(u) == pytest.approx(1.0)
        assert np.all(u[:, 0] >= -1e-12) or np.all(u[:, 0] <= 1e-12)


def test_solve_trace_monotone(small_run):
    *_, state = small_run
    costs = [state.initial_cost] + [r.cost for r in state.trace]
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert [r.iteration for r in state.trace] == list(range(1, len(state.trace) + 1))
    assert all(r.rmse is not None for r in state.trace)
    assert state.status in ("converged", "stagnated", "max_iters", "line_search_failed")


def test_solution_beats_baseline_and_is_nearly_nonnegative(small_run):
    truth, omega, y, model, state = small_run
    w = reconstruct(model)
    base = ev.observed_mean_baseline(y)
    held = ~omega.dense_mask()
    err = np.sqrt(np.mean((w - truth)[held] ** 2))
    assert err < np.sqrt(np.mean((base - truth)[held] ** 2))
    assert err == pytest.approx(heldout_rmse(model, truth, omega))
    assert w.min() >= -1e-3 * np.abs(w).max()
    assert np.all(model.dual.s >= 0)


def test_components_and_entry_prediction(small_run):
    *_, model, _ = small_run
    w = reconstruct(model)
    assert np.allclose(sum(components(model)), w)
    idx = np.array([[0, 0, 0], [5, 4, 3], [2, 1, 0]])
    assert np.allclose(predict_entries(model, idx), w[tuple(idx.T)], atol=1e-13)
    with pytest.raises(IndexError):
        predict_entries(model, [[6, 0, 0]])
    with pytest.raises(MemoryError):
        reconstruct(model, max_elements=10)


def test_solve_is_deterministic():
    truth = ev.synth_nonneg_lowrank(ev.SyntheticSpec((5, 4, 3), (2, 2, 2), seed=1))
    omega = ev.sample_mask(truth.shape, 0.5, 1)
    y = project_omega(truth, omega)
    cfg = SolverConfig(rank=(2, 2, 2), max_outer_iters=5, init="random", seed=4)
    a, sa = solve(y, omega, cfg)
    b, sb = solve(y, omega, cfg)
    assert [r.cost for r in sa.trace] == [r.cost for r in sb.trace]
    assert np.array_equal(reconstruct(a), reconstruct(b))


def test_callback_and_explicit_start():
    truth = ev.synth_nonneg_lowrank(ev.SyntheticSpec((4, 4, 3), (1, 1, 1), seed=2))
    omega = ev.sample_mask(truth.shape, 0.5, 2)
    seen = []
    u0 = mf.random_product_point([(4, 1), (4, 1), (3, 1)], 0)
    _, state = solve(project_omega(truth, omega), omega,
                     SolverConfig(rank=(1, 1, 1), max_outer_iters=3), u0=u0,
                     callback=lambda s: seen.append(s.iteration))
    assert seen == list(range(1, len(seen) + 1))
    assert len(seen) == state.iteration or state.status != "max_iters"


def test_solve_rejects_bad_input():
    truth = np.ones((3, 3))
    omega = ev.sample_mask(truth.shape, 0.5, 0)
    y = project_omega(truth, omega)
    with pytest.raises(ValueError):
        solve(y, omega, SolverConfig(rank=(1, 1, 1)))
    with pytest.raises(ValueError):
        solve(y, omega, SolverConfig(rank=(4, 1)))
    with pytest.raises(ValueError):
        CompletionModel(tuple(np.ones((3, 1)) for _ in range(2)),
                        DualPair(y.with_values(np.zeros(len(omega))), -np.ones((3, 3))),
                        (0.5, 0.5), 1.0, (3, 3))
