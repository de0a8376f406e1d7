import numpy as np
import pytest

from nntc import evaluation as ev
from nntc.tensor_core import SparseTensor


def test_rmse_and_metrics():
    a = np.array([[1.0, -1.0], [0.0, 2.0]])
    assert ev.rmse(a, a) == 0.0
    assert ev.rmse(a, a + 2.0) == pytest.approx(2.0)
    m = ev.metrics(a, np.zeros((2, 2)))
    assert m.negative_fraction == 0.25 and m.min_entry == -1.0
    with pytest.raises(ValueError):
        ev.rmse(a, np.zeros(3))


def test_sample_mask():
    om = ev.sample_mask((10, 10), 0.37, seed=1)
    assert len(om) == 37
    assert om == ev.sample_mask((10, 10), 0.37, seed=1)
    with pytest.raises(ValueError):
        ev.sample_mask((3, 3), 0.0)
    with pytest.raises(ValueError):
        ev.sample_mask((3, 3), 0.01)


def test_synthetic_tensor_is_nonnegative_and_low_rank():
    t = ev.synth_nonneg_lowrank(ev.SyntheticSpec((6, 7, 5), (2, 3, 2), seed=0))
    assert t.min() >= 0
    from nntc.tensor_core import unfold
    ranks = [np.linalg.matrix_rank(unfold(t, k)) for k in range(3)]
    assert ranks == [2, 3, 2]
    noisy = ev.synth_nonneg_lowrank(ev.SyntheticSpec((6, 7, 5), (2, 3, 2), 0, 0.5))
    assert noisy.min() >= 0
    with pytest.raises(ValueError):
        ev.SyntheticSpec((3, 3), (4, 1))


def test_baseline():
    y = SparseTensor((2, 2), [[0, 0], [1, 1]], [1.0, 3.0])
    assert np.array_equal(ev.observed_mean_baseline(y), np.full((2, 2), 2.0))


@pytest.mark.parametrize("n", [1, 2, 5, 9])
def test_jacobi_matches_lapack(n):
    rng = np.random.default_rng(n)
    a = rng.standard_normal((n, n))
    a = a + a.T
    w, v = ev.jacobi_eigh(a)
    assert np.allclose(w, np.linalg.eigvalsh(a), atol=1e-12)
    assert np.allclose(v @ np.diag(w) @ v.T, a, atol=1e-12)
    assert np.allclose(v.T @ v, np.eye(n), atol=1e-12)


def test_nuclear_norm_and_lemma1_on_known_matrix():
    x = np.diag([3.0, 4.0, 0.0])
    assert ev.svd_nuclear_norm(x) == pytest.approx(7.0, rel=1e-15)
    lhs, rhs, theta = ev.lemma1_check(x)
    assert lhs == pytest.approx(49.0) and rhs == pytest.approx(49.0)
    assert np.trace(theta) == pytest.approx(1.0)
    assert np.allclose(theta, np.diag([3 / 7, 4 / 7, 0.0]))


def test_oracle_guards():
    rng = np.random.default_rng(0)
    p = ev.random_problem(rng, (3, 3, 2), 10, (1, 1, 1))
    with pytest.raises(ValueError):
        ev.nnls_exhaustive_oracle(p, p.y)


def test_nnls_oracle_cases_small():
    for ours, ref, smin in ev.nnls_oracle_cases(n=5, seed=3):
        assert abs(ours - ref) <= 1e-8 and smin >= 0


def test_gradient_check_suite_small():
    errs = ev.gradient_check_suite(n=2, n_dirs=2, seed=1)
    assert len(errs) == 4 and max(errs) < 1e-4
