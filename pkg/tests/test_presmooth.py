import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffvdfr.basis import difference_matrix, eval_basis
from ffvdfr.presmooth import (
    DEFAULT_LAMBDA_GRID,
    VariableDomainDataset,
    curve_basis,
    gcv_score,
    hat_trace,
    select_lambda_gcv,
    smooth_all,
    smooth_curve,
)
from ffvdfr.simstudy import gen_curve


def grid_points(m=50, hi=20.0):
    return np.linspace(0.0, hi, m)


def test_zero_data_gives_zero_coefficients():
    assert not np.any(smooth_curve(grid_points(), np.zeros(50), 25, 3.0))


@pytest.mark.parametrize("lam", [1e-3, 1.0, 1e4])
def test_linear_data_reproduced(lam):
    t = grid_points()
    x = 2.5 - 0.75 * t
    a = smooth_curve(t, x, 25, lam)
    fitted = eval_basis(curve_basis(t, 25), t) @ a
    np.testing.assert_allclose(fitted, x, atol=1e-8)


def test_matches_dense_normal_equations():
    rng = np.random.default_rng(0)
    t = grid_points()
    x = np.sin(t / 3) + rng.normal(0, 0.2, t.size)
    lam, _ = select_lambda_gcv(t, x, 25)
    phi = eval_basis(curve_basis(t, 25), t)
    d = difference_matrix(2, 25)
    direct = np.linalg.solve(phi.T @ phi + lam * d.T @ d, phi.T @ x)
    np.testing.assert_allclose(smooth_curve(t, x, 25, lam), direct, atol=1e-10)


def test_too_few_points_rejected():
    with pytest.raises(ValueError, match="minimum"):
        smooth_curve(np.arange(5.0), np.zeros(5), 25, 1.0)


def test_unpenalized_rank_deficient_system_is_explicit_error():
    t = np.linspace(0, 1, 12)
    with pytest.raises(np.linalg.LinAlgError):
        smooth_curve(t, np.sin(t), 25, 0.0)


def _noise_choices(trials=100):
    rng = np.random.default_rng(11)
    t = np.arange(1.0, 41.0)
    return [select_lambda_gcv(t, rng.normal(size=t.size), 25)[0] for _ in range(trials)]


@pytest.mark.xfail(strict=True, reason="GCV picks the largest grid value for pure noise in "
                   "about 55% of trials at every sample size tried (15-100 points)")
def test_pure_noise_selects_largest_lambda_90_percent():
    assert sum(lam == DEFAULT_LAMBDA_GRID[-1] for lam in _noise_choices()) >= 90


def test_pure_noise_largest_lambda_is_modal_choice():
    choices = _noise_choices()
    counts = {lam: choices.count(lam) for lam in set(choices)}
    assert max(counts, key=counts.get) == DEFAULT_LAMBDA_GRID[-1]
    assert counts[DEFAULT_LAMBDA_GRID[-1]] >= 45


def _cubic():
    t = np.linspace(0.0, 1.0, 60)
    return t, 1 + t - 2 * t**2 + t**3


@pytest.mark.xfail(strict=True, reason="a cubic is not in the null space of the second-"
                   "difference penalty, so GCV prefers the smallest grid value")
def test_noiseless_cubic_selects_largest_lambda():
    t, x = _cubic()
    assert select_lambda_gcv(t, x, 25)[0] == DEFAULT_LAMBDA_GRID[-1]


def test_noiseless_cubic_fit_is_exact_at_selected_lambda():
    t, x = _cubic()
    lam, _ = select_lambda_gcv(t, x, 25)
    fitted = eval_basis(curve_basis(t, 25), t) @ smooth_curve(t, x, 25, lam)
    assert np.sum((fitted - x) ** 2) < 1e-6


def test_noiseless_line_selects_largest_lambda():
    t = np.linspace(0.0, 1.0, 60)
    lam, _ = select_lambda_gcv(t, 0.3 + 2 * t, 25)
    assert lam == DEFAULT_LAMBDA_GRID[-1]


def test_single_point_grid():
    t = grid_points()
    x = np.cos(t)
    lam, score = select_lambda_gcv(t, x, 25, grid=[1.0])
    assert lam == 1.0
    assert score == pytest.approx(gcv_score(t, x, 25, 1.0), rel=1e-10)


def test_selected_lambda_minimizes_gcv_on_grid():
    rng = np.random.default_rng(5)
    t = np.arange(0.0, 30.0)
    x = np.sin(t / 4) + rng.normal(0, 0.3, t.size)
    lam, score = select_lambda_gcv(t, x, 25)
    direct = [gcv_score(t, x, 25, g) for g in DEFAULT_LAMBDA_GRID]
    assert score <= min(direct) * (1 + 1e-8)
    assert score == pytest.approx(gcv_score(t, x, 25, lam), rel=1e-8)


def test_hat_trace_nonincreasing_in_lambda():
    t = np.arange(0.0, 35.0)
    tr = [hat_trace(t, 25, g) for g in DEFAULT_LAMBDA_GRID]
    assert np.all(np.diff(tr) <= 1e-9)
    assert tr[-1] == pytest.approx(2.0, abs=0.05)


def test_large_lambda_gives_least_squares_line():
    rng = np.random.default_rng(2)
    t = np.sort(rng.uniform(0, 10, 40))
    x = rng.normal(size=40)
    fitted = eval_basis(curve_basis(t, 25), t) @ smooth_curve(t, x, 25, 1e12)
    line = np.polyval(np.polyfit(t, x, 1), t)
    assert np.max(np.abs(fitted - line)) < 1e-4 * max(1.0, np.max(np.abs(line)))


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_solution_is_linear_in_values(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 15, 30))
    t[0] = 0.0
    v1, v2 = rng.normal(size=(2, 30))
    lhs = smooth_curve(t, alpha * v1 + beta * v2, 25, 0.7)
    rhs = alpha * smooth_curve(t, v1, 25, 0.7) + beta * smooth_curve(t, v2, 25, 0.7)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def _curves(sigma, n=100, seed=0):
    rng = np.random.default_rng(seed)
    domains = rng.integers(10, 101, n)
    truth, noisy = [], []
    for T in domains:
        clean = gen_curve(T, 0.0, np.random.default_rng(rng.integers(2**32)))
        truth.append(clean)
        noisy.append(clean + rng.normal(0, sigma, T) if sigma else clean)
    pts = [np.arange(1.0, T + 1) for T in domains]
    return VariableDomainDataset(points=pts, values=noisy), truth


def test_smooth_curves_recovered():
    data, truth = _curves(0.0)
    sm = smooth_all(data)
    mse = np.mean([np.mean((sm.evaluate(i, data.points[i]) - truth[i]) ** 2)
                   for i in range(len(data))])
    assert mse < 0.05


def test_noisy_curves_denoised():
    data, truth = _curves(1.0, seed=1)
    sm = smooth_all(data)
    better = [np.mean((sm.evaluate(i, data.points[i]) - truth[i]) ** 2)
              < np.mean((data.values[i] - truth[i]) ** 2) for i in range(len(data))]
    assert np.mean(better) >= 0.95


def test_smooth_all_single_subject_matches_direct_path():
    t = np.arange(1.0, 31.0)
    x = np.sin(t / 5)
    sm = smooth_all(VariableDomainDataset(points=[t], values=[x]))
    basis = curve_basis(t, 25)
    lam, score = select_lambda_gcv(t, x, 25, basis=basis)
    assert sm.lambdas[0] == lam and sm.gcv[0] == score
    np.testing.assert_allclose(sm.coefficients[0], smooth_curve(t, x, 25, lam, basis=basis))
    assert sm.bases[0].domain == (0.0, 30.0)


def test_smooth_all_annotates_subject():
    t = np.arange(0.0, 12.0)
    data = VariableDomainDataset(points=[t], values=[np.zeros(12)], ids=["abc"])
    with pytest.raises(ValueError, match="subject abc"):
        smooth_all(data, grid=[-1.0])


@pytest.mark.parametrize("kwargs,match", [
    (dict(points=[np.arange(5.0)], values=[np.zeros(5)]), "minimum"),
    (dict(points=[np.array([0.0, 2, 1, *range(3, 12)])], values=[np.zeros(12)]), "increasing"),
    (dict(points=[np.arange(-1.0, 11)], values=[np.zeros(12)]), ">= 0"),
    (dict(points=[np.arange(12.0)], values=[np.zeros(12)], y=[1.0, 2.0]), "response length"),
])
def test_dataset_validation(kwargs, match):
    with pytest.raises(ValueError, match=match):
        VariableDomainDataset(**kwargs)
