import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bodyfit.optimize import MinimizeOptions, OptimizationError, check_gradient, minimize


def quadratic(a):
    return lambda x: (float(np.sum((x - a) ** 2)), 2.0 * (x - a))


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_quadratic_converges_quickly():
    a = np.arange(1.0, 9.0)
    res = minimize(quadratic(a), np.zeros(8), MinimizeOptions(gtol=1e-12))
    assert np.abs(res.x - a).max() < 1e-8
    assert res.iterations <= len(a) + 5
    assert res.converged


def test_rosenbrock():
    res = minimize(rosenbrock, np.array([-1.2, 1.0]), MinimizeOptions(gtol=1e-12, ftol=1e-15))
    assert np.abs(res.x - 1.0).max() < 1e-6


def test_zero_gradient_start_returns_immediately():
    x0 = np.array([1.0, 2.0])
    res = minimize(quadratic(x0), x0.copy())
    assert res.status == "converged-gradient"
    assert np.array_equal(res.x, x0)
    assert res.iterations == 0


def test_nonfinite_start_is_an_error():
    with pytest.raises(OptimizationError):
        minimize(lambda x: (np.nan, np.zeros_like(x)), np.zeros(2))


def test_max_iter_status():
    res = minimize(rosenbrock, np.array([-1.2, 1.0]), MinimizeOptions(max_iterations=3))
    assert res.status == "max-iter"
    assert res.iterations == 3


def test_invalid_options():
    with pytest.raises(ValueError):
        MinimizeOptions(memory=0)
    with pytest.raises(ValueError):
        MinimizeOptions(ftol=0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_history_non_increasing_and_final_not_worse(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(6, 6))
    H = A @ A.T + 0.1 * np.eye(6)
    b = rng.normal(size=6)

    def f(x):
        return float(0.5 * x @ H @ x - b @ x + 0.1 * np.sum(x**4)), H @ x - b + 0.4 * x**3

    x0 = rng.normal(size=6)
    res = minimize(f, x0)
    hist = np.asarray(res.history)
    assert np.all(np.diff(hist) <= 1e-12 * np.maximum(1.0, np.abs(hist[:-1])))
    assert res.value <= f(x0)[0]


def test_deterministic():
    a = minimize(rosenbrock, np.array([-1.2, 1.0]))
    b = minimize(rosenbrock, np.array([-1.2, 1.0]))
    assert np.array_equal(a.x, b.x) and a.iterations == b.iterations


def test_check_gradient_linear_and_quadratic():
    c = np.array([1.0, -2.0, 3.0])
    # dyadic step: the differences of a linear function are then exact
    assert check_gradient(lambda x: (float(c @ x), c), np.ones(3), step=2.0**-20, samples=3) < 1e-10
    assert check_gradient(quadratic(c), np.zeros(3), samples=3) < 1e-8


def test_check_gradient_detects_wrong_gradient():
    f = quadratic(np.array([1.0, 2.0]))
    err = check_gradient(lambda x: (f(x)[0], 2.0 * f(x)[1]), np.zeros(2), samples=2)
    assert err == pytest.approx(1.0, abs=1e-6)


def test_check_gradient_rejects_bad_step():
    with pytest.raises(ValueError):
        check_gradient(quadratic(np.zeros(2)), np.ones(2), step=0.0)
