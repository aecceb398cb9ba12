import math

import numpy as np
import pytest

from src.exceptions import InputError, QuadratureEvaluationError
from src.quadrature import (
    CumulativeIntegral,
    get_rule,
    integrate,
    integrate_nested,
    integrate_panels,
    panel_edges,
)


@pytest.mark.parametrize("kind", ["gk7", "gk15"])
def test_rule_weights_integrate_constants(kind):
    rule = get_rule(kind)
    assert rule.weights_kronrod.sum() == pytest.approx(2.0, abs=1e-14)
    assert rule.weights_gauss.sum() == pytest.approx(2.0, abs=1e-14)


def test_gk15_integrates_polynomials_exactly():
    """Test that the 15-point Kronrod rule is exact up to degree 22 on one panel."""
    rule = get_rule("gk15")
    result = integrate(rule, lambda x: x**22, 0.0, 1.0)
    assert result.value == pytest.approx(1.0 / 23.0, rel=1e-13)


def test_integrate_exponential():
    result = integrate(get_rule("gk15"), np.exp, 0.0, 1.0)
    assert result.value == pytest.approx(math.e - 1.0, rel=1e-14)
    assert result.error_estimate < 1e-8


def test_integrate_panels_at_kink():
    """Test that breakpoints at a kink restore full accuracy."""
    f = lambda x: np.abs(x - 0.3)  # noqa: E731
    exact = 0.3**2 / 2 + 0.7**2 / 2
    cut = integrate_panels(get_rule("gk15"), f, 0.0, 1.0, breakpoints=[0.3])
    assert cut.value == pytest.approx(exact, abs=1e-14)


def test_panel_edges_ignore_outside_breakpoints():
    edges = panel_edges(1.0, 3.0, [0.5, 1.0, 2.0, 3.0, 4.0])
    assert edges.tolist() == [1.0, 2.0, 3.0]


def test_zero_width_interval_integrates_to_zero():
    assert integrate_panels(get_rule("gk15"), np.exp, 2.0, 2.0).value == 0.0


def test_reversed_interval_raises():
    with pytest.raises(InputError):
        integrate(get_rule("gk15"), np.exp, 1.0, 0.0)


def test_non_finite_integrand_reports_node():
    def f(x):
        return np.where(x > 0.5, np.inf, 1.0)

    with pytest.raises(QuadratureEvaluationError) as exc_info:
        integrate(get_rule("gk15"), f, 0.0, 1.0)
    assert exc_info.value.node > 0.5


def test_unknown_rule_raises():
    with pytest.raises(InputError):
        get_rule("gk21")


def test_cumulative_integral_matches_antiderivative():
    cumulative = CumulativeIntegral(get_rule("gk15"), np.cos, lower=0.0, breakpoints=[1.0, 2.0, 3.0])
    x = np.array([0.0, 0.4, 1.0, 2.5, 3.9])
    assert np.allclose(cumulative(x), np.sin(x), atol=1e-13)


def test_cumulative_integral_rejects_limits_below_lower():
    cumulative = CumulativeIntegral(get_rule("gk15"), np.cos, lower=1.0)
    with pytest.raises(InputError):
        cumulative(0.5)


def test_nested_integral_of_constant_hazard():
    """Test the inner-integral form of an interval event probability for a constant rate."""
    rate = 0.3
    result = integrate_nested(
        get_rule("gk15"),
        lambda v, cumulative: rate * np.exp(-cumulative),
        lambda v: np.full(np.shape(v), rate),
        1.0,
        2.5,
        breakpoints=[2.0],
    )
    exact = math.exp(-rate * 1.0) - math.exp(-rate * 2.5)
    assert result.value == pytest.approx(exact, rel=1e-13)


def test_nested_integral_rejects_start_before_lower():
    with pytest.raises(InputError):
        integrate_nested(get_rule("gk7"), lambda v, c: v, np.cos, 0.0, 1.0, lower=0.5)
