from fractions import Fraction

import numpy as np
import pytest

from src.exceptions import ConfigurationError, InputError
from src.spline import (
    BsplineBasis,
    NcsBasis,
    bspline_basis_from_knot_count,
    bspline_design,
    bspline_eval,
    difference_penalty,
    ncs_default_basis,
    ncs_eval,
)

NCS = NcsBasis(boundary_knots=(0.0, 10.0), internal_knots=(2.0, 5.0))


def test_ncs_vanishes_at_left_boundary():
    """Test that every NCS basis function is zero at the left boundary knot."""
    assert np.allclose(ncs_eval(NCS, 0.0), 0.0, atol=1e-14)


def test_ncs_shape_follows_input():
    values = ncs_eval(NCS, np.zeros((3, 2)))
    assert values.shape == (3, 2, 3)


def test_ncs_has_zero_curvature_at_boundaries():
    """Test the natural constraint with a second difference just inside each boundary."""
    h = 1e-3
    for edge, direction in ((0.0, 1.0), (10.0, -1.0)):
        t = edge + direction * np.array([0.0, h, 2 * h])
        second = ncs_eval(NCS, t[2]) - 2 * ncs_eval(NCS, t[1]) + ncs_eval(NCS, t[0])
        assert np.allclose(second / h**2, 0.0, atol=5e-2)


def test_ncs_extends_linearly_outside_boundaries():
    left = ncs_eval(NCS, np.array([-2.0, -1.0, 0.0]))
    assert np.allclose(left[0] - left[1], left[1] - left[2])
    right = ncs_eval(NCS, np.array([10.0, 11.0, 12.0]))
    assert np.allclose(right[2] - right[1], right[1] - right[0])


def test_ncs_is_continuous_at_boundaries():
    for edge in (0.0, 10.0):
        inside = ncs_eval(NCS, edge - 1e-9 if edge else edge + 1e-9)
        assert np.allclose(inside, ncs_eval(NCS, edge), atol=1e-7)


def truncated_power_natural_basis(t, knots) -> np.ndarray:
    """Natural cubic spline basis through truncated powers, shifted to vanish at the first knot."""
    t = np.asarray(t, dtype=float)
    knots = np.asarray(knots, dtype=float)
    last = knots.size - 1

    def d(k):
        cube = np.maximum(t - knots[k], 0.0) ** 3 - np.maximum(t - knots[last], 0.0) ** 3
        return cube / (knots[last] - knots[k])

    columns = [t - knots[0]] + [d(k) - d(last - 1) for k in range(last - 1)]
    return np.column_stack(columns)


def test_ncs_spans_the_truncated_power_natural_spline_space():
    """Test the NCS columns against an independent natural spline construction, extrapolation included."""
    knots = (0.0, 2.0, 5.0, 10.0)
    grid = np.linspace(-2.0, 12.0, 2001)
    oracle = truncated_power_natural_basis(grid, knots)
    assert oracle.shape[1] == NCS.df

    # Both bases span the same space, so one linear map carries the oracle onto the NCS columns
    mapping, *_ = np.linalg.lstsq(oracle, ncs_eval(NCS, grid), rcond=None)
    t = np.random.default_rng(3).uniform(-2.0, 12.0, 20)
    expected = truncated_power_natural_basis(t, knots) @ mapping
    assert np.allclose(ncs_eval(NCS, t), expected, rtol=0, atol=1e-10)


@pytest.mark.parametrize("knot", [2.0, 5.0])
def test_ncs_first_and_second_derivatives_continuous_at_internal_knots(knot):
    """Test one-sided derivatives from each adjacent cubic piece at the internal knots."""
    h = 0.01
    left = ncs_eval(NCS, knot - h * np.arange(4))
    right = ncs_eval(NCS, knot + h * np.arange(4))
    # One-sided stencils that are exact for cubic polynomials
    first_left = (11 * left[0] - 18 * left[1] + 9 * left[2] - 2 * left[3]) / (6 * h)
    first_right = (-11 * right[0] + 18 * right[1] - 9 * right[2] + 2 * right[3]) / (6 * h)
    second_left = (2 * left[0] - 5 * left[1] + 4 * left[2] - left[3]) / h**2
    second_right = (2 * right[0] - 5 * right[1] + 4 * right[2] - right[3]) / h**2
    assert np.allclose(first_left, first_right, rtol=0, atol=1e-8)
    assert np.allclose(second_left, second_right, rtol=0, atol=1e-6)


def test_ncs_rejects_non_finite_times():
    with pytest.raises(InputError):
        ncs_eval(NCS, np.array([1.0, np.nan]))


def test_ncs_rejects_internal_knots_outside_boundary():
    with pytest.raises(ValueError) as exc_info:
        NcsBasis(boundary_knots=(0.0, 10.0), internal_knots=(2.0, 12.0))
    assert "strictly inside" in str(exc_info.value)


def test_ncs_default_basis_uses_time_quantiles():
    times = np.linspace(0.0, 9.0, 1001)
    basis = ncs_default_basis(times, follow_up=10.0)
    assert basis.boundary_knots == (0.0, 10.0)
    assert basis.internal_knots == pytest.approx((3.0, 6.0))
    assert basis.df == 3


def test_ncs_default_basis_needs_times():
    with pytest.raises(ConfigurationError):
        ncs_default_basis(np.array([]), follow_up=10.0)


@pytest.mark.parametrize("n_knots, n_basis", [(11, 12), (4, 5)])
def test_knot_count_maps_to_basis_size(n_knots, n_basis):
    basis = bspline_basis_from_knot_count(n_knots, 12.5)
    assert basis.n_basis == n_basis
    assert basis.knots[0] == 0.0
    assert basis.knots[-1] == 12.5


def test_bspline_partition_of_unity():
    """Test that the clamped basis sums to one everywhere, clamped points included."""
    basis = bspline_basis_from_knot_count(11, 12.5)
    t = np.linspace(-1.0, 14.0, 301)
    assert np.allclose(bspline_design(basis, t).sum(axis=-1), 1.0)


def cox_de_boor(full_knots, degree: int, x: Fraction) -> list[Fraction]:
    """Exact rational B-spline values by the Cox-de Boor recursion."""
    knots = [Fraction(k) for k in full_knots]
    values = [Fraction(int(knots[i] <= x < knots[i + 1])) for i in range(len(knots) - 1)]
    for p in range(1, degree + 1):
        step = []
        for i in range(len(knots) - p - 1):
            term = Fraction(0)
            if knots[i + p] != knots[i]:
                term += (x - knots[i]) / (knots[i + p] - knots[i]) * values[i]
            if knots[i + p + 1] != knots[i + 1]:
                term += (knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1]) * values[i + 1]
            step.append(term)
        values = step
    return values


@pytest.mark.parametrize("n_knots, horizon", [(11, 12.5), (4, 10.0)])
def test_bspline_matches_exact_recursion(n_knots, horizon):
    basis = bspline_basis_from_knot_count(n_knots, horizon)
    full_knots = [basis.knots[0]] * 3 + list(basis.knots) + [basis.knots[-1]] * 3
    t = np.random.default_rng(n_knots).uniform(0.0, horizon, 20)
    design = bspline_design(basis, t)
    for row, x in zip(design, t):
        exact = cox_de_boor(full_knots, 3, Fraction(float(x)))
        assert len(exact) == basis.n_basis
        assert np.allclose(row, [float(v) for v in exact], rtol=0, atol=1e-10)


def test_bspline_clamps_outside_range():
    basis = bspline_basis_from_knot_count(4, 10.0)
    result = bspline_eval(basis, np.array([-1.0, 5.0, 11.0]))
    assert result.clamped.tolist() == [True, False, True]
    assert np.allclose(result.values[0], bspline_design(basis, 0.0))
    assert np.allclose(result.values[2], bspline_design(basis, 10.0))


def test_bspline_rejects_unsorted_knots():
    with pytest.raises(ValueError):
        BsplineBasis(knots=(0.0, 2.0, 1.0))


def test_knot_count_too_small_raises():
    with pytest.raises(ConfigurationError):
        bspline_basis_from_knot_count(1, 10.0, degree=3)


def test_difference_penalty_structure():
    penalty = difference_penalty(6, 2, ridge=1e-6)
    assert np.allclose(penalty.matrix, penalty.matrix.T)
    assert penalty.rank_term == 4
    # Linear coefficient sequences are only penalized by the ridge
    linear = np.arange(6.0)
    assert linear @ penalty.matrix @ linear == pytest.approx(1e-6 * linear @ linear)


def test_difference_penalty_full_rank_mode():
    assert difference_penalty(6, 2, rank_mode="full").rank_term == 6


def test_difference_penalty_order_too_high():
    with pytest.raises(ConfigurationError):
        difference_penalty(3, 3)
