"""Spline bases for the longitudinal trajectory and the log baseline hazards.

Two families live here:

* ``NcsBasis``: natural cubic spline without intercept, normalized so every
  basis function vanishes at the left boundary knot. Used for the PSA mean
  trajectory m_i(t). Outside the boundary knots the basis continues linearly.
* ``BsplineBasis``: clamped B-splines on equally spaced breakpoints, used for
  the log baseline hazard of each cause together with a difference penalty.

Basis objects are frozen pydantic models so they serialize into the model
spec; the numeric machinery behind them is cached per basis.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, computed_field, model_validator
from scipy import linalg
from scipy.interpolate import BSpline

from src.exceptions import ConfigurationError, InputError

logger = logging.getLogger(__name__)

NCS_NORMALIZATION = "no-intercept-zero-at-left-boundary"
DEFAULT_RIDGE = 1e-6


class NcsBasis(BaseModel):
    model_config = ConfigDict(frozen=True)

    boundary_knots: tuple[float, float]
    internal_knots: tuple[float, ...]
    normalization: str = NCS_NORMALIZATION

    @computed_field
    @property
    def df(self) -> int:
        return len(self.internal_knots) + 1

    @model_validator(mode="after")
    def validate_knots(self):
        lo, hi = self.boundary_knots
        knots = np.asarray((lo, *self.internal_knots, hi), dtype=float)
        if not np.all(np.isfinite(knots)):
            raise ValueError(f"NCS knots must be finite, got {knots.tolist()}")
        if not np.all(np.diff(knots) > 0):
            raise ValueError(
                "NCS internal knots must be strictly increasing and strictly inside "
                f"the boundary interval, got boundary={self.boundary_knots} "
                f"internal={self.internal_knots}"
            )
        if self.normalization != NCS_NORMALIZATION:
            raise ValueError(f"Unsupported NCS normalization: {self.normalization}")
        return self

    def evaluate(self, t) -> np.ndarray:
        return ncs_eval(self, t)


class BsplineBasis(BaseModel):
    model_config = ConfigDict(frozen=True)

    # Distinct breakpoints; the boundary ones are repeated `degree` times internally
    knots: tuple[float, ...]
    degree: int = 3

    @computed_field
    @property
    def n_basis(self) -> int:
        return len(self.knots) - 1 + self.degree

    @property
    def lower(self) -> float:
        return self.knots[0]

    @property
    def upper(self) -> float:
        return self.knots[-1]

    @model_validator(mode="after")
    def validate_knots(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.size < 2:
            raise ValueError("B-spline basis needs at least two breakpoints")
        if not np.all(np.isfinite(knots)) or not np.all(np.diff(knots) > 0):
            raise ValueError(
                f"B-spline breakpoints must be finite and strictly increasing, got {self.knots}"
            )
        if self.degree < 1:
            raise ValueError(f"B-spline degree must be >= 1, got {self.degree}")
        return self

    def evaluate(self, t) -> np.ndarray:
        return bspline_design(self, t)


class BsplineValues(NamedTuple):
    values: np.ndarray
    clamped: np.ndarray


@dataclass(frozen=True)
class PenaltyMatrix:
    order: int
    dimension: int
    matrix: np.ndarray
    rank_term: int


@dataclass(frozen=True)
class _NcsMachinery:
    spline: BSpline
    slope_left: np.ndarray
    value_right: np.ndarray
    slope_right: np.ndarray


@dataclass(frozen=True)
class _BsplineMachinery:
    full_knots: np.ndarray


@lru_cache(maxsize=64)
def _ncs_machinery(basis: NcsBasis) -> _NcsMachinery:
    lo, hi = basis.boundary_knots
    full_knots = np.r_[[lo] * 4, basis.internal_knots, [hi] * 4]
    n_full = len(full_knots) - 4

    # Natural constraint: zero second derivative at both boundaries.
    second = BSpline(full_knots, np.eye(n_full), 3).derivative(2)(np.array([lo, hi]))
    # The first B-spline is the only one nonzero at the left boundary; dropping
    # it removes the intercept and pins every basis function to zero there.
    constraint = second[:, 1:]
    q, _ = linalg.qr(constraint.T)
    null_space = q[:, 2:]

    coefficients = np.vstack([np.zeros((1, null_space.shape[1])), null_space])
    spline = BSpline(full_knots, coefficients, 3)
    first = spline.derivative(1)
    return _NcsMachinery(
        spline=spline,
        slope_left=np.asarray(first(lo), dtype=float),
        value_right=np.asarray(spline(hi), dtype=float),
        slope_right=np.asarray(first(hi), dtype=float),
    )


def ncs_eval(basis: NcsBasis, t) -> np.ndarray:
    """Evaluate the NCS basis at ``t``; returns shape ``t.shape + (df,)``."""
    x = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError(f"NCS evaluation requires finite times, got {t!r}")

    machinery = _ncs_machinery(basis)
    lo, hi = basis.boundary_knots
    flat = x.reshape(-1)
    out = np.empty((flat.size, basis.df), dtype=float)

    left = flat <= lo
    right = flat >= hi
    inside = ~(left | right)

    out[left] = np.outer(flat[left] - lo, machinery.slope_left)
    out[right] = machinery.value_right + np.outer(flat[right] - hi, machinery.slope_right)
    if np.any(inside):
        out[inside] = machinery.spline(flat[inside])

    return out.reshape(x.shape + (basis.df,))


def ncs_default_basis(
    measurement_times: np.ndarray, follow_up: float, df: int = 3
) -> NcsBasis:
    """Boundary knots at [0, follow_up], internal knots at equal-probability
    quantiles of the pooled measurement times."""
    times = np.asarray(measurement_times, dtype=float)
    if times.size == 0:
        raise ConfigurationError("Cannot place NCS knots without measurement times")
    probs = np.arange(1, df) / df
    internal = tuple(float(q) for q in np.quantile(times, probs))
    try:
        return NcsBasis(boundary_knots=(0.0, float(follow_up)), internal_knots=internal)
    except ValueError as e:
        raise ConfigurationError(f"Degenerate NCS knot placement: {e}") from e


@lru_cache(maxsize=64)
def _bspline_machinery(basis: BsplineBasis) -> _BsplineMachinery:
    knots = np.asarray(basis.knots, dtype=float)
    full = np.r_[[knots[0]] * basis.degree, knots, [knots[-1]] * basis.degree]
    return _BsplineMachinery(full_knots=full)


def bspline_eval(basis: BsplineBasis, t) -> BsplineValues:
    """B-spline basis values at ``t``, clamping outside the knot range.

    Returns the values (shape ``t.shape + (n_basis,)``) and a boolean mask of
    the points that were clamped to the boundary.
    """
    x = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError(f"B-spline evaluation requires finite times, got {t!r}")

    clipped = np.clip(x, basis.lower, basis.upper)
    clamped = clipped != x
    if np.any(clamped):
        logger.debug(
            f"Clamped {int(clamped.sum())} time(s) to the B-spline range "
            f"[{basis.lower}, {basis.upper}]"
        )

    machinery = _bspline_machinery(basis)
    flat = clipped.reshape(-1)
    if flat.size == 0:
        values = np.empty((0, basis.n_basis))
    else:
        values = BSpline.design_matrix(
            flat, machinery.full_knots, basis.degree
        ).toarray()
    return BsplineValues(values=values.reshape(x.shape + (basis.n_basis,)), clamped=clamped)


def bspline_design(basis: BsplineBasis, t) -> np.ndarray:
    return bspline_eval(basis, t).values


def bspline_basis_from_knot_count(
    n_knots: int, horizon: float, degree: int = 3
) -> BsplineBasis:
    """Equally spaced cubic basis over [0, horizon] with n_basis = n_knots + degree - 2.

    11 knots give 12 basis functions and 4 knots give 5.
    """
    n_basis = n_knots + degree - 2
    n_breakpoints = n_basis - degree + 1
    if n_breakpoints < 2:
        raise ConfigurationError(
            f"Knot count {n_knots} is too small for a degree-{degree} basis"
        )
    if not np.isfinite(horizon) or horizon <= 0:
        raise ConfigurationError(f"Baseline hazard horizon must be positive, got {horizon}")
    knots = tuple(float(k) for k in np.linspace(0.0, horizon, n_breakpoints))
    return BsplineBasis(knots=knots, degree=degree)


def difference_penalty(
    n_basis: int,
    r: int,
    ridge: float = DEFAULT_RIDGE,
    rank_mode: Literal["unridged", "full"] = "unridged",
) -> PenaltyMatrix:
    """M = D_r' D_r + ridge * I, with D_r the r-th order difference operator."""
    if r < 1 or n_basis <= r:
        raise ConfigurationError(
            f"Difference penalty needs n_basis > r >= 1, got n_basis={n_basis}, r={r}"
        )
    diff = np.diff(np.eye(n_basis), n=r, axis=0)
    penalty = diff.T @ diff + ridge * np.eye(n_basis)
    upper = np.triu(penalty)
    matrix = upper + np.triu(penalty, 1).T

    rank_term = n_basis - r if rank_mode == "unridged" else n_basis
    return PenaltyMatrix(order=r, dimension=n_basis, matrix=matrix, rank_term=rank_term)
