"""Gauss-Kronrod quadrature on finite intervals.

Integrands are vectorized callables: they receive an array of abscissae of
any shape and return values of the same shape. Every integration is a fixed
rule applied per panel; callers may supply breakpoints (spline knots) to cut
an interval into panels on which the integrand is smooth.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Literal, NamedTuple

import numpy as np

from src.exceptions import InputError, QuadratureEvaluationError

logger = logging.getLogger(__name__)

RuleKind = Literal["gk7", "gk15"]

# Kronrod extension of the 3-point Gauss rule
_K7_NODES = (
    0.960491268708020283423507092629080,
    0.774596669241483377035853079956480,
    0.434243749346802558002071502844628,
    0.000000000000000000000000000000000,
)
_K7_WEIGHTS = (
    0.104656226026467265193823857192073,
    0.268488089868333440728569280666710,
    0.401397414775962222905051818618432,
    0.450916538658474142345110087045571,
)
_G3_WEIGHTS = (
    0.555555555555555555555555555555556,
    0.888888888888888888888888888888889,
)

# QUADPACK qk15: Kronrod extension of the 7-point Gauss rule
_K15_NODES = (
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
)
_K15_WEIGHTS = (
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
)
_G7_WEIGHTS = (
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
)


@dataclass(frozen=True)
class QuadratureRule:
    kind: str
    nodes: np.ndarray
    weights_kronrod: np.ndarray
    # Gauss weights scattered onto the Kronrod nodes (zero at Kronrod-only nodes)
    weights_gauss: np.ndarray

    @property
    def size(self) -> int:
        return self.nodes.size


class QuadratureResult(NamedTuple):
    value: float
    error_estimate: float


def _mirror(
    half_nodes, half_kronrod, half_gauss_on_gauss_nodes
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assemble a symmetric rule from its non-negative half (center last)."""
    positive = np.asarray(half_nodes[:-1], dtype=float)
    nodes = np.r_[-positive, 0.0, positive[::-1]]
    kronrod_half = np.asarray(half_kronrod, dtype=float)
    weights_kronrod = np.r_[kronrod_half[:-1], kronrod_half[-1], kronrod_half[:-1][::-1]]

    # Gauss nodes are every other Kronrod node, starting from the second outermost
    gauss_half = np.zeros(len(half_nodes))
    gauss_half[1::2] = half_gauss_on_gauss_nodes
    weights_gauss = np.r_[gauss_half[:-1], gauss_half[-1], gauss_half[:-1][::-1]]
    return nodes, weights_kronrod, weights_gauss


@lru_cache(maxsize=None)
def get_rule(kind: RuleKind = "gk15") -> QuadratureRule:
    kind = kind.lower()
    if kind == "gk7":
        nodes, wk, wg = _mirror(_K7_NODES, _K7_WEIGHTS, _G3_WEIGHTS)
    elif kind == "gk15":
        nodes, wk, wg = _mirror(_K15_NODES, _K15_WEIGHTS, _G7_WEIGHTS)
    else:
        raise InputError(f"Unknown quadrature rule {kind!r}; expected 'gk7' or 'gk15'")
    return QuadratureRule(kind=kind, nodes=nodes, weights_kronrod=wk, weights_gauss=wg)


def _check_interval(a: float, b: float) -> None:
    if not (np.isfinite(a) and np.isfinite(b)):
        raise InputError(f"Integration bounds must be finite, got [{a}, {b}]")
    if a > b:
        raise InputError(f"Integration requires a <= b, got a={a}, b={b}")


def _check_values(values: np.ndarray, nodes: np.ndarray) -> None:
    bad = ~np.isfinite(values)
    if np.any(bad):
        node = float(np.broadcast_to(nodes, values.shape)[bad].flat[0])
        raise QuadratureEvaluationError(
            f"Integrand is not finite at node t={node}", node=node
        )


def panel_edges(a: float, b: float, breakpoints: Iterable[float] = ()) -> np.ndarray:
    """Sorted panel boundaries of [a, b] cut at the breakpoints strictly inside it."""
    inner = [float(p) for p in breakpoints if a < p < b]
    return np.unique(np.r_[a, inner, b])


def panel_nodes(rule: QuadratureRule, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Abscissae and Kronrod weights for each panel, both shaped (n_panels, rule.size)."""
    edges = np.asarray(edges, dtype=float)
    lo, hi = edges[:-1], edges[1:]
    half = (hi - lo) / 2.0
    mid = (hi + lo) / 2.0
    nodes = mid[:, None] + half[:, None] * rule.nodes
    weights = half[:, None] * rule.weights_kronrod
    return nodes, weights


def integrate(
    rule: QuadratureRule, f: Callable[[np.ndarray], np.ndarray], a: float, b: float
) -> QuadratureResult:
    """Single-panel Gauss-Kronrod integral of f over [a, b]."""
    _check_interval(a, b)
    half = (b - a) / 2.0
    nodes = (a + b) / 2.0 + half * rule.nodes
    values = np.asarray(f(nodes), dtype=float)
    _check_values(values, nodes)

    kronrod = half * float(rule.weights_kronrod @ values)
    gauss = half * float(rule.weights_gauss @ values)
    return QuadratureResult(value=kronrod, error_estimate=abs(kronrod - gauss))


def integrate_panels(
    rule: QuadratureRule,
    f: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    breakpoints: Iterable[float] = (),
) -> QuadratureResult:
    """Sum of single-panel integrals over [a, b] cut at the breakpoints."""
    _check_interval(a, b)
    edges = panel_edges(a, b, breakpoints)
    if edges.size < 2:
        return QuadratureResult(0.0, 0.0)
    nodes, weights = panel_nodes(rule, edges)
    values = np.asarray(f(nodes), dtype=float)
    _check_values(values, nodes)

    half = ((edges[1:] - edges[:-1]) / 2.0)[:, None]
    kronrod = np.sum(weights * values, axis=1)
    gauss = np.sum(half * rule.weights_gauss * values, axis=1)
    return QuadratureResult(
        value=float(kronrod.sum()), error_estimate=float(np.abs(kronrod - gauss).sum())
    )


class CumulativeIntegral:
    """x -> integral of f over [lower, x], panel-aligned to the breakpoints.

    Cumulative values at panel starts are cached on first use, so the inner
    integrals of a nested quadrature cost one panel each. An instance is meant
    to live for a single likelihood evaluation.
    """

    def __init__(
        self,
        rule: QuadratureRule,
        f: Callable[[np.ndarray], np.ndarray],
        lower: float = 0.0,
        breakpoints: Iterable[float] = (),
    ):
        self.rule = rule
        self.f = f
        self.lower = float(lower)
        self.grid = np.unique(np.r_[self.lower, [p for p in breakpoints if p > lower]])
        self._cumulative = np.full(self.grid.size, np.nan)
        self._cumulative[0] = 0.0
        self._filled = 0

    def _fill(self, upto_index: int) -> None:
        if upto_index <= self._filled:
            return
        edges = self.grid[self._filled : upto_index + 1]
        nodes, weights = panel_nodes(self.rule, edges)
        values = np.asarray(self.f(nodes), dtype=float)
        _check_values(values, nodes)
        increments = np.sum(weights * values, axis=1)
        start = self._cumulative[self._filled]
        self._cumulative[self._filled + 1 : upto_index + 1] = start + np.cumsum(increments)
        self._filled = upto_index

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        if flat.size == 0:
            return np.zeros_like(x)
        if not np.all(np.isfinite(flat)) or np.any(flat < self.lower):
            raise InputError(
                f"Cumulative integral needs finite upper limits >= {self.lower}"
            )

        index = np.searchsorted(self.grid, flat, side="right") - 1
        self._fill(int(index.max()))
        starts = self.grid[index]
        half = (flat - starts) / 2.0
        nodes = (flat + starts)[:, None] / 2.0 + half[:, None] * self.rule.nodes
        values = np.asarray(self.f(nodes), dtype=float)
        _check_values(values, nodes)
        tail = np.sum(half[:, None] * self.rule.weights_kronrod * values, axis=1)
        return (self._cumulative[index] + tail).reshape(x.shape)


def integrate_nested(
    rule: QuadratureRule,
    outer: Callable[[np.ndarray, np.ndarray], np.ndarray],
    inner: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    lower: float = 0.0,
    breakpoints: Iterable[float] = (),
) -> QuadratureResult:
    """Integral over [a, b] of outer(v, H(v)), where H(v) integrates inner over [lower, v]."""
    _check_interval(a, b)
    if a < lower:
        raise InputError(f"Nested integration starts at {a}, before the inner lower limit {lower}")
    breakpoints = tuple(breakpoints)
    edges = panel_edges(a, b, breakpoints)
    if edges.size < 2:
        return QuadratureResult(0.0, 0.0)

    nodes, weights = panel_nodes(rule, edges)
    cumulative = CumulativeIntegral(rule, inner, lower=lower, breakpoints=breakpoints)
    inner_values = cumulative(nodes)
    values = np.asarray(outer(nodes, inner_values), dtype=float)
    _check_values(values, nodes)

    half = ((edges[1:] - edges[:-1]) / 2.0)[:, None]
    kronrod = np.sum(weights * values, axis=1)
    gauss = np.sum(half * rule.weights_gauss * values, axis=1)
    return QuadratureResult(
        value=float(kronrod.sum()), error_estimate=float(np.abs(kronrod - gauss).sum())
    )
