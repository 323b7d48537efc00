"""Transition semigroup of Walsh Brownian motion, evaluated by quadrature.

Everything reduces to one-dimensional heat-kernel integrals over a single
half-line: for a point at radius h on ray j,

    (P_t f)(h e_j) = 2 sum_i alpha_i (p_t f_i)(-h) + (p_t f_j)(h) - (p_t f_j)(-h)

where (p_t g)(x) = integral_0^inf g(y) phi_t(x - y) dy convolves g, extended
by zero to the negative axis, with the Gaussian kernel phi_t. At the origin
only the weighted sum survives. Quadrature is composite Simpson on a window
of +-(multiplier * sqrt(t)) around the Gaussian center, clipped to [0, inf).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.interpolate import CubicSpline

from walshflow.graph import (
    DerivativeUnavailable,
    GraphPoint,
    GraphSpec,
    PiecewiseFunction,
    RayFunction,
    flux_defect,
    vector_eval,
)

__all__ = [
    "NonPositiveTime",
    "QuadratureDiverged",
    "OriginNotDifferentiable",
    "NotInDomain",
    "QuadratureConfig",
    "DEFAULT_QUADRATURE",
    "heat_kernel",
    "halfline_convolution",
    "wbm_semigroup_apply",
    "semigroup_derivative",
    "generator_residual",
    "tabulate_semigroup",
]


class NonPositiveTime(ValueError):
    """Semigroup evaluation needs t > 0."""


class QuadratureDiverged(ArithmeticError):
    """A quadrature pass produced a non-finite value."""


class OriginNotDifferentiable(ValueError):
    """The radial derivative of P_t f is one-sided per ray at the origin."""


class NotInDomain(ValueError):
    """Generator identity requires a vanishing junction flux defect."""


@dataclass(frozen=True)
class QuadratureConfig:
    """Composite-Simpson controls: window half-width in units of sqrt(t),
    and an odd node count."""

    truncation_radius_multiplier: float = 10.0
    node_count: int = 2001

    def __post_init__(self) -> None:
        if self.truncation_radius_multiplier < 6.0:
            raise ValueError(
                f"truncation multiplier {self.truncation_radius_multiplier} < 6 "
                "leaves visible Gaussian mass outside the window"
            )
        if self.node_count < 3 or self.node_count % 2 == 0:
            raise ValueError(f"node_count {self.node_count} must be odd and >= 3")


DEFAULT_QUADRATURE = QuadratureConfig()

RayCallable = Callable[[float], float]
FunctionLike = Union[PiecewiseFunction, Sequence[RayCallable]]


def heat_kernel(y, t: float):
    """Gaussian density phi_t(y) = exp(-y^2 / 2t) / sqrt(2 pi t).

    Accepts scalar or array y. Raises NonPositiveTime for t <= 0.
    """
    if t <= 0.0:
        raise NonPositiveTime(f"t = {t!r} must be > 0")
    y = np.asarray(y, dtype=float)
    out = np.exp(-(y * y) / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)
    return float(out) if out.ndim == 0 else out


def _simpson(vals: np.ndarray, step: float) -> float:
    weights = np.ones(len(vals))
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    return float(step / 3.0 * np.dot(weights, vals))


def halfline_convolution(
    fn: RayCallable, t: float, x: float, quad: Optional[QuadratureConfig] = None
) -> float:
    """(p_t fn)(x): convolve fn, supported on [0, inf), with phi_t.

    x may be negative; the Gaussian window is clipped to the support.
    """
    if t <= 0.0:
        raise NonPositiveTime(f"t = {t!r} must be > 0")
    quad = quad or DEFAULT_QUADRATURE
    radius = quad.truncation_radius_multiplier * math.sqrt(t)
    lo = max(0.0, x - radius)
    hi = x + radius
    if hi <= lo:
        return 0.0
    ys = np.linspace(lo, hi, quad.node_count)
    integrand = vector_eval(fn, ys) * heat_kernel(ys - x, t)
    result = _simpson(integrand, (hi - lo) / (quad.node_count - 1))
    if not math.isfinite(result):
        raise QuadratureDiverged(f"non-finite quadrature value at x={x}, t={t}")
    return result


def _components(f: FunctionLike, n_rays: int) -> list[RayCallable]:
    if isinstance(f, PiecewiseFunction):
        comps = [c.value for c in f.components]
    else:
        comps = list(f)
    if len(comps) != n_rays:
        raise ValueError(f"function has {len(comps)} components, spec has {n_rays} rays")
    return comps


def _deriv_components(f: PiecewiseFunction, n_rays: int, order: int) -> list[RayCallable]:
    comps = []
    for i, c in enumerate(f.components, start=1):
        fn = c.deriv if order == 1 else c.second_deriv
        if fn is None:
            raise DerivativeUnavailable(f"ray {i} has no order-{order} derivative evaluator")
        comps.append(fn)
    if len(comps) != n_rays:
        raise ValueError(f"function has {len(comps)} components, spec has {n_rays} rays")
    return comps


def wbm_semigroup_apply(
    f: FunctionLike,
    spec: GraphSpec,
    point: GraphPoint,
    t: float,
    quad: Optional[QuadratureConfig] = None,
) -> float:
    """Evaluate (P_t f)(point) from the closed-form ray decomposition.

    f is a PiecewiseFunction or a plain sequence of per-ray callables; the
    raw-callable form exists for integrands with a measure-zero junction
    mismatch (ray indicators) that the validated type would reject.
    """
    if t <= 0.0:
        raise NonPositiveTime(f"t = {t!r} must be > 0")
    comps = _components(f, spec.n_rays)
    h = point.radius
    shared = math.fsum(
        2.0 * a * halfline_convolution(fn, t, -h, quad)
        for a, fn in zip(spec.alpha, comps)
    )
    if h == 0.0:
        return shared
    own = comps[point.ray - 1]
    return (
        shared
        + halfline_convolution(own, t, h, quad)
        - halfline_convolution(own, t, -h, quad)
    )


def semigroup_derivative(
    f: PiecewiseFunction,
    spec: GraphSpec,
    point: GraphPoint,
    t: float,
    quad: Optional[QuadratureConfig] = None,
) -> float:
    """Radial derivative of P_t f away from the origin via the exchange
    identity (P_t f)' = -P_t f' + 2 (p_t f_j')(h) on ray j.

    Needs analytic derivative evaluators on every component. Raises
    OriginNotDifferentiable at radius 0, where only one-sided per-ray
    derivatives exist.
    """
    if point.is_origin:
        raise OriginNotDifferentiable("radial derivative is one-sided at the origin")
    fprime = _deriv_components(f, spec.n_rays, order=1)
    own = fprime[point.ray - 1]
    return -wbm_semigroup_apply(fprime, spec, point, t, quad) + 2.0 * halfline_convolution(
        own, t, point.radius, quad
    )


def generator_residual(
    f: PiecewiseFunction,
    spec: GraphSpec,
    point: GraphPoint,
    t: float,
    quad: Optional[QuadratureConfig] = None,
    time_nodes: int = 65,
    domain_tol: float = 1e-9,
) -> float:
    """P_t f(x) - f(x) - (1/2) integral_0^t (P_u f'')(x) du.

    Vanishes for functions in the generator domain (flux defect 0 within
    domain_tol; NotInDomain otherwise). The time integral runs over
    v = sqrt(u) with composite Simpson, because P_u f'' picks up a
    sqrt(u) term at the origin and the substitution makes the integrand
    smooth there; the v=0 endpoint carries weight 2v = 0, so the u -> 0
    limit never needs evaluating.
    """
    defect = flux_defect(f, spec)
    if abs(defect) > domain_tol:
        raise NotInDomain(f"junction flux defect {defect!r} exceeds {domain_tol}")
    if t <= 0.0:
        raise NonPositiveTime(f"t = {t!r} must be > 0")
    if time_nodes < 65 or time_nodes % 2 == 0:
        raise ValueError(f"time_nodes {time_nodes} must be odd and >= 65")
    fpp = _deriv_components(f, spec.n_rays, order=2)

    vmax = math.sqrt(t)
    vs = np.linspace(0.0, vmax, time_nodes)
    vals = np.empty(time_nodes)
    vals[0] = 0.0
    for k in range(1, time_nodes):
        v = vs[k]
        vals[k] = 2.0 * v * wbm_semigroup_apply(fpp, spec, point, v * v, quad)
    time_integral = _simpson(vals, vmax / (time_nodes - 1))

    return wbm_semigroup_apply(f, spec, point, t, quad) - f(point) - 0.5 * time_integral


def tabulate_semigroup(
    f: FunctionLike,
    spec: GraphSpec,
    s: float,
    quad: Optional[QuadratureConfig] = None,
    radius_max: Optional[float] = None,
    nodes: int = 400,
) -> PiecewiseFunction:
    """Tabulate P_s f per ray and wrap cubic splines as a PiecewiseFunction.

    Default table reaches 12 sqrt(s) with 400 nodes; pass a larger
    radius_max when the table feeds another semigroup application whose
    quadrature window reaches further (the node count is scaled to keep
    the default spacing). Beyond the table the value is clamped to the
    last node; callers must keep the clamped region under negligible
    Gaussian mass.
    """
    if s <= 0.0:
        raise NonPositiveTime(f"s = {s!r} must be > 0")
    base_radius = 12.0 * math.sqrt(s)
    radius = max(base_radius, radius_max) if radius_max is not None else base_radius
    if radius > base_radius:
        nodes = max(nodes, math.ceil(nodes * radius / base_radius))
    hs = np.linspace(0.0, radius, nodes)

    origin_value = wbm_semigroup_apply(f, spec, spec.origin, s, quad)
    components = []
    for ray in range(1, spec.n_rays + 1):
        vals = np.empty(nodes)
        vals[0] = origin_value
        for k in range(1, nodes):
            vals[k] = wbm_semigroup_apply(
                f, spec, GraphPoint(ray=ray, radius=float(hs[k])), s, quad
            )
        spline = CubicSpline(hs, vals, bc_type="not-a-knot")
        d1 = spline.derivative(1)
        d2 = spline.derivative(2)
        clamp = float(vals[-1])

        def value(h, _s=spline, _r=radius, _c=clamp):
            h = np.asarray(h, dtype=float)
            out = np.where(h >= _r, _c, _s(np.minimum(h, _r)))
            return float(out) if out.ndim == 0 else out

        def deriv(h, _d=d1, _r=radius):
            h = np.asarray(h, dtype=float)
            out = np.where(h >= _r, 0.0, _d(np.minimum(h, _r)))
            return float(out) if out.ndim == 0 else out

        def second(h, _d=d2, _r=radius):
            h = np.asarray(h, dtype=float)
            out = np.where(h >= _r, 0.0, _d(np.minimum(h, _r)))
            return float(out) if out.ndim == 0 else out

        components.append(RayFunction(value=value, deriv=deriv, second_deriv=second))
    return PiecewiseFunction(components=tuple(components))
