"""Star graph geometry: rays, weights, points, and piecewise test functions.

The state space is a star of N half-lines glued at one origin. Ray i carries
a weight alpha_i > 0 (the weights sum to 1) and a sign eps_i in {+1, -1};
the signs are block sorted so rays 1..p are the plus block and p+1..N the
minus block. The origin is canonically attached to ray N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "NonPositiveWeight",
    "WeightsNotNormalized",
    "SignsNotBlockSorted",
    "DerivativeUnavailable",
    "WrongRayCount",
    "GraphSpec",
    "GraphPoint",
    "RayFunction",
    "PiecewiseFunction",
    "validate_spec",
    "graph_point",
    "distance",
    "flux_defect",
    "in_generator_domain",
    "embed_line",
    "project_line",
    "signed_coordinate",
    "point_from_signed",
    "central_difference",
    "vector_eval",
]

WEIGHT_SUM_TOL = 1e-12
JUNCTION_TOL = 1e-9
DOMAIN_TOL = 1e-9


class NonPositiveWeight(ValueError):
    """A ray weight is zero or negative."""


class WeightsNotNormalized(ValueError):
    """Ray weights do not sum to 1 within tolerance."""


class SignsNotBlockSorted(ValueError):
    """Ray signs are not arranged as a +1 block followed by a -1 block."""


class DerivativeUnavailable(ValueError):
    """A piecewise function component has no derivative evaluator."""


class WrongRayCount(ValueError):
    """Line embedding requires exactly two rays."""


@dataclass(frozen=True)
class GraphSpec:
    """Immutable description of a star graph: weights and signs per ray.

    Use :func:`validate_spec` to construct one from raw sequences; the
    constructor itself also validates, so an invalid spec cannot exist.
    """

    alpha: tuple[float, ...]
    eps: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.alpha) < 1:
            raise WrongRayCount("need at least one ray")
        if len(self.eps) != len(self.alpha):
            raise WrongRayCount(
                f"{len(self.alpha)} weights but {len(self.eps)} signs"
            )
        for i, a in enumerate(self.alpha, start=1):
            if not (a > 0.0):
                raise NonPositiveWeight(f"alpha_{i} = {a!r} must be > 0")
        total = math.fsum(self.alpha)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise WeightsNotNormalized(f"weights sum to {total!r}, not 1")
        for s in self.eps:
            if s not in (1, -1):
                raise SignsNotBlockSorted(f"sign {s!r} is not +1 or -1")
        seen_minus = False
        for s in self.eps:
            if s == -1:
                seen_minus = True
            elif seen_minus:
                raise SignsNotBlockSorted(
                    "signs must be all +1 rays first, then all -1 rays"
                )

    @property
    def n_rays(self) -> int:
        return len(self.alpha)

    @property
    def p(self) -> int:
        """Number of plus rays (the leading +1 block)."""
        return sum(1 for s in self.eps if s == 1)

    @property
    def alpha_plus(self) -> float:
        return math.fsum(self.alpha[: self.p])

    @property
    def alpha_minus(self) -> float:
        return math.fsum(self.alpha[self.p :])

    @property
    def origin(self) -> "GraphPoint":
        return GraphPoint(ray=self.n_rays, radius=0.0)

    def sign(self, ray: int) -> int:
        return self.eps[ray - 1]


def validate_spec(alpha: Sequence[float], eps: Sequence[int]) -> GraphSpec:
    """Build a validated GraphSpec from weight and sign sequences.

    Raises NonPositiveWeight, WeightsNotNormalized, or SignsNotBlockSorted
    with the offending entry spelled out.
    """
    return GraphSpec(alpha=tuple(float(a) for a in alpha), eps=tuple(int(s) for s in eps))


@dataclass(frozen=True)
class GraphPoint:
    """A point of the star graph: ray index (1-based) and radius >= 0.

    The origin is the unique point with radius 0; construct points through
    :func:`graph_point` so the origin is always canonicalized to ray N.
    """

    ray: int
    radius: float

    def __post_init__(self) -> None:
        if self.radius < 0.0:
            raise ValueError(f"radius {self.radius!r} must be >= 0")
        if self.ray < 1:
            raise ValueError(f"ray {self.ray!r} must be >= 1")

    @property
    def is_origin(self) -> bool:
        return self.radius == 0.0


def graph_point(spec: GraphSpec, ray: int, radius: float) -> GraphPoint:
    """Construct a point, canonicalizing radius 0 onto ray N."""
    if not 1 <= ray <= spec.n_rays:
        raise ValueError(f"ray {ray} outside 1..{spec.n_rays}")
    radius = float(radius)
    if radius == 0.0:
        return spec.origin
    return GraphPoint(ray=ray, radius=radius)


def distance(x: GraphPoint, y: GraphPoint) -> float:
    """Tree metric: |h - h'| on a shared ray, h + h' across rays."""
    if x.ray == y.ray or x.radius == 0.0 or y.radius == 0.0:
        return abs(x.radius - y.radius) if x.ray == y.ray else x.radius + y.radius
    return x.radius + y.radius


@dataclass(frozen=True)
class RayFunction:
    """One component of a piecewise function: value on [0, inf) plus
    optional first and second derivative evaluators."""

    value: Callable[[float], float]
    deriv: Optional[Callable[[float], float]] = None
    second_deriv: Optional[Callable[[float], float]] = None


@dataclass(frozen=True)
class PiecewiseFunction:
    """A function on the star graph given by one RayFunction per ray.

    Components must agree at the junction within 1e-9. Derivative values at
    the origin follow the ray-N convention (the origin lives on ray N).
    """

    components: tuple[RayFunction, ...]

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("need at least one component")
        f0 = self.components[0].value(0.0)
        for i, comp in enumerate(self.components[1:], start=2):
            fi = comp.value(0.0)
            if abs(fi - f0) > JUNCTION_TOL:
                raise ValueError(
                    f"component {i} value {fi!r} at the junction differs from "
                    f"component 1 value {f0!r} beyond {JUNCTION_TOL}"
                )

    @property
    def n_rays(self) -> int:
        return len(self.components)

    def __call__(self, point: GraphPoint) -> float:
        return self.components[point.ray - 1].value(point.radius)

    def deriv_at(self, point: GraphPoint) -> float:
        comp = self.components[point.ray - 1]
        if comp.deriv is None:
            raise DerivativeUnavailable(f"ray {point.ray} has no derivative evaluator")
        return comp.deriv(point.radius)

    def second_deriv_at(self, point: GraphPoint) -> float:
        comp = self.components[point.ray - 1]
        if comp.second_deriv is None:
            raise DerivativeUnavailable(
                f"ray {point.ray} has no second-derivative evaluator"
            )
        return comp.second_deriv(point.radius)

    @classmethod
    def radial(
        cls,
        n_rays: int,
        value: Callable[[float], float],
        deriv: Optional[Callable[[float], float]] = None,
        second_deriv: Optional[Callable[[float], float]] = None,
    ) -> "PiecewiseFunction":
        """Same profile on every ray."""
        comp = RayFunction(value=value, deriv=deriv, second_deriv=second_deriv)
        return cls(components=(comp,) * n_rays)


def flux_defect(f: PiecewiseFunction, spec: GraphSpec) -> float:
    """Weighted one-sided derivative sum at the junction:
    sum_i alpha_i * f_i'(0+).

    Zero (within tolerance) characterizes membership in the generator
    domain. Raises DerivativeUnavailable if any component lacks an
    analytic derivative; the central-difference fallback is deliberately
    not substituted here, it exists for cross-checks only.
    """
    if f.n_rays != spec.n_rays:
        raise ValueError(f"function has {f.n_rays} components, spec has {spec.n_rays} rays")
    terms = []
    for i, (a, comp) in enumerate(zip(spec.alpha, f.components), start=1):
        if comp.deriv is None:
            raise DerivativeUnavailable(f"ray {i} has no derivative evaluator")
        terms.append(a * comp.deriv(0.0))
    return math.fsum(terms)


def in_generator_domain(f: PiecewiseFunction, spec: GraphSpec, tol: float = DOMAIN_TOL) -> bool:
    """True when the junction flux defect vanishes within tol."""
    return abs(flux_defect(f, spec)) <= tol


def embed_line(y: float, spec: GraphSpec) -> GraphPoint:
    """Identify the real line with a two-ray graph: y >= 0 goes to ray 1,
    y < 0 to ray 2 at radius |y|."""
    if spec.n_rays != 2:
        raise WrongRayCount(f"line embedding needs 2 rays, spec has {spec.n_rays}")
    y = float(y)
    if y == 0.0:
        return spec.origin
    return GraphPoint(ray=1 if y > 0 else 2, radius=abs(y))


def project_line(x: GraphPoint, spec: GraphSpec) -> float:
    """Inverse of embed_line: ray 1 to +radius, ray 2 to -radius."""
    if spec.n_rays != 2:
        raise WrongRayCount(f"line projection needs 2 rays, spec has {spec.n_rays}")
    if x.radius == 0.0:
        return 0.0
    return x.radius if x.ray == 1 else -x.radius


def signed_coordinate(x: GraphPoint, spec: GraphSpec) -> float:
    """eps(ray) * radius; the scalar the flow trajectories live on."""
    if x.radius == 0.0:
        return 0.0
    return spec.sign(x.ray) * x.radius


def point_from_signed(spec: GraphSpec, ray: int, value: float) -> GraphPoint:
    """Rebuild a graph point from a stored ray and a signed scalar with
    matching sign; used when decoding flow trajectories."""
    return graph_point(spec, ray, abs(value))


def central_difference(fn: Callable[[float], float], x: float, step: float = 1e-5) -> float:
    """Two-sided difference quotient, for cross-checking analytic
    derivative evaluators. Not a substitute for them."""
    return (fn(x + step) - fn(x - step)) / (2.0 * step)


def vector_eval(fn: Callable, xs) -> np.ndarray:
    """Evaluate a per-ray callable on an array, falling back to a scalar
    loop for callables that only take floats."""
    xs = np.asarray(xs, dtype=float)
    try:
        vals = np.asarray(fn(xs), dtype=float)
        if vals.shape == xs.shape:
            return vals
    except (TypeError, ValueError):
        pass
    return np.array([fn(float(x)) for x in xs.ravel()], dtype=float).reshape(xs.shape)
