"""Path constructions: Brownian sampling, reflection, excursion flips.

A Walsh path is built from a reflected scalar driver: the radius follows
the reflected Brownian motion exactly, and each positive excursion is
assigned a ray by a categorical draw keyed on the excursion's dyadic
label, so the same RNG stream always reproduces the same path, excursion
by excursion, without any dependence on traversal order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from walshflow.graph import (
    GraphPoint,
    GraphSpec,
    PiecewiseFunction,
    flux_defect,
    graph_point,
    vector_eval,
)

__all__ = [
    "EmptyInterval",
    "NotInExcursion",
    "TimeGrid",
    "ScalarPath",
    "RngStream",
    "WalshPath",
    "sample_brownian",
    "reflect_path",
    "skorokhod_reflection",
    "local_time_band",
    "dyadic_label",
    "label_key",
    "excursion_interval",
    "wbm_flip_construct",
    "sample_wbm_exact",
    "walk_matrix",
    "scaled_walk_marginal",
    "freidlin_sheu_residual",
    "ray_from_uniform",
]

# purpose codes for RNG stream keys; globally unique so no two draw sites
# can collide on the same Philox counter block
KEY_BROWNIAN = 1
KEY_RAY_FLIP = 2
KEY_EXACT_MARGINAL = 3
KEY_WALK = 4
KEY_FLOW_COINS = 5
KEY_KERNEL_CHOICE = 6
KEY_MAPPING_CHOICE = 7
KEY_MEASURE = 8
KEY_REPLICA = 9


class EmptyInterval(ValueError):
    """Dyadic label of an empty open interval."""


class NotInExcursion(ValueError):
    """Excursion interval requested at a time where the path is zero."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t0 + k*dt for k = 0..steps."""

    t0: float
    dt: float
    steps: int

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ValueError(f"dt = {self.dt!r} must be > 0")
        if self.steps < 1:
            raise ValueError(f"steps = {self.steps!r} must be >= 1")

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def horizon(self) -> float:
        return self.t0 + self.dt * self.steps


@dataclass(frozen=True, eq=False)
class ScalarPath:
    """Values on a time grid, one per grid point."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        if len(self.values) != self.grid.steps + 1:
            raise ValueError(
                f"{len(self.values)} values for {self.grid.steps + 1} grid points"
            )


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by (root seed, key tuple).

    Children extend the key; the same root seed and key always produce
    identical draws regardless of creation order. Key parts may be any
    ints (negative parts are zigzag-encoded for the seed sequence).
    """

    root_seed: int
    stream_key: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.root_seed < 2**64:
            raise ValueError(f"root_seed {self.root_seed!r} outside 64-bit range")

    def child(self, *parts: int) -> "RngStream":
        return RngStream(self.root_seed, self.stream_key + tuple(int(p) for p in parts))

    def generator(self) -> np.random.Generator:
        encoded = tuple(2 * k if k >= 0 else -2 * k - 1 for k in self.stream_key)
        seq = np.random.SeedSequence(self.root_seed, spawn_key=encoded)
        return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True, eq=False)
class WalshPath:
    """A path on the star graph: per-grid-point ray and radius.

    The radius array is the reflected driver itself (no separate copy to
    drift out of sync), zeros sit on the canonical origin ray, and the
    ray is constant on every positive excursion; construction validates
    the last two. Optional driver pieces (raw Brownian and its Skorokhod
    local time) ride along for pathwise-identity checks.
    """

    grid: TimeGrid
    rays: np.ndarray
    radii: np.ndarray
    n_rays: int
    brownian: Optional[np.ndarray] = field(default=None)
    local_time: Optional[np.ndarray] = field(default=None)

    def __post_init__(self) -> None:
        n = self.grid.steps + 1
        if len(self.rays) != n or len(self.radii) != n:
            raise ValueError("rays and radii must have one entry per grid point")
        if np.any(self.radii < 0.0):
            raise ValueError("radii must be nonnegative")
        at_zero = self.radii == 0.0
        if np.any(self.rays[at_zero] != self.n_rays):
            raise ValueError("zero-radius points must sit on the origin ray")
        # ray constant per positive excursion: changes only across zeros
        changed = self.rays[1:] != self.rays[:-1]
        inside = (~at_zero[1:]) & (~at_zero[:-1])
        if np.any(changed & inside):
            raise ValueError("ray changed inside a positive excursion")

    def point_at(self, k: int) -> GraphPoint:
        return GraphPoint(ray=int(self.rays[k]), radius=float(self.radii[k]))


def sample_brownian(grid: TimeGrid, stream: RngStream, start: float = 0.0) -> ScalarPath:
    """Brownian path on the grid from the stream's dedicated child key."""
    gen = stream.child(KEY_BROWNIAN).generator()
    increments = gen.standard_normal(grid.steps) * math.sqrt(grid.dt)
    values = np.empty(grid.steps + 1)
    values[0] = start
    np.cumsum(increments, out=values[1:])
    values[1:] += start
    return ScalarPath(grid=grid, values=values)


def reflect_path(path: ScalarPath) -> ScalarPath:
    """Subtract the running minimum-below-zero: exact zeros whenever the
    running minimum is attained."""
    v = path.values
    floor_ = np.minimum.accumulate(np.minimum(v, 0.0))
    return ScalarPath(grid=path.grid, values=v - floor_)


def skorokhod_reflection(start: float, brownian: ScalarPath) -> tuple[ScalarPath, ScalarPath]:
    """Reflect start + B at zero; returns (reflected path, local time).

    The local time is the running compensator -min(0, min_u(start + B_u));
    both identities hold exactly in float arithmetic because the reflected
    value at an attained minimum is the same float subtracted from itself.
    """
    if start < 0.0:
        raise ValueError(f"start {start!r} must be >= 0")
    w = start + (brownian.values - brownian.values[0])
    floor_ = np.minimum.accumulate(np.minimum(w, 0.0))
    reflected = ScalarPath(grid=brownian.grid, values=w - floor_)
    local = ScalarPath(grid=brownian.grid, values=-floor_)
    return reflected, local


def local_time_band(path: ScalarPath, eps: float) -> float:
    """Occupation-band estimator (1/2 eps) * time spent at or below eps,
    left-endpoint rule over the grid."""
    if eps <= 0.0:
        raise ValueError(f"eps {eps!r} must be > 0")
    count = int(np.count_nonzero(path.values[:-1] <= eps))
    return count * path.grid.dt / (2.0 * eps)


def dyadic_label(u: float, v: float) -> Fraction:
    """Least dyadic rational strictly inside ]u, v[ at the smallest level.

    Scans levels n = 0, 1, ... and at each takes the smallest k with
    k/2^n > u, returning k/2^n as soon as it is below v. All comparisons
    are exact (floats are binary rationals)."""
    if not u < v:
        raise EmptyInterval(f"interval ]{u!r}, {v!r}[ is empty")
    fu = Fraction(u)
    fv = Fraction(v)
    for n in range(1100):
        k = math.floor(fu * (1 << n)) + 1
        cand = Fraction(k, 1 << n)
        if cand < fv:
            return cand
    raise AssertionError("no dyadic point found; interval narrower than float spacing")


def label_key(label: Fraction) -> tuple[int, int]:
    """(numerator, level) encoding of a dyadic label for RNG keys."""
    exp = label.denominator.bit_length() - 1
    return label.numerator, exp


def excursion_interval(path: ScalarPath, index: int) -> tuple[int, int]:
    """Indices (g, d) of the excursion straddling a grid index.

    g is the last zero at or before the index (grid start if the path
    never touched zero that early), d the first zero after it; when the
    excursion is still open at the end of the grid, d is the final grid
    index as a sentinel. Raises NotInExcursion at a zero of the path.
    """
    v = path.values
    if v[index] == 0.0:
        raise NotInExcursion(f"path is at zero at index {index}")
    zeros = np.flatnonzero(v == 0.0)
    before = zeros[zeros < index]
    after = zeros[zeros > index]
    g = int(before[-1]) if len(before) else 0
    d = int(after[0]) if len(after) else path.grid.steps
    return g, d


def ray_from_uniform(spec: GraphSpec, u) -> np.ndarray:
    """Map uniforms to ray indices with the spec's weights."""
    cum = np.cumsum(spec.alpha)
    cum[-1] = 1.0  # guard the top edge against rounding
    return np.searchsorted(cum, np.asarray(u), side="right").astype(np.int64) + 1


def _positive_runs(values: np.ndarray) -> list[tuple[int, int]]:
    pos = values > 0.0
    padded = np.concatenate(([False], pos, [False]))
    starts = np.flatnonzero(padded[1:] & ~padded[:-1])
    ends = np.flatnonzero(~padded[1:] & padded[:-1])
    return list(zip(starts, ends - 1))


def wbm_flip_construct(
    grid: TimeGrid,
    spec: GraphSpec,
    stream: RngStream,
    start: Optional[GraphPoint] = None,
) -> WalshPath:
    """Walsh path via excursion flips of a reflected driver.

    The driver is start-radius + B reflected at zero; every completed
    positive excursion gets its ray from a categorical draw keyed by the
    dyadic label of its time interval. An excursion already running at
    t0 keeps the starting ray; one still open at the final time is keyed
    with the grid end as its right endpoint.
    """
    start = start if start is not None else spec.origin
    brownian = sample_brownian(grid, stream)
    reflected, local = skorokhod_reflection(start.radius, brownian)
    values = reflected.values
    times = grid.times()

    rays = np.full(grid.steps + 1, spec.n_rays, dtype=np.int64)
    for first, last in _positive_runs(values):
        if first == 0:
            ray = start.ray  # excursion predates the grid; no flip yet
        else:
            g_time = float(times[first - 1])
            d_time = float(times[last + 1]) if last + 1 <= grid.steps else float(times[-1])
            if not g_time < d_time:
                d_time = math.nextafter(g_time, math.inf)
            num, exp = label_key(dyadic_label(g_time, d_time))
            gen = stream.child(KEY_RAY_FLIP, num, exp).generator()
            ray = int(ray_from_uniform(spec, gen.random())[()])
        rays[first : last + 1] = ray

    return WalshPath(
        grid=grid,
        rays=rays,
        radii=values,
        n_rays=spec.n_rays,
        brownian=brownian.values,
        local_time=local.values,
    )


def sample_wbm_exact(
    spec: GraphSpec,
    t: float,
    replicas: int,
    stream: RngStream,
    steps: int = 16,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (ray, radius) marginals of the flip construction at time t
    from the origin, with the driver's running minimum sampled exactly.

    Each coarse step contributes its within-step minimum from the exact
    Brownian-bridge law (inverse CDF of exp(-2(a-b0)(a-b1)/dt)), so the
    reflected radius B_t - min_u B_u has the continuum half-normal law
    with no grid bias. The flip draw for the excursion straddling t is
    keyed by the step where the running minimum was last attained.
    """
    if t <= 0.0:
        raise ValueError(f"t = {t!r} must be > 0")
    if replicas < 1:
        raise ValueError("need at least one replica")
    gen = stream.child(KEY_EXACT_MARGINAL).generator()
    dt = t / steps
    increments = gen.standard_normal((replicas, steps)) * math.sqrt(dt)
    endpoints = np.cumsum(increments, axis=1)
    starts = np.concatenate([np.zeros((replicas, 1)), endpoints[:, :-1]], axis=1)

    u_min = gen.random((replicas, steps))
    log_u = np.log1p(-u_min)  # log of a (0,1] uniform
    disc = np.sqrt(np.square(increments) - 2.0 * dt * log_u)
    step_minima = (starts + endpoints - disc) / 2.0

    running = np.minimum.accumulate(step_minima, axis=1)
    radii = endpoints[:, -1] - running[:, -1]
    # step whose bridge minimum is the overall one: excursion identity proxy
    argmin_step = np.argmax(step_minima <= running[:, -1:], axis=1)

    u_ray = gen.random((replicas, steps))
    chosen = u_ray[np.arange(replicas), argmin_step]
    rays = ray_from_uniform(spec, chosen)
    rays[radii == 0.0] = spec.n_rays  # measure-zero guard
    return rays, radii


def walk_matrix(spec: GraphSpec, radius_steps: int) -> np.ndarray:
    """One-step transition matrix of the approximating walk, truncated.

    States are ordered origin first, then radius-major, ray-minor:
    index 1 + (k-1)*N + (i-1) holds radius k on ray i. From the origin
    the walk enters ray i with weight alpha_i; elsewhere it steps up or
    down with probability 1/2. The outer boundary reflects half its mass
    back onto itself so rows still sum to one.
    """
    if radius_steps < 1:
        raise ValueError("radius_steps must be >= 1")
    n = spec.n_rays
    size = 1 + radius_steps * n
    mat = np.zeros((size, size))
    for i in range(n):
        mat[0, 1 + i] = spec.alpha[i]
    for k in range(1, radius_steps + 1):
        for i in range(n):
            row = 1 + (k - 1) * n + i
            down = 0 if k == 1 else 1 + (k - 2) * n + i
            mat[row, down] += 0.5
            if k == radius_steps:
                mat[row, row] += 0.5  # truncation: reflect at the rim
            else:
                mat[row, 1 + k * n + i] += 0.5
    return mat


def scaled_walk_marginal(
    spec: GraphSpec,
    level: int,
    t: float,
    replicas: int,
    stream: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample the walk after floor(2^(2n) t) steps, scaled by 2^-n.

    Returns (rays, radii); the origin reports the canonical ray.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    steps = int(math.floor((4**level) * t))
    gen = stream.child(KEY_WALK, level).generator()
    rays = np.full(replicas, spec.n_rays, dtype=np.int64)
    k = np.zeros(replicas, dtype=np.int64)
    cum = np.cumsum(spec.alpha)
    cum[-1] = 1.0
    for _ in range(steps):
        u = gen.random(replicas)
        at_origin = k == 0
        if np.any(at_origin):
            rays[at_origin] = np.searchsorted(cum, u[at_origin], side="right") + 1
            k[at_origin] = 1
        off = ~at_origin
        k[off] += np.where(u[off] < 0.5, 1, -1)
    rays[k == 0] = spec.n_rays
    return rays, k.astype(float) / float(2**level)


def freidlin_sheu_residual(f: PiecewiseFunction, spec: GraphSpec, path: WalshPath) -> float:
    """Pathwise change-of-variables residual over the whole grid.

    f(Z_T) - f(Z_0) - sum f'(Z)dB - (1/2) sum f''(Z)dt - defect * Ltilde_T
    with left-endpoint sums, the driver Brownian increments, and the
    Skorokhod local time carried by the path. Derivatives at the origin
    follow the canonical-ray convention baked into the path's zero rays.
    """
    if path.brownian is None or path.local_time is None:
        raise ValueError("path must carry its Brownian driver and local time")
    if f.n_rays != spec.n_rays or path.n_rays != spec.n_rays:
        raise ValueError("function, path, and spec must agree on the ray count")
    rays, radii = path.rays, path.radii
    fp = np.empty(len(radii))
    fpp = np.empty(len(radii))
    for ray in range(1, spec.n_rays + 1):
        comp = f.components[ray - 1]
        mask = rays == ray
        if not np.any(mask):
            continue
        if comp.deriv is None or comp.second_deriv is None:
            raise ValueError(f"ray {ray} needs both derivative evaluators")
        fp[mask] = vector_eval(comp.deriv, radii[mask])
        fpp[mask] = vector_eval(comp.second_deriv, radii[mask])
    increments = np.diff(path.brownian)
    ito_sum = float(np.dot(fp[:-1], increments))
    drift_sum = 0.5 * path.grid.dt * float(np.sum(fpp[:-1]))
    defect = flux_defect(f, spec)
    z0 = graph_point(spec, int(rays[0]), float(radii[0]))
    zT = graph_point(spec, int(rays[-1]), float(radii[-1]))
    return (
        f(zT) - f(z0) - ito_sum - drift_sum - defect * float(path.local_time[-1])
    )
