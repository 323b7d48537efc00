"""Lattice flows with shared noise: scalar trajectories, kernels, mappings.

All trajectories of one ensemble ride the same per-step coins: a
Rademacher sign used away from the junction and a uniform used at it
(step up when the uniform is under the plus-weight). Trajectories are
integers in lattice units (space 2^-n, time 4^-n); before a start is
born its row holds an integer infinity, mirroring the convention that a
trajectory is undefined ahead of its start time.

Coalescence is the recorded merge event of the kernel construction: the
first index at which two trajectories sit at the junction together (for
plus-weight 1/2 the flow is a pure translation with no junction rule, and
the record is the first plain equality instead). Scalar values can become
equal one step before a recorded merge; shared coins keep them equal from
then on, so everything after the record is bitwise identical either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from walshflow.graph import GraphPoint, GraphSpec, graph_point
from walshflow.paths import (
    KEY_FLOW_COINS,
    KEY_KERNEL_CHOICE,
    KEY_MAPPING_CHOICE,
    RngStream,
    dyadic_label,
    label_key,
)

__all__ = [
    "OffLatticeStart",
    "SamplerInvalid",
    "BeforeHitting",
    "MissingIntermediateStart",
    "NeverMet",
    "LATTICE_INF",
    "LatticeFlowConfig",
    "KernelMeasure",
    "MeasurePairSampler",
    "FlowEnsemble",
    "CoalescenceRecord",
    "ray_ratios",
    "skew_lattice_flow",
    "hitting_time",
    "coalescence_time",
    "wiener_kernel",
    "KernelFlow",
    "MappingFlow",
    "sample_kernel_flow",
    "sample_mapping_flow",
    "extract_ray_weights",
    "measure_ray_weights",
    "filter_mapping_to_kernel",
    "project_kernel_to_wiener",
    "flow_property_check",
    "merge_level_samples",
]

LATTICE_INF = np.iinfo(np.int64).max


class OffLatticeStart(ValueError):
    """A start pair is not on the lattice, or start parities are mixed."""


class SamplerInvalid(ValueError):
    """A measure-pair sampler is structurally unusable."""


class BeforeHitting(ValueError):
    """Ray weights requested before the trajectory reached the junction."""


class MissingIntermediateStart(ValueError):
    """Flow-property composition needs a start the ensemble does not have."""


class NeverMet(RuntimeError):
    """Two trajectories did not meet within the horizon (strict mode only)."""


def ray_ratios(spec: GraphSpec, side: int) -> tuple[float, ...]:
    """Normalized ray weights on one side of the junction: alpha_i/alpha+
    over the plus block (side +1) or alpha_j/alpha- over the minus block."""
    if side > 0:
        if spec.p == 0:
            raise SamplerInvalid("no plus rays")
        return tuple(a / spec.alpha_plus for a in spec.alpha[: spec.p])
    if spec.p == spec.n_rays:
        raise SamplerInvalid("no minus rays")
    return tuple(a / spec.alpha_minus for a in spec.alpha[spec.p :])


@dataclass(frozen=True)
class LatticeFlowConfig:
    """Lattice level, time horizon, and the ordered starts.

    Order is construction priority: when trajectories merge, the later
    one copies the earlier one. Starts must sit on the lattice (times on
    the 4^-level grid, radii on the 2^-level grid); OffLatticeStart
    otherwise.
    """

    level: int
    horizon: float
    start_pairs: tuple[tuple[float, GraphPoint], ...]

    def __post_init__(self) -> None:
        if self.level < 0:
            raise ValueError("level must be >= 0")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be > 0")
        if not self.start_pairs:
            raise ValueError("need at least one start")
        dt, dx = self.dt, self.dx
        for s, x in self.start_pairs:
            if s < 0.0 or s >= self.horizon:
                raise OffLatticeStart(f"start time {s!r} outside [0, horizon)")
            if abs(s / dt - round(s / dt)) > 1e-9:
                raise OffLatticeStart(f"start time {s!r} is off the 4^-{self.level} grid")
            if abs(x.radius / dx - round(x.radius / dx)) > 1e-9:
                raise OffLatticeStart(
                    f"start radius {x.radius!r} is off the 2^-{self.level} grid"
                )

    @property
    def dx(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def dt(self) -> float:
        return 4.0 ** (-self.level)

    @property
    def steps(self) -> int:
        return int(math.floor(self.horizon / self.dt + 1e-9))

    def start_indices(self) -> list[tuple[int, int, int]]:
        """Per start: (time index, signed units, ray)."""
        out = []
        for s, x in self.start_pairs:
            out.append(
                (
                    int(round(s / self.dt)),
                    int(round(x.radius / self.dx)),
                    x.ray,
                )
            )
        return out


@dataclass(frozen=True)
class KernelMeasure:
    """Finitely supported probability measure on the graph."""

    points: tuple[GraphPoint, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.points) != len(self.weights) or not self.points:
            raise ValueError("points and weights must be non-empty and aligned")
        for w in self.weights:
            if not w > 0.0:
                raise ValueError(f"weight {w!r} must be > 0")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {math.fsum(self.weights)!r}, not 1")
        if len(set(self.points)) != len(self.points):
            raise ValueError("atoms must be distinct")

    @classmethod
    def dirac(cls, point: GraphPoint) -> "KernelMeasure":
        return cls(points=(point,), weights=(1.0,))


def measure_ray_weights(measure: KernelMeasure, spec: GraphSpec) -> np.ndarray:
    """Total mass per ray away from the origin, indexed 0..N-1."""
    out = np.zeros(spec.n_rays)
    for pt, w in zip(measure.points, measure.weights):
        if pt.radius > 0.0:
            out[pt.ray - 1] += w
    return out


class MeasurePairSampler:
    """Sampling laws for the per-excursion ray-weight vectors.

    One law on the plus simplex, one on the minus simplex; both declare
    the normalized ray weights as their mean, which is what a valid
    solution requires (biased laws can still be built, as statistical
    negative controls). Named families:

      wiener           point mass at the normalized weights
      dirac-vertices   simplex vertex i with probability ratio_i
      uniform-simplex  flat law on the simplex (mean is uniform, so this
                       is only unbiased when the ratios are themselves
                       uniform; otherwise it serves as a biased control)
      dirichlet:<c>    Dirichlet with concentration c * ratios (mean is
                       the ratios for every c > 0)
      custom-weights:w1,w2,...  point mass at the given vector
    """

    def __init__(self, spec: GraphSpec, plus_name: str, minus_name: Optional[str] = None):
        self.spec = spec
        self.plus_name = plus_name
        self.minus_name = minus_name if minus_name is not None else plus_name
        self.plus_dim = spec.p
        self.minus_dim = spec.n_rays - spec.p
        self.declared_plus = ray_ratios(spec, +1) if self.plus_dim else None
        self.declared_minus = ray_ratios(spec, -1) if self.minus_dim else None
        self._plus = self._build(self.plus_name, self.declared_plus) if self.plus_dim else None
        self._minus = (
            self._build(self.minus_name, self.declared_minus) if self.minus_dim else None
        )

    @staticmethod
    def _build(name: str, ratios: tuple[float, ...]):
        dim = len(ratios)
        if name == "wiener":
            vec = np.asarray(ratios)
            return lambda gen: vec.copy()
        if name == "dirac-vertices":
            cum = np.cumsum(ratios)
            cum[-1] = 1.0

            def vertex(gen):
                i = int(np.searchsorted(cum, gen.random(), side="right"))
                out = np.zeros(dim)
                out[i] = 1.0
                return out

            return vertex
        if name == "uniform-simplex":
            ones = np.ones(dim)
            return lambda gen: gen.dirichlet(ones)
        if name.startswith("dirichlet:"):
            try:
                conc = float(name.split(":", 1)[1])
            except ValueError as exc:
                raise SamplerInvalid(f"bad concentration in {name!r}") from exc
            if conc <= 0.0:
                raise SamplerInvalid(f"concentration must be > 0 in {name!r}")
            alpha_vec = conc * np.asarray(ratios)
            return lambda gen: gen.dirichlet(alpha_vec)
        if name.startswith("custom-weights:"):
            try:
                vec = np.array([float(v) for v in name.split(":", 1)[1].split(",")])
            except ValueError as exc:
                raise SamplerInvalid(f"bad weight list in {name!r}") from exc
            if len(vec) != dim:
                raise SamplerInvalid(f"{name!r} has {len(vec)} weights, need {dim}")
            if np.any(vec < 0.0) or abs(float(np.sum(vec)) - 1.0) > 1e-9:
                raise SamplerInvalid(f"{name!r} is not a probability vector")
            return lambda gen: vec.copy()
        raise SamplerInvalid(f"unknown sampler family {name!r}")

    def sample(self, side: int, gen: np.random.Generator) -> np.ndarray:
        fn = self._plus if side > 0 else self._minus
        if fn is None:
            raise SamplerInvalid(
                "no rays on the requested side; the trajectory should never get there"
            )
        return fn(gen)

    def declared_mean(self, side: int) -> tuple[float, ...]:
        mean = self.declared_plus if side > 0 else self.declared_minus
        if mean is None:
            raise SamplerInvalid("no rays on the requested side")
        return mean


@dataclass(frozen=True)
class CoalescenceRecord:
    """later start q merged into target at the given grid index."""

    start_index: int
    target_index: int
    merge_index: int


class FlowEnsemble:
    """Scalar lattice trajectories driven by one shared coin sequence."""

    def __init__(
        self,
        config: LatticeFlowConfig,
        spec: GraphSpec,
        origin_uniforms: np.ndarray,
        rademacher: np.ndarray,
        traj: np.ndarray,
        start_meta: list[tuple[int, int, int]],
    ):
        self.config = config
        self.spec = spec
        self.origin_uniforms = origin_uniforms
        self.rademacher = rademacher
        self.traj = traj  # (n_starts, steps+1) int64, LATTICE_INF before birth
        self.start_meta = start_meta  # (s_index, signed_units, ray)
        self._zero_cache: dict[int, np.ndarray] = {}
        self._merge_cache: dict[int, Optional[CoalescenceRecord]] = {}

    @property
    def n_starts(self) -> int:
        return len(self.start_meta)

    @property
    def steps(self) -> int:
        return self.config.steps

    def times(self) -> np.ndarray:
        return self.config.dt * np.arange(self.steps + 1)

    def zeros_of(self, q: int) -> np.ndarray:
        if q not in self._zero_cache:
            self._zero_cache[q] = np.flatnonzero(self.traj[q] == 0)
        return self._zero_cache[q]

    def born_at(self, q: int) -> int:
        return self.start_meta[q][0]

    def merge_record(self, q: int) -> Optional[CoalescenceRecord]:
        """First recorded coalescence of start q onto any earlier start."""
        if q in self._merge_cache:
            return self._merge_cache[q]
        best: Optional[CoalescenceRecord] = None
        for i in range(q):
            idx = self._first_meeting(i, q)
            if idx is not None and (best is None or idx < best.merge_index):
                best = CoalescenceRecord(start_index=q, target_index=i, merge_index=idx)
        self._merge_cache[q] = best
        return best

    def _first_meeting(self, i: int, q: int) -> Optional[int]:
        born = max(self.born_at(i), self.born_at(q))
        a, b = self.traj[i], self.traj[q]
        if self.spec.alpha_plus == 0.5:
            hits = np.flatnonzero((a[born:] == b[born:]))
        else:
            hits = np.flatnonzero((a[born:] == 0) & (b[born:] == 0))
        return int(hits[0]) + born if len(hits) else None


def _prepare_jump_index(csum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # stable argsort groups equal prefix sums with ascending indices
    order = np.argsort(csum, kind="stable")
    return csum[order], order


def _evolve_scalar(
    units0: int,
    s_idx: int,
    steps: int,
    csum: np.ndarray,
    sorted_csum: np.ndarray,
    order: np.ndarray,
    origin_up: np.ndarray,
    alpha_plus: float,
) -> np.ndarray:
    """One trajectory; excursions are filled from the shared prefix sums,
    junction steps are resolved one at a time."""
    traj = np.full(steps + 1, LATTICE_INF, dtype=np.int64)
    k = s_idx
    z = units0
    traj[k] = z
    if alpha_plus == 0.5:
        traj[k:] = z + csum[k:] - csum[k]
        return traj
    while k < steps:
        if z == 0:
            if alpha_plus == 1.0:
                z = 1
            elif alpha_plus == 0.0:
                z = -1
            else:
                z = 1 if origin_up[k] else -1
            k += 1
            traj[k] = z
            continue
        # next zero: first j > k with csum[j] == csum[k] - z
        target = csum[k] - z
        lo = np.searchsorted(sorted_csum, target, side="left")
        hi = np.searchsorted(sorted_csum, target, side="right")
        j = None
        if lo < hi:
            pos = int(np.searchsorted(order[lo:hi], k, side="right"))
            if pos < hi - lo:
                j = int(order[lo + pos])
        end = steps if j is None else min(j, steps)
        traj[k + 1 : end + 1] = z + csum[k + 1 : end + 1] - csum[k]
        k = end
        z = int(traj[k])
    return traj


def skew_lattice_flow(
    config: LatticeFlowConfig, spec: GraphSpec, stream: RngStream
) -> FlowEnsemble:
    """Simulate the shared-coin lattice flow for every configured start.

    Away from the junction every trajectory steps by the one shared
    Rademacher sign; at the junction it steps up exactly when the shared
    uniform is below the plus-weight (always up at weight 1, always down
    at weight 0, and no junction rule at weight 1/2 where the flow is a
    translation). When the plus-weight is not 1/2, all starts must agree
    on (time index + signed units) parity, otherwise order could not be
    preserved and OffLatticeStart is raised.
    """
    starts = config.start_indices()
    steps = config.steps
    signed = [
        (s_idx, spec.sign(ray) * units if units else 0, ray)
        for s_idx, units, ray in starts
    ]
    if spec.alpha_plus != 0.5:
        parities = {(s_idx + units) % 2 for s_idx, units, _ in signed}
        if len(parities) > 1:
            raise OffLatticeStart(
                "starts mix lattice parities; trajectories could cross"
            )
    gen = stream.child(KEY_FLOW_COINS).generator()
    origin_uniforms = gen.random(steps)
    rademacher = np.where(gen.random(steps) < 0.5, 1, -1).astype(np.int64)
    origin_up = origin_uniforms < spec.alpha_plus

    csum = np.concatenate(([0], np.cumsum(rademacher)))
    sorted_csum, order = _prepare_jump_index(csum)
    traj = np.empty((len(signed), steps + 1), dtype=np.int64)
    for q, (s_idx, units, _ray) in enumerate(signed):
        traj[q] = _evolve_scalar(
            units, s_idx, steps, csum, sorted_csum, order, origin_up, spec.alpha_plus
        )
    return FlowEnsemble(config, spec, origin_uniforms, rademacher, traj, signed)


def hitting_time(ensemble: FlowEnsemble, start_index: int) -> Optional[int]:
    """Grid index of the first junction visit, or None if never."""
    zeros = ensemble.zeros_of(start_index)
    return int(zeros[0]) if len(zeros) else None


def coalescence_time(
    ensemble: FlowEnsemble, i: int, j: int, strict: bool = False
) -> Optional[int]:
    """Recorded coalescence index of two trajectories.

    The same start meets itself at its birth index. When the two never
    meet within the horizon the result is None (or NeverMet when strict),
    which is a report, not a failure: at plus-weight 1/2 distinct
    same-time starts are parallel translates and never meet at all.
    """
    if i == j:
        return ensemble.born_at(i)
    lo, hi = (i, j) if i < j else (j, i)
    idx = ensemble._first_meeting(lo, hi)
    if idx is None and strict:
        raise NeverMet(f"starts {i} and {j} did not meet within the horizon")
    return idx


def wiener_kernel(
    spec: GraphSpec, start: GraphPoint, z_value: float, hit_junction: bool
) -> KernelMeasure:
    """The noise-measurable kernel: a moving point mass before the
    junction visit; after it, mass splits over one side's rays in
    proportion to their weights, at the current radius.
    """
    if not hit_junction:
        return KernelMeasure.dirac(graph_point(spec, start.ray, abs(z_value)))
    if z_value == 0.0:
        return KernelMeasure.dirac(spec.origin)
    if z_value > 0.0:
        ratios = ray_ratios(spec, +1)
        rays = range(1, spec.p + 1)
    else:
        ratios = ray_ratios(spec, -1)
        rays = range(spec.p + 1, spec.n_rays + 1)
    radius = abs(z_value)
    points = tuple(GraphPoint(ray=r, radius=radius) for r in rays)
    return KernelMeasure(points=points, weights=ratios)


class KernelFlow:
    """Kernel trajectories over a scalar ensemble.

    Per excursion of each trajectory one ray-weight vector is drawn from
    the measure pair, keyed by (start priority, excursion label), so the
    vector is constant across the excursion and identical on replay.
    After a recorded coalescence the kernel copies its merge target.
    """

    def __init__(
        self,
        ensemble: FlowEnsemble,
        sampler: MeasurePairSampler,
        stream: RngStream,
        draw_index: int = 0,
    ):
        self.ensemble = ensemble
        self.sampler = sampler
        self.stream = stream
        self.draw_index = draw_index
        self._weights_cache: dict[tuple[int, int, int], np.ndarray] = {}

    def _excursion(self, q: int, k: int) -> tuple[int, int]:
        zeros = self.ensemble.zeros_of(q)
        pos = np.searchsorted(zeros, k)
        g = int(zeros[pos - 1])  # a zero before k exists past the hit
        d = int(zeros[pos]) if pos < len(zeros) else self.ensemble.steps
        return g, d

    def excursion_weights(self, q: int, k: int, side: int) -> np.ndarray:
        g, d = self._excursion(q, k)
        dt = self.ensemble.config.dt
        num, exp = label_key(dyadic_label(g * dt, d * dt))
        key = (q, num, exp)
        if key not in self._weights_cache:
            gen = self.stream.child(
                KEY_KERNEL_CHOICE, self.draw_index, q, num, exp
            ).generator()
            self._weights_cache[key] = self.sampler.sample(side, gen)
        return self._weights_cache[key]

    def kernel_at(self, q: int, k: int) -> KernelMeasure:
        ens = self.ensemble
        if k < ens.born_at(q):
            raise ValueError(f"start {q} is not born at index {k}")
        # follow the copy chain through recorded coalescences
        guard = 0
        while True:
            record = ens.merge_record(q)
            if record is not None and k > record.merge_index:
                q = record.target_index
                guard += 1
                if guard > ens.n_starts:
                    raise AssertionError("coalescence chain does not terminate")
                continue
            break
        z = int(ens.traj[q][k])
        zeros = ens.zeros_of(q)
        hit = len(zeros) > 0 and zeros[0] <= k
        dx = ens.config.dx
        start_ray = ens.start_meta[q][2]
        if not hit:
            return KernelMeasure.dirac(graph_point(ens.spec, start_ray, abs(z) * dx))
        if z == 0:
            return KernelMeasure.dirac(ens.spec.origin)
        side = 1 if z > 0 else -1
        weights = self.excursion_weights(q, k, side)
        radius = abs(z) * dx
        rays = range(1, ens.spec.p + 1) if side > 0 else range(ens.spec.p + 1, ens.spec.n_rays + 1)
        points = []
        masses = []
        for ray, w in zip(rays, weights):
            if w > 0.0:
                points.append(GraphPoint(ray=ray, radius=radius))
                masses.append(float(w))
        return KernelMeasure(points=tuple(points), weights=tuple(masses))


class MappingFlow:
    """Point trajectories refining a kernel flow: per excursion one ray is
    drawn from the excursion's weight vector, so conditionally on the
    kernel the point sits on ray i with probability equal to its mass."""

    def __init__(self, kernel_flow: KernelFlow, choice_index: int = 0):
        self.kernels = kernel_flow
        self.choice_index = choice_index
        self._ray_cache: dict[tuple[int, int, int], int] = {}

    def _excursion_ray(self, q: int, k: int, side: int) -> int:
        g, d = self.kernels._excursion(q, k)
        ens = self.kernels.ensemble
        dt = ens.config.dt
        num, exp = label_key(dyadic_label(g * dt, d * dt))
        key = (q, num, exp)
        if key not in self._ray_cache:
            weights = self.kernels.excursion_weights(q, k, side)
            gen = self.kernels.stream.child(
                KEY_MAPPING_CHOICE, self.choice_index, q, num, exp
            ).generator()
            cum = np.cumsum(weights)
            cum[-1] = 1.0
            offset = int(np.searchsorted(cum, gen.random(), side="right"))
            base = 1 if side > 0 else ens.spec.p + 1
            self._ray_cache[key] = base + offset
        return self._ray_cache[key]

    def point_at(self, q: int, k: int) -> GraphPoint:
        ens = self.kernels.ensemble
        if k < ens.born_at(q):
            raise ValueError(f"start {q} is not born at index {k}")
        guard = 0
        while True:
            record = ens.merge_record(q)
            if record is not None and k > record.merge_index:
                q = record.target_index
                guard += 1
                if guard > ens.n_starts:
                    raise AssertionError("coalescence chain does not terminate")
                continue
            break
        z = int(ens.traj[q][k])
        zeros = ens.zeros_of(q)
        hit = len(zeros) > 0 and zeros[0] <= k
        dx = ens.config.dx
        if not hit:
            return graph_point(ens.spec, ens.start_meta[q][2], abs(z) * dx)
        if z == 0:
            return ens.spec.origin
        side = 1 if z > 0 else -1
        ray = self._excursion_ray(q, k, side)
        return GraphPoint(ray=ray, radius=abs(z) * dx)


def sample_kernel_flow(
    config: LatticeFlowConfig,
    spec: GraphSpec,
    sampler: MeasurePairSampler,
    stream: RngStream,
    ensemble: Optional[FlowEnsemble] = None,
    draw_index: int = 0,
) -> KernelFlow:
    """Kernel flow over a (possibly shared) scalar ensemble."""
    if sampler.spec is not spec and sampler.spec != spec:
        raise SamplerInvalid("sampler was built for a different graph")
    if ensemble is None:
        ensemble = skew_lattice_flow(config, spec, stream)
    return KernelFlow(ensemble, sampler, stream, draw_index=draw_index)


def sample_mapping_flow(
    config: LatticeFlowConfig,
    spec: GraphSpec,
    sampler: MeasurePairSampler,
    stream: RngStream,
    ensemble: Optional[FlowEnsemble] = None,
    choice_index: int = 0,
    kernel_flow: Optional[KernelFlow] = None,
) -> MappingFlow:
    """Mapping flow refining a kernel flow (reused if given, so the same
    weight draws filter down to the point choice)."""
    if kernel_flow is None:
        kernel_flow = sample_kernel_flow(config, spec, sampler, stream, ensemble=ensemble)
    return MappingFlow(kernel_flow, choice_index=choice_index)


def extract_ray_weights(
    flow: KernelFlow, start_index: int
) -> list[tuple[int, int, int, np.ndarray]]:
    """Per completed-or-final excursion after the first junction visit:
    (side, start index, end index, ray weights over that side's block).

    Raises BeforeHitting when the trajectory never reaches the junction.
    """
    ens = flow.ensemble
    zeros = ens.zeros_of(start_index)
    if not len(zeros):
        raise BeforeHitting(f"start {start_index} never reaches the junction")
    traj = ens.traj[start_index]
    out = []
    for pos, g in enumerate(zeros):
        k = int(g) + 1
        if k > ens.steps:
            break
        # unit steps leave the junction immediately, so traj[k] is never 0
        d = int(zeros[pos + 1]) if pos + 1 < len(zeros) else ens.steps
        side = 1 if traj[k] > 0 else -1
        weights = flow.excursion_weights(start_index, k, side)
        out.append((side, int(g), d, weights))
    return out


def filter_mapping_to_kernel(
    flow: KernelFlow,
    start_index: int,
    k: int,
    replicas: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Conditional check: with coins and weight draws fixed, redraw the
    point choice many times; the ray frequencies over replicas should
    match the excursion's weight vector to binomial accuracy.

    Returns (frequencies, weight vector, replica count); the caller
    compares them at 3 sqrt(w(1-w)/replicas).
    """
    ens = flow.ensemble
    z = int(ens.traj[start_index][k])
    if z == 0 or z == LATTICE_INF:
        raise ValueError(f"index {k} is not inside an excursion of start {start_index}")
    zeros = ens.zeros_of(start_index)
    if not len(zeros) or zeros[0] > k:
        raise BeforeHitting("conditional ray choice only exists after the junction visit")
    side = 1 if z > 0 else -1
    weights = flow.excursion_weights(start_index, k, side)
    dim = len(weights)
    counts = np.zeros(dim)
    for r in range(replicas):
        mapping = MappingFlow(flow, choice_index=r)
        ray = mapping._excursion_ray(start_index, k, side)
        base = 1 if side > 0 else ens.spec.p + 1
        counts[ray - base] += 1
    return counts / replicas, np.asarray(weights, dtype=float), replicas


def project_kernel_to_wiener(
    config: LatticeFlowConfig,
    spec: GraphSpec,
    sampler: MeasurePairSampler,
    stream: RngStream,
    start_index: int,
    k: int,
    replicas: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Average the kernel's ray-weight vectors over fresh measure draws
    with the coins fixed; for an unbiased sampler the average converges
    to the noise-measurable kernel's weights (biased samplers are the
    negative control and drift away).

    Returns (mean ray weights over all rays, reference weights, count).
    """
    ensemble = skew_lattice_flow(config, spec, stream)
    z = int(ensemble.traj[start_index][k])
    zeros = ensemble.zeros_of(start_index)
    hit = len(zeros) > 0 and zeros[0] <= k
    start_ray = ensemble.start_meta[start_index][2]
    signed = float(z) * ensemble.config.dx
    reference = wiener_kernel(
        spec,
        GraphPoint(ray=start_ray, radius=abs(signed)) if signed != 0.0 else spec.origin,
        signed,
        hit,
    )
    ref_weights = measure_ray_weights(reference, spec)
    acc = np.zeros(spec.n_rays)
    for r in range(replicas):
        flow = KernelFlow(ensemble, sampler, stream, draw_index=r)
        acc += measure_ray_weights(flow.kernel_at(start_index, k), spec)
    return acc / replicas, ref_weights, replicas


def flow_property_check(
    config: LatticeFlowConfig,
    spec: GraphSpec,
    sampler: MeasurePairSampler,
    stream: RngStream,
    parent_index: int,
    mid_index: int,
    final_index: int,
    auto_register: bool = True,
) -> tuple[float, KernelMeasure, KernelMeasure]:
    """Compose the parent kernel at an intermediate time with kernels
    started from its atoms, and compare against the one-shot kernel.

    Intermediate starts are appended to the configuration when absent
    (auto_register), or MissingIntermediateStart is raised. Appending
    never changes earlier trajectories or their draws: coins are shared
    and draw keys use start priority, which appending preserves.

    Returns (max atom-weight discrepancy, composed measure, direct
    measure); atom supports must match exactly for the discrepancy to be
    finite, and weight discrepancies come only from float resummation.
    """
    flow = sample_kernel_flow(config, spec, sampler, stream)
    ens = flow.ensemble
    if not (ens.born_at(parent_index) <= mid_index < final_index <= ens.steps):
        raise ValueError("need birth <= mid < final <= horizon")
    mid_measure = flow.kernel_at(parent_index, mid_index)

    mid_time = mid_index * config.dt
    existing = {(s, x): idx for idx, (s, x) in enumerate(config.start_pairs)}
    needed = []
    for pt in mid_measure.points:
        key = (mid_time, pt)
        if key not in existing:
            needed.append(key)
    if needed and not auto_register:
        raise MissingIntermediateStart(
            f"{len(needed)} intermediate starts absent at index {mid_index}"
        )
    if needed:
        config = LatticeFlowConfig(
            level=config.level,
            horizon=config.horizon,
            start_pairs=config.start_pairs + tuple(needed),
        )
        flow = sample_kernel_flow(config, spec, sampler, stream)
        ens = flow.ensemble
        existing = {(s, x): idx for idx, (s, x) in enumerate(config.start_pairs)}

    combined: dict[GraphPoint, float] = {}
    for pt, w in zip(mid_measure.points, mid_measure.weights):
        child = existing[(mid_time, pt)]
        child_measure = flow.kernel_at(child, final_index)
        for cpt, cw in zip(child_measure.points, child_measure.weights):
            combined[cpt] = combined.get(cpt, 0.0) + w * cw

    direct = flow.kernel_at(parent_index, final_index)
    direct_map = dict(zip(direct.points, direct.weights))
    if set(combined) != set(direct_map):
        return math.inf, _measure_from_map(combined), direct
    disc = max(abs(combined[pt] - direct_map[pt]) for pt in direct_map)
    return disc, _measure_from_map(combined), direct


def _measure_from_map(mapping: dict[GraphPoint, float]) -> KernelMeasure:
    pts = tuple(mapping.keys())
    ws = np.array([mapping[p] for p in pts])
    ws = ws / ws.sum()
    return KernelMeasure(points=pts, weights=tuple(float(w) for w in ws))


def merge_level_samples(
    spec: GraphSpec,
    level: int,
    y_units: int,
    horizon_steps: int,
    n_pairs: int,
    stream: RngStream,
) -> tuple[np.ndarray, int]:
    """Coalescence levels for pairs started at the junction and at
    +y_units, one independent coin sequence per pair.

    The level of a merge is y + (2 a+ - 1) dx * (junction visits of the
    upper trajectory before the merge): the lattice local time the upper
    trajectory accumulated, measured on the skew scale, which is always
    >= y. Returns (levels of merged pairs, number censored at the
    horizon).
    """
    if y_units <= 0 or y_units % 2 != 0:
        raise OffLatticeStart("upper start must be a positive even number of units")
    ap = spec.alpha_plus
    if not 0.5 < ap < 1.0:
        raise ValueError("merge-level law needs a plus-weight strictly between 1/2 and 1")
    gen = stream.child(KEY_FLOW_COINS).generator()
    dx = 2.0 ** (-level)
    y_real = y_units * dx

    z_x = np.zeros(n_pairs, dtype=np.int64)
    z_y = np.full(n_pairs, y_units, dtype=np.int64)
    visits_y = np.zeros(n_pairs, dtype=np.int64)
    alive_idx = np.arange(n_pairs)
    levels = np.full(n_pairs, np.nan)

    for _ in range(horizon_steps):
        if not len(alive_idx):
            break
        m = len(alive_idx)
        u_origin = gen.random(m)
        xi = np.where(gen.random(m) < 0.5, 1, -1)

        zx = z_x[alive_idx]
        zy = z_y[alive_idx]
        at0_y = zy == 0
        visits_y[alive_idx[at0_y]] += 1

        new_zx = np.where(zx == 0, np.where(u_origin < ap, 1, -1), zx + xi)
        new_zy = np.where(at0_y, np.where(u_origin < ap, 1, -1), zy + xi)
        z_x[alive_idx] = new_zx
        z_y[alive_idx] = new_zy

        merged = (new_zx == 0) & (new_zy == 0)
        if np.any(merged):
            hit = alive_idx[merged]
            levels[hit] = y_real + (2.0 * ap - 1.0) * dx * visits_y[hit]
            alive_idx = alive_idx[~merged]

    merged_levels = levels[~np.isnan(levels)]
    return merged_levels, int(len(alive_idx))
