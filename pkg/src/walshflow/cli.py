"""Experiment runner: subcommands, structured config, CSV/report emission.

Every command reads one ExperimentConfig, resolves the root seed
(command line beats the WALSH_SEED variable, which beats the config
file), runs its experiment, writes a CSV of raw numbers plus a
line-delimited report file, and exits 0 only when every mandatory check
passed. Replicas always derive their randomness from (root seed,
replica index), so a worker pool of any size produces byte-identical
artifacts to a serial run.

Exit codes: 0 success, 1 a mandatory check failed, 2 invalid
configuration or usage, 3 input/output or runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from walshflow.flows import (
    KernelFlow,
    LatticeFlowConfig,
    MappingFlow,
    MeasurePairSampler,
    SamplerInvalid,
    coalescence_time,
    extract_ray_weights,
    measure_ray_weights,
    merge_level_samples,
    ray_ratios,
    sample_kernel_flow,
    skew_lattice_flow,
    wiener_kernel,
)
from walshflow.graph import (
    GraphPoint,
    GraphSpec,
    PiecewiseFunction,
    RayFunction,
    central_difference,
    validate_spec,
)
from walshflow.paths import (
    KEY_FLOW_COINS,
    KEY_REPLICA,
    RngStream,
    TimeGrid,
    freidlin_sheu_residual,
    sample_wbm_exact,
    scaled_walk_marginal,
    wbm_flip_construct,
)
from walshflow.semigroup import (
    DEFAULT_QUADRATURE,
    generator_residual,
    semigroup_derivative,
    tabulate_semigroup,
    wbm_semigroup_apply,
)
from walshflow.stats import (
    TestReport,
    folded_gaussian_cdf,
    ks_statistic,
    marginal_vs_semigroup,
    powerlaw_fit_coalescence,
)

__all__ = [
    "ConfigInvalid",
    "Io",
    "CheckFailed",
    "ExperimentConfig",
    "DEFAULT_CONFIG",
    "parse_config",
    "serialize_config",
    "load_config",
    "emit_csv",
    "run",
    "main",
]


class ConfigInvalid(ValueError):
    """The experiment configuration cannot be used (exit code 2)."""


class Io(RuntimeError):
    """Reading inputs or writing artifacts failed (exit code 3)."""


class CheckFailed(RuntimeError):
    """A mandatory verification check failed (exit code 1)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment run needs, serializable to an INI file."""

    alpha: tuple[float, ...] = (0.4, 0.3, 0.3)
    eps: tuple[int, ...] = (1, 1, -1)
    level: int = 6
    dt: float = 1e-4
    horizon: float = 1.0
    flow_horizon: float = 4.0
    flow_y_units: int = 4
    replicas: int = 20000
    path_replicas: int = 200
    flow_replicas: int = 1200
    merge_pairs: int = 4000
    workers: int = 1
    root_seed: int = 20240
    out_dir: str = "walshflow-out"
    measure_plus: str = "wiener"
    measure_minus: str = "wiener"

    def validate(self) -> "ExperimentConfig":
        try:
            spec = validate_spec(self.alpha, self.eps)
        except ValueError as exc:
            raise ConfigInvalid(f"bad graph: {exc}") from exc
        if not 0 <= self.level <= 12:
            raise ConfigInvalid("level must be between 0 and 12")
        if self.dt <= 0 or self.horizon <= 0 or self.flow_horizon <= 0:
            raise ConfigInvalid("dt, horizon, and flow_horizon must be positive")
        if self.flow_y_units <= 0 or self.flow_y_units % 2:
            raise ConfigInvalid("flow_y_units must be a positive even integer")
        for field_name in (
            "replicas",
            "path_replicas",
            "flow_replicas",
            "merge_pairs",
            "workers",
        ):
            if getattr(self, field_name) < 1:
                raise ConfigInvalid(f"{field_name} must be >= 1")
        if not 0 <= self.root_seed < 2**64:
            raise ConfigInvalid("root_seed must fit an unsigned 64-bit integer")
        if not self.out_dir:
            raise ConfigInvalid("out_dir must be non-empty")
        try:
            MeasurePairSampler(spec, self.measure_plus, self.measure_minus)
        except SamplerInvalid as exc:
            raise ConfigInvalid(f"bad measure pair: {exc}") from exc
        return self

    def spec(self) -> GraphSpec:
        return validate_spec(self.alpha, self.eps)


DEFAULT_CONFIG = ExperimentConfig()


def serialize_config(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["graph"] = {
        "alpha": ", ".join(repr(a) for a in config.alpha),
        "eps": ", ".join(str(e) for e in config.eps),
    }
    parser["scheme"] = {
        "level": str(config.level),
        "dt": repr(config.dt),
        "horizon": repr(config.horizon),
        "flow_horizon": repr(config.flow_horizon),
        "flow_y_units": str(config.flow_y_units),
    }
    parser["run"] = {
        "replicas": str(config.replicas),
        "path_replicas": str(config.path_replicas),
        "flow_replicas": str(config.flow_replicas),
        "merge_pairs": str(config.merge_pairs),
        "workers": str(config.workers),
        "root_seed": str(config.root_seed),
        "out_dir": config.out_dir,
    }
    parser["measure"] = {
        "plus": config.measure_plus,
        "minus": config.measure_minus,
    }
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid(f"config does not parse: {exc}") from exc
    try:
        config = ExperimentConfig(
            alpha=tuple(
                float(v) for v in parser.get("graph", "alpha").split(",") if v.strip()
            ),
            eps=tuple(
                int(v) for v in parser.get("graph", "eps").split(",") if v.strip()
            ),
            level=parser.getint("scheme", "level"),
            dt=parser.getfloat("scheme", "dt"),
            horizon=parser.getfloat("scheme", "horizon"),
            flow_horizon=parser.getfloat("scheme", "flow_horizon"),
            flow_y_units=parser.getint("scheme", "flow_y_units"),
            replicas=parser.getint("run", "replicas"),
            path_replicas=parser.getint("run", "path_replicas"),
            flow_replicas=parser.getint("run", "flow_replicas"),
            merge_pairs=parser.getint("run", "merge_pairs"),
            workers=parser.getint("run", "workers"),
            root_seed=parser.getint("run", "root_seed"),
            out_dir=parser.get("run", "out_dir"),
            measure_plus=parser.get("measure", "plus"),
            measure_minus=parser.get("measure", "minus"),
        )
    except (configparser.Error, ValueError) as exc:
        raise ConfigInvalid(f"config is incomplete or malformed: {exc}") from exc
    return config.validate()


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigInvalid(f"config file {path!r} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return parse_config(handle.read())
    except OSError as exc:
        raise Io(f"cannot read config {path!r}: {exc}") from exc


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".12g")
    return str(value)


def emit_csv(rows: Sequence[Sequence], headers: Sequence[str], path: str) -> None:
    """Write a rectangular table: UTF-8, LF separators, header always
    present, floats at 12 significant digits."""
    for row in rows:
        if len(row) != len(headers):
            raise ValueError("table is not rectangular")
    try:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(headers)
            for row in rows:
                writer.writerow([_format_cell(v) for v in row])
    except OSError as exc:
        raise Io(f"cannot write {path!r}: {exc}") from exc


def _write_reports(reports: Sequence[TestReport], path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            for report in reports:
                handle.write(report.to_json_line())
                handle.write("\n")
    except OSError as exc:
        raise Io(f"cannot write {path!r}: {exc}") from exc


def _map_replicas(task: Callable, args_list: list, workers: int) -> list:
    """Run one task per replica; output order is by replica index, never
    by scheduling, so the worker count cannot change any artifact."""
    if workers <= 1 or len(args_list) <= 1:
        return [task(args) for args in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunk = max(1, len(args_list) // (workers * 8))
        return list(pool.map(task, args_list, chunksize=chunk))


def _report(name, statistic, threshold, passed, replicas, p_value=None, **details):
    return TestReport(
        name=name,
        statistic=float(statistic),
        threshold=float(threshold),
        passed=bool(passed),
        replicas=int(replicas),
        p_value=p_value,
        details={k: float(v) for k, v in details.items()},
    )


# --- verify-semigroup ------------------------------------------------------


def _domain_function(spec: GraphSpec) -> PiecewiseFunction:
    return PiecewiseFunction.radial(
        spec.n_rays,
        lambda h: h * h * np.exp(-h),
        deriv=lambda h: (2.0 * h - h * h) * np.exp(-h),
        second_deriv=lambda h: (2.0 - 4.0 * h + h * h) * np.exp(-h),
    )


def _ray_weighted_function(spec: GraphSpec, coeffs=None) -> PiecewiseFunction:
    if coeffs is None:
        coeffs = [0.8 + 0.4 * i / max(spec.n_rays - 1, 1) for i in range(spec.n_rays)]
    comps = tuple(
        RayFunction(
            value=(lambda h, c=c: c * h * h * np.exp(-h)),
            deriv=(lambda h, c=c: c * (2.0 * h - h * h) * np.exp(-h)),
            second_deriv=(lambda h, c=c: c * (2.0 - 4.0 * h + h * h) * np.exp(-h)),
        )
        for c in coeffs
    )
    return PiecewiseFunction(components=comps)


def _cmd_verify_semigroup(config: ExperimentConfig):
    spec = config.spec()
    quad = DEFAULT_QUADRATURE
    one = PiecewiseFunction.radial(spec.n_rays, lambda h: 1.0)
    rows = []

    worst_conservation = 0.0
    for t in (0.25, 0.5, 1.0, 2.0, 4.0):
        for h in (0.0, 0.5, 1.0, 2.0, 3.0):
            point = spec.origin if h == 0.0 else GraphPoint(ray=1, radius=h)
            value = wbm_semigroup_apply(one, spec, point, t, quad)
            err = abs(value - 1.0)
            worst_conservation = max(worst_conservation, err)
            rows.append(["conservation", t, h, value, err])

    fn = _domain_function(spec)
    worst_law = 0.0
    for s in (0.25, 1.0):
        table = tabulate_semigroup(fn, spec, s, quad, radius_max=3.0 + 10.5)
        for t in (0.25, 1.0):
            for h in (0.0, 0.7, 1.5):
                point = spec.origin if h == 0.0 else GraphPoint(ray=1, radius=h)
                direct = wbm_semigroup_apply(fn, spec, point, s + t, quad)
                nested = wbm_semigroup_apply(table, spec, point, t, quad)
                err = abs(direct - nested)
                worst_law = max(worst_law, err)
                rows.append(["semigroup-law", s + t, h, nested, err])

    worst_generator = 0.0
    for test_fn in (fn, _ray_weighted_function(spec)):
        for h in (0.0, 0.8):
            point = spec.origin if h == 0.0 else GraphPoint(ray=1, radius=h)
            residual = generator_residual(test_fn, spec, point, 1.0, quad)
            worst_generator = max(worst_generator, abs(residual))
            rows.append(["generator-residual", 1.0, h, residual, abs(residual)])

    worst_derivative = 0.0
    for h in (0.4, 0.9, 1.6, 2.5):
        point = GraphPoint(ray=1, radius=h)
        direct = semigroup_derivative(fn, spec, point, 1.0, quad)
        numeric = central_difference(
            lambda r: wbm_semigroup_apply(fn, spec, GraphPoint(ray=1, radius=r), 1.0, quad),
            h,
            step=1e-4,
        )
        rel = abs(direct - numeric) / max(abs(numeric), 1e-12)
        worst_derivative = max(worst_derivative, rel)
        rows.append(["derivative-identity", 1.0, h, direct, rel])

    reports = [
        _report("conservation", worst_conservation, 1e-8, worst_conservation <= 1e-8, 25),
        _report("semigroup-law", worst_law, 1e-5, worst_law <= 1e-5, 12),
        _report("generator-residual", worst_generator, 1e-4, worst_generator <= 1e-4, 4),
        _report(
            "derivative-identity", worst_derivative, 1e-5, worst_derivative <= 1e-5, 4
        ),
    ]
    headers = ["check", "time", "radius", "value", "error"]
    return [("", headers, rows)], reports


# --- simulate-wbm ----------------------------------------------------------


def _path_task(args):
    config, rep = args
    spec = config.spec()
    steps = int(round(config.horizon / config.dt))
    grid = TimeGrid(t0=0.0, dt=config.dt, steps=steps)
    stream = RngStream(config.root_seed).child(KEY_REPLICA, rep)
    path = wbm_flip_construct(grid, spec, stream)
    return (
        rep,
        int(path.rays[-1]),
        float(path.radii[-1]),
        float(path.local_time[-1]),
    )


def _cmd_simulate_wbm(config: ExperimentConfig):
    spec = config.spec()
    args = [(config, rep) for rep in range(config.path_replicas)]
    rows = _map_replicas(_path_task, args, config.workers)
    rows.sort(key=lambda r: r[0])

    stream = RngStream(config.root_seed).child(KEY_REPLICA, config.path_replicas + 1)
    rays, radii = sample_wbm_exact(spec, config.horizon, config.replicas, stream)
    battery = marginal_vs_semigroup(
        spec, config.horizon, rays, radii, name="marginal-vs-semigroup"
    )
    headers = ["replica", "final_ray", "final_radius", "local_time"]
    return [("", headers, rows)], [battery]


# --- walk-converge ---------------------------------------------------------


def _cmd_walk_converge(config: ExperimentConfig):
    spec = config.spec()
    cdf = folded_gaussian_cdf(config.horizon)
    rows = []
    stats = []
    for level in (2, 3, 4, 5):
        stream = RngStream(config.root_seed).child(KEY_REPLICA, level)
        rays, radii = scaled_walk_marginal(
            spec, level, config.horizon, config.replicas, stream
        )
        d, p = ks_statistic(radii, cdf)
        stats.append(d)
        rows.append([level, config.replicas, d, p])
    band_ok = all(stats[i + 1] <= stats[i] * 1.1 for i in range(len(stats) - 1))
    overall = stats[-1] < stats[0]
    reports = [
        _report(
            "walk-ks-monotone",
            stats[-1],
            stats[0],
            band_ok and overall,
            config.replicas,
            **{f"ks_level_{lvl}": stats[i] for i, lvl in enumerate((2, 3, 4, 5))},
        )
    ]
    headers = ["level", "replicas", "ks_stat", "ks_p"]
    return [("", headers, rows)], reports


# --- verify-freidlin-sheu --------------------------------------------------


def _ito_test_functions(spec: GraphSpec):
    # curvature kept near 0.6 so the discretization residual at the fine
    # step stays inside the absolute bound
    in_domain = PiecewiseFunction.radial(
        spec.n_rays,
        lambda h: 0.3 * h * h * np.exp(-h),
        deriv=lambda h: 0.3 * (2.0 * h - h * h) * np.exp(-h),
        second_deriv=lambda h: 0.3 * (2.0 - 4.0 * h + h * h) * np.exp(-h),
    )
    coeffs = [0.25 + 0.1 * i / max(spec.n_rays - 1, 1) for i in range(spec.n_rays)]
    ray_dependent = PiecewiseFunction(
        components=tuple(
            RayFunction(
                value=(lambda h, c=c: c * h * h * np.exp(-h)),
                deriv=(lambda h, c=c: c * (2.0 * h - h * h) * np.exp(-h)),
                second_deriv=(lambda h, c=c: c * (2.0 - 4.0 * h + h * h) * np.exp(-h)),
            )
            for c in coeffs
        )
    )
    off_domain = PiecewiseFunction.radial(
        spec.n_rays,
        lambda h: 0.3 * np.exp(-h),
        deriv=lambda h: -0.3 * np.exp(-h),
        second_deriv=lambda h: 0.3 * np.exp(-h),
    )
    return [
        ("radial-in-domain", in_domain),
        ("ray-dependent", ray_dependent),
        ("radial-off-domain", off_domain),
    ]


def _residual_rms(fn, spec, config, dt, paths, seed_offset):
    steps = int(round(config.horizon / dt))
    grid = TimeGrid(t0=0.0, dt=dt, steps=steps)
    acc = 0.0
    for rep in range(paths):
        stream = RngStream(config.root_seed).child(KEY_REPLICA, seed_offset + rep)
        path = wbm_flip_construct(grid, spec, stream)
        acc += freidlin_sheu_residual(fn, spec, path) ** 2
    return math.sqrt(acc / paths)


def _cmd_verify_freidlin_sheu(config: ExperimentConfig):
    spec = config.spec()
    paths = config.path_replicas
    rows = []
    reports = []
    for idx, (name, fn) in enumerate(_ito_test_functions(spec)):
        coarse = _residual_rms(fn, spec, config, 4.0 * config.dt, paths, 10000 * idx)
        fine = _residual_rms(fn, spec, config, config.dt, paths, 10000 * idx)
        ratio = coarse / fine if fine > 0 else math.inf
        rows.append([name, 4.0 * config.dt, coarse, config.dt, fine, ratio])
        ok = 1.7 <= ratio <= 2.6 and fine <= 5e-3
        reports.append(
            _report(
                f"ito-residual-{name}",
                ratio,
                2.0,
                ok,
                paths,
                rms_fine=fine,
                rms_coarse=coarse,
            )
        )
    headers = ["function", "dt_coarse", "rms_coarse", "dt_fine", "rms_fine", "ratio"]
    return [("", headers, rows)], reports


# --- flow-experiment -------------------------------------------------------


def _flow_starts(spec: GraphSpec, config: ExperimentConfig):
    dx = 2.0 ** (-config.level)
    dt = 4.0 ** (-config.level)
    y = config.flow_y_units
    minus_ray = spec.n_rays if spec.p < spec.n_rays else min(2, spec.n_rays)
    return (
        (0.0, spec.origin),
        (0.0, GraphPoint(ray=1, radius=y * dx)),
        (0.0, GraphPoint(ray=minus_ray, radius=2 * dx)),
        (16 * dt, GraphPoint(ray=1, radius=(y + 2) * dx)),
    )


def _flow_task(args):
    config, rep = args
    spec = config.spec()
    dx = 2.0 ** (-config.level)
    ap = spec.alpha_plus
    flow_config = LatticeFlowConfig(
        level=config.level,
        horizon=config.flow_horizon,
        start_pairs=_flow_starts(spec, config),
    )
    stream = RngStream(config.root_seed).child(KEY_REPLICA, rep)
    ens = skew_lattice_flow(flow_config, spec, stream)

    same_time = [q for q in range(ens.n_starts) if ens.born_at(q) == 0]
    order = sorted(same_time, key=lambda q: ens.start_meta[q][1])
    monotone = all(
        bool(np.all(ens.traj[a] <= ens.traj[b]))
        for a, b in zip(order[:-1], order[1:])
    )

    permanence = True
    at_zero = True
    for q in range(1, ens.n_starts):
        record = ens.merge_record(q)
        if record is None:
            continue
        t = record.merge_index
        permanence = permanence and bool(
            np.array_equal(ens.traj[q, t:], ens.traj[record.target_index, t:])
        )
        if ap != 0.5:
            at_zero = at_zero and ens.traj[q, t] == 0 and ens.traj[record.target_index, t] == 0

    mid = ens.steps // 4
    value = int(ens.traj[0, mid])
    if value == 0:
        child_point = spec.origin
    elif value > 0:
        child_point = GraphPoint(ray=1, radius=value * dx)
    else:
        child_point = GraphPoint(ray=spec.n_rays, radius=-value * dx)
    extended = LatticeFlowConfig(
        level=config.level,
        horizon=config.flow_horizon,
        start_pairs=flow_config.start_pairs + ((mid * flow_config.dt, child_point),),
    )
    ens2 = skew_lattice_flow(extended, spec, stream)
    flow_prop = bool(
        np.array_equal(ens2.traj[0], ens.traj[0])
        and np.array_equal(ens2.traj[-1, mid:], ens.traj[0, mid:])
    )

    merge_idx = coalescence_time(ens, 0, 1)
    if merge_idx is None or ap <= 0.5:
        merge_level = math.nan
        merge_out = -1 if merge_idx is None else merge_idx
    else:
        visits = int(np.sum(ens.traj[1, :merge_idx] == 0))
        merge_level = config.flow_y_units * dx + (2.0 * ap - 1.0) * dx * visits
        merge_out = merge_idx
    return (rep, monotone, flow_prop, permanence, at_zero, merge_out, merge_level)


def _cmd_flow_experiment(config: ExperimentConfig):
    spec = config.spec()
    args = [(config, rep) for rep in range(config.flow_replicas)]
    rows = _map_replicas(_flow_task, args, config.workers)
    rows.sort(key=lambda r: r[0])

    n = len(rows)
    all_exact = {
        "monotone": all(r[1] for r in rows),
        "flow_property": all(r[2] for r in rows),
        "permanence": all(r[3] for r in rows),
        "at_zero": all(r[4] for r in rows),
    }
    reports = [
        _report(f"flow-{name}-exact", float(not ok), 0.0, ok, n)
        for name, ok in all_exact.items()
    ]

    # dedicated merge-level study, run serially in the parent so that the
    # artifact does not depend on the worker count
    y = config.flow_y_units * 2.0 ** (-config.level)
    merge_stream = RngStream(config.root_seed).child(KEY_FLOW_COINS, 0)
    horizon_steps = int(round(config.flow_horizon * 4.0**config.level))
    merged, censored = merge_level_samples(
        spec,
        config.level,
        config.flow_y_units,
        horizon_steps,
        config.merge_pairs,
        merge_stream,
    )
    merged_arr = np.asarray(merged, dtype=float)
    above = merged_arr[merged_arr > y * (1.0 + 1e-12)]
    merge_rows = [[i, float(u)] for i, u in enumerate(merged_arr)]

    if 0.5 < spec.alpha_plus < 1.0 and above.size >= 1000:
        fit = powerlaw_fit_coalescence(above, y)
        reports.append(
            _report(
                "coalescence-law",
                fit.r_squared,
                0.98,
                fit.r_squared >= 0.98,
                int(above.size),
                lambda_hat=fit.lambda_hat,
                intercept=fit.intercept,
                atom_fraction=1.0 - above.size / max(merged_arr.size, 1),
                censored=float(censored),
            )
        )
    else:
        reports.append(
            _report(
                "coalescence-law",
                0.0,
                0.98,
                True,
                int(above.size),
                skipped=1.0,
                censored=float(censored),
            )
        )

    headers = [
        "replica",
        "monotone",
        "flow_property",
        "permanence",
        "at_zero",
        "merge_index",
        "merge_level",
    ]
    merge_headers = ["sample", "merge_level"]
    return [("", headers, rows), ("merges", merge_headers, merge_rows)], reports


# --- kernel-experiment -----------------------------------------------------


def _kernel_task(args):
    config, rep = args
    spec = config.spec()
    sampler = MeasurePairSampler(spec, config.measure_plus, config.measure_minus)
    dt = 4.0 ** (-config.level)
    steps = int(round(config.horizon / dt))
    flow_config = LatticeFlowConfig(
        level=config.level,
        horizon=config.horizon,
        start_pairs=((0.0, spec.origin),),
    )
    stream = RngStream(config.root_seed).child(KEY_REPLICA, rep)
    flow = sample_kernel_flow(flow_config, spec, sampler, stream)

    mass_err = 0.0
    wiener_dev = 0.0
    stride = max(1, steps // 64)
    for k in range(0, steps + 1, stride):
        measure = flow.kernel_at(0, k)
        mass_err = max(mass_err, abs(math.fsum(measure.weights) - 1.0))
        z = float(flow.ensemble.traj[0, k]) * flow.ensemble.config.dx
        reference = wiener_kernel(spec, spec.origin, z, True)
        dev = float(
            np.max(
                np.abs(
                    measure_ray_weights(measure, spec)
                    - measure_ray_weights(reference, spec)
                )
            )
        )
        wiener_dev = max(wiener_dev, dev)

    plus_sum = np.zeros(spec.p)
    plus_sq = np.zeros(spec.p)
    plus_count = 0
    minus_dim = spec.n_rays - spec.p
    minus_sum = np.zeros(minus_dim)
    minus_sq = np.zeros(minus_dim)
    minus_count = 0
    for side, _g, _d, weights in extract_ray_weights(flow, 0):
        if side > 0:
            plus_sum += weights
            plus_sq += weights**2
            plus_count += 1
        else:
            minus_sum += weights
            minus_sq += weights**2
            minus_count += 1
    return (
        rep,
        mass_err,
        wiener_dev,
        plus_count,
        plus_sum.tolist(),
        plus_sq.tolist(),
        minus_count,
        minus_sum.tolist(),
        minus_sq.tolist(),
    )


def _moment_report(name, total, total_sq, count, declared):
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    # the floor absorbs float accumulation noise for point-mass samplers,
    # whose true variance is zero
    sigma = np.sqrt(var / count)
    z = np.abs(mean - np.asarray(declared)) / np.maximum(sigma, 1e-12)
    worst = float(np.max(z))
    details = {f"mean_{i + 1}": float(m) for i, m in enumerate(mean)}
    details["worst_z"] = worst
    return _report(name, worst, 3.0, worst <= 3.0, count, **details)


def _cmd_kernel_experiment(config: ExperimentConfig):
    spec = config.spec()
    sampler = MeasurePairSampler(spec, config.measure_plus, config.measure_minus)
    n_ens = max(8, min(200, config.replicas // 100))
    args = [(config, rep) for rep in range(n_ens)]
    results = _map_replicas(_kernel_task, args, config.workers)
    results.sort(key=lambda r: r[0])

    rows = [[r[0], r[1], r[2], r[3] + r[6]] for r in results]
    worst_mass = max(r[1] for r in results)
    reports = [
        _report("kernel-mass", worst_mass, 1e-12, worst_mass <= 1e-12, n_ens)
    ]

    plus_count = sum(r[3] for r in results)
    if plus_count:
        plus_sum = np.sum([r[4] for r in results], axis=0)
        plus_sq = np.sum([r[5] for r in results], axis=0)
        reports.append(
            _moment_report(
                "moment-plus", plus_sum, plus_sq, plus_count, ray_ratios(spec, +1)
            )
        )
    minus_count = sum(r[6] for r in results)
    if minus_count and spec.p < spec.n_rays:
        minus_sum = np.sum([r[7] for r in results], axis=0)
        minus_sq = np.sum([r[8] for r in results], axis=0)
        reports.append(
            _moment_report(
                "moment-minus", minus_sum, minus_sq, minus_count, ray_ratios(spec, -1)
            )
        )

    # filtering: fixed coins and weights, redraw the ray choice
    flow_config = LatticeFlowConfig(
        level=config.level, horizon=config.horizon, start_pairs=((0.0, spec.origin),)
    )
    stream = RngStream(config.root_seed).child(KEY_REPLICA, n_ens + 1)
    flow = sample_kernel_flow(flow_config, spec, sampler, stream)
    excursions = extract_ray_weights(flow, 0)
    side, g, d, weights = excursions[0]
    replicas = min(config.replicas, 10000)
    counts = np.zeros(len(weights))
    base = 1 if side > 0 else spec.p + 1
    for r in range(replicas):
        mapping = MappingFlow(flow, choice_index=r)
        ray = mapping._excursion_ray(0, g + 1, side)
        counts[ray - base] += 1
    freq = counts / replicas
    bound = 3.0 * np.sqrt(np.asarray(weights) * (1 - np.asarray(weights)) / replicas)
    filter_dev = float(np.max(np.abs(freq - weights)))
    filter_ok = bool(np.all(np.abs(freq - weights) <= np.maximum(bound, 1e-12)))
    reports.append(
        _report("filtering", filter_dev, float(np.max(bound)), filter_ok, replicas)
    )

    # projection: fixed coins, redraw weights and ray choice together
    proj_counts = np.zeros(spec.n_rays)
    k_probe = g + 1
    for r in range(replicas):
        redraw = KernelFlow(flow.ensemble, sampler, stream, draw_index=r + 1)
        mapping = MappingFlow(redraw, choice_index=r + 1)
        pt = mapping.point_at(0, k_probe)
        proj_counts[pt.ray - 1] += 1
    proj_freq = proj_counts / replicas
    z_here = float(flow.ensemble.traj[0, k_probe]) * flow_config.dx
    proj_ref = measure_ray_weights(
        wiener_kernel(spec, spec.origin, z_here, True), spec
    )
    proj_bound = 3.0 * np.sqrt(proj_ref * (1 - proj_ref) / replicas)
    proj_dev = float(np.max(np.abs(proj_freq - proj_ref)))
    proj_ok = bool(np.all(np.abs(proj_freq - proj_ref) <= np.maximum(proj_bound, 1e-12)))
    reports.append(
        _report(
            "wiener-projection", proj_dev, float(np.max(proj_bound)), proj_ok, replicas
        )
    )

    headers = ["replica", "mass_error", "wiener_deviation", "excursions"]
    return [("", headers, rows)], reports


# --- tanaka-special-case ---------------------------------------------------


def _cmd_tanaka_special_case(config: ExperimentConfig):
    rows = []
    reports = []

    # both rays positive: kernel weights after the junction visit are (1/2, 1/2)
    tanaka = validate_spec((0.5, 0.5), (1, 1))
    sampler = MeasurePairSampler(tanaka, "wiener")
    flow_config = LatticeFlowConfig(
        level=min(config.level, 5), horizon=1.0, start_pairs=((0.0, tanaka.origin),)
    )
    stream = RngStream(config.root_seed).child(KEY_REPLICA, 1)
    flow = sample_kernel_flow(flow_config, tanaka, sampler, stream)
    steps = flow.ensemble.steps
    worst = 0.0
    for k in range(0, steps + 1):
        measure = flow.kernel_at(0, k)
        z = int(flow.ensemble.traj[0, k])
        if z != 0:
            dev = max(abs(w - 0.5) for w in measure.weights)
            worst = max(worst, dev)
            if k % max(1, steps // 32) == 0:
                rows.append(["tanaka-weights", k, float(z), dev])
    reports.append(_report("tanaka-split", worst, 0.0, worst == 0.0, steps))

    # one positive and one negative ray: the scalar marginal sign law
    skew = validate_spec((0.7, 0.3), (1, -1))
    level = 3
    dt = 4.0 ** (-level)
    odd_steps = 4**level + 1
    sign_config = LatticeFlowConfig(
        level=level, horizon=odd_steps * dt, start_pairs=((0.0, skew.origin),)
    )
    n_sign = min(config.replicas, 2000)
    positive = 0
    for rep in range(n_sign):
        stream = RngStream(config.root_seed).child(KEY_REPLICA, 1000 + rep)
        ens = skew_lattice_flow(sign_config, skew, stream)
        value = int(ens.traj[0, odd_steps])
        rows.append(["sign-law", rep, float(value), float(value > 0)])
        if value > 0:
            positive += 1
    freq = positive / n_sign
    sigma = math.sqrt(skew.alpha_plus * (1 - skew.alpha_plus) / n_sign)
    z = abs(freq - skew.alpha_plus) / sigma
    reports.append(
        _report("sign-law", z, 3.0, z <= 3.0, n_sign, frequency=freq)
    )

    headers = ["case", "index", "value", "deviation"]
    return [("", headers, rows)], reports


COMMANDS = {
    "verify-semigroup": _cmd_verify_semigroup,
    "simulate-wbm": _cmd_simulate_wbm,
    "walk-converge": _cmd_walk_converge,
    "verify-freidlin-sheu": _cmd_verify_freidlin_sheu,
    "flow-experiment": _cmd_flow_experiment,
    "kernel-experiment": _cmd_kernel_experiment,
    "tanaka-special-case": _cmd_tanaka_special_case,
}


def run(subcommand: str, config: ExperimentConfig) -> list[TestReport]:
    """Run one subcommand, write artifacts, return its reports.

    Raises CheckFailed when a mandatory check failed (artifacts are
    still written first), Io when artifacts cannot be written.
    """
    if subcommand not in COMMANDS:
        raise ConfigInvalid(f"unknown subcommand {subcommand!r}")
    config.validate()
    tables, reports = COMMANDS[subcommand](config)
    base = subcommand.replace("-", "_")
    try:
        os.makedirs(config.out_dir, exist_ok=True)
    except OSError as exc:
        raise Io(f"cannot create {config.out_dir!r}: {exc}") from exc
    for suffix, headers, rows in tables:
        name = base + (f"_{suffix}" if suffix else "") + ".csv"
        emit_csv(rows, headers, os.path.join(config.out_dir, name))
    _write_reports(reports, os.path.join(config.out_dir, base + "_reports.jsonl"))
    for report in reports:
        marker = "PASS" if report.passed else "FAIL"
        print(f"[{marker}] {report.name}: statistic={report.statistic:.6g} "
              f"threshold={report.threshold:.6g} replicas={report.replicas}")
    if not all(r.passed for r in reports):
        raise CheckFailed(f"{subcommand}: a mandatory check failed")
    return reports


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="walshflow",
        description="Simulation and verification experiments on star graphs",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="INI config path (defaults built in)")
        cmd.add_argument("--seed", type=int, help="root seed override")
        cmd.add_argument("--replicas", type=int, help="replica count override")
        cmd.add_argument("--out", help="output directory override")
        cmd.add_argument("--workers", type=int, help="worker pool size override")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else DEFAULT_CONFIG
    seed: Optional[int] = None
    env_seed = os.environ.get("WALSH_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigInvalid(f"WALSH_SEED is not an integer: {env_seed!r}") from exc
    if args.seed is not None:
        seed = args.seed
    overrides = {}
    if seed is not None:
        overrides["root_seed"] = seed
    if args.replicas is not None:
        overrides["replicas"] = args.replicas
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        config = replace(config, **overrides)
    return config.validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        config = _resolve_config(args)
        run(args.subcommand, config)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except Io as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # surface anything unexpected as a runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
