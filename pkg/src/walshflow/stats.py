"""Statistical verification: reports, test statistics, reference fits.

Small, composable pieces: a serializable report record, the classical
one-sample statistics used by the verification commands, a power-law
fit for coalescence levels, and the composite marginal-vs-semigroup
battery that compares sampled laws against quadrature references.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special
from scipy import stats as scipy_stats

from walshflow.graph import GraphSpec, PiecewiseFunction, RayFunction, vector_eval
from walshflow.semigroup import DEFAULT_QUADRATURE, QuadratureConfig, wbm_semigroup_apply

__all__ = [
    "EmptySample",
    "ZeroExpected",
    "InsufficientSamples",
    "TestReport",
    "empirical_cdf",
    "ks_statistic",
    "chi_square_rays",
    "PowerLawFit",
    "powerlaw_fit_coalescence",
    "folded_gaussian_cdf",
    "default_marginal_functions",
    "marginal_vs_semigroup",
]


class EmptySample(ValueError):
    """A statistic was requested on an empty sample."""


class ZeroExpected(ValueError):
    """A chi-square cell has zero expected count; drop impossible cells."""


class InsufficientSamples(ValueError):
    """Too few samples for a stable fit."""


@dataclass(frozen=True)
class TestReport:
    """One verification outcome, serializable as a single JSON line."""

    __test__ = False  # keep pytest from collecting this despite the name

    name: str
    statistic: float
    threshold: float
    passed: bool
    replicas: int
    p_value: Optional[float] = None
    details: dict[str, float] = field(default_factory=dict)

    def to_json_line(self) -> str:
        payload = {
            "name": self.name,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "passed": self.passed,
            "replicas": self.replicas,
            "p_value": self.p_value,
            "details": self.details,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "TestReport":
        raw = json.loads(line)
        return cls(
            name=raw["name"],
            statistic=raw["statistic"],
            threshold=raw["threshold"],
            passed=raw["passed"],
            replicas=raw["replicas"],
            p_value=raw.get("p_value"),
            details={k: float(v) for k, v in raw.get("details", {}).items()},
        )


def empirical_cdf(samples: Sequence[float], x) -> float | np.ndarray:
    """Fraction of samples at or below x (x may be an array)."""
    arr = np.sort(np.asarray(samples, dtype=float))
    if arr.size == 0:
        raise EmptySample("empirical cdf of an empty sample")
    out = np.searchsorted(arr, x, side="right") / arr.size
    return float(out) if np.isscalar(x) else out


def ks_statistic(samples: Sequence[float], cdf: Callable[[np.ndarray], np.ndarray]) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov statistic against a continuous cdf.

    Returns (D, p); the p-value uses the Stephens small-sample correction
    of the asymptotic Kolmogorov law, accurate at the tails for n >~ 50.
    """
    arr = np.sort(np.asarray(samples, dtype=float))
    n = arr.size
    if n == 0:
        raise EmptySample("KS statistic of an empty sample")
    f = np.asarray(cdf(arr), dtype=float)
    grid = np.arange(1, n + 1) / n
    d_plus = float(np.max(grid - f))
    d_minus = float(np.max(f - (np.arange(n) / n)))
    d = max(d_plus, d_minus)
    root = math.sqrt(n)
    p = float(special.kolmogorov((root + 0.12 + 0.11 / root) * d))
    return d, min(max(p, 0.0), 1.0)


def chi_square_rays(counts: Sequence[float], probs: Sequence[float]) -> tuple[float, float]:
    """Pearson chi-square of observed ray counts against a ray law.

    Cells with zero expected mass are a caller error (drop rays the law
    cannot reach before calling); ZeroExpected is raised for them.
    """
    obs = np.asarray(counts, dtype=float)
    p = np.asarray(probs, dtype=float)
    if obs.shape != p.shape or obs.ndim != 1 or obs.size < 2:
        raise ValueError("need matching 1-d counts and probabilities, at least 2 cells")
    if np.any(obs < 0):
        raise ValueError("counts must be nonnegative")
    total = obs.sum()
    if total == 0:
        raise EmptySample("chi-square of an empty sample")
    if np.any(p <= 0.0):
        raise ZeroExpected("a cell has zero expected count")
    expected = total * p / p.sum()
    stat = float(np.sum((obs - expected) ** 2 / expected))
    p_value = float(scipy_stats.chi2.sf(stat, obs.size - 1))
    return stat, p_value


@dataclass(frozen=True)
class PowerLawFit:
    """Fit of log F(u) = lambda * log(1 - y/u) + intercept.

    The intercept absorbs right-censoring (truncated samples rescale the
    empirical cdf by a constant), so only the shape is asserted.
    """

    lambda_hat: float
    intercept: float
    r_squared: float
    n_used: int


def powerlaw_fit_coalescence(
    levels: Sequence[float],
    y: float,
    window: tuple[float, float] = (0.1, 0.9),
    min_samples: int = 1000,
) -> PowerLawFit:
    """Fit the coalescence-level law P(level <= u) = (1 - y/u)^lambda.

    The empirical CDF is evaluated at every distinct level and regressed
    on the log-transformed shape over the interior-quantile window.
    Levels at or below y carry no information (the transform diverges)
    and the outermost quantiles are numerically unstable, so both are
    excluded from the regression.
    """
    arr = np.asarray(levels, dtype=float)
    if arr.size < min_samples:
        raise InsufficientSamples(f"{arr.size} merge levels, need {min_samples}")
    distinct, counts = np.unique(arr, return_counts=True)
    cdf = np.cumsum(counts) / arr.size
    lo, hi = window
    keep = (cdf >= lo) & (cdf <= hi) & (distinct > y * (1.0 + 1e-12))
    if np.count_nonzero(keep) < 5:
        raise InsufficientSamples("not enough distinct levels above y in the window")
    x = np.log1p(-y / distinct[keep])
    resp = np.log(cdf[keep])
    design = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, resp, rcond=None)
    fitted = design @ coef
    ss_res = float(np.sum((resp - fitted) ** 2))
    ss_tot = float(np.sum((resp - resp.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return PowerLawFit(
        lambda_hat=float(coef[0]),
        intercept=float(coef[1]),
        r_squared=r2,
        n_used=int(np.count_nonzero(keep)),
    )


def folded_gaussian_cdf(t: float) -> Callable[[np.ndarray], np.ndarray]:
    """Distribution of the radius at time t started at the junction."""
    scale = math.sqrt(t)
    return lambda r: special.erf(np.asarray(r) / (scale * math.sqrt(2.0)))


def default_marginal_functions(spec: GraphSpec) -> list[tuple[str, PiecewiseFunction]]:
    """Three bounded test functions: radial decay, a radial bump, and a
    ray-dependent profile that couples ray choice to radius."""
    radial_decay = PiecewiseFunction.radial(spec.n_rays, lambda h: math.exp(-h))
    bump = PiecewiseFunction.radial(spec.n_rays, lambda h: h * math.exp(-h))
    coeffs = [0.5 + 0.5 * i / max(spec.n_rays - 1, 1) for i in range(spec.n_rays)]
    ray_profile = PiecewiseFunction(
        components=tuple(
            RayFunction(value=(lambda h, c=c: c * h * math.exp(-h))) for c in coeffs
        )
    )
    return [("radial-decay", radial_decay), ("radial-bump", bump), ("ray-profile", ray_profile)]


def _mean_of_function(
    fn: PiecewiseFunction, rays: np.ndarray, radii: np.ndarray
) -> tuple[float, float]:
    values = np.empty_like(radii)
    for ray in np.unique(rays):
        mask = rays == ray
        values[mask] = vector_eval(fn.components[int(ray) - 1].value, radii[mask])
    return float(values.mean()), float(values.std(ddof=1))


def marginal_vs_semigroup(
    spec: GraphSpec,
    t: float,
    rays: Sequence[int],
    radii: Sequence[float],
    functions: Optional[list[tuple[str, PiecewiseFunction]]] = None,
    quad: QuadratureConfig = DEFAULT_QUADRATURE,
    ks_alpha: float = 0.01,
    chi_alpha: float = 0.01,
    z_bound: float = 3.0,
    name: str = "marginal-vs-semigroup",
) -> TestReport:
    """Composite battery: sampled time-t marginal from the junction
    against the semigroup.

    Three checks: ray occupancy conditioned on a positive radius against
    the ray weights (chi-square), the radius law against the folded
    Gaussian (KS), and sample means of test functions against the
    quadrature values (z-tests). The KS p-value is only meaningful for
    continuum samplers; lattice marginals have a discreteness floor and
    should be compared through the statistic across levels instead.
    """
    ray_arr = np.asarray(rays, dtype=int)
    rad_arr = np.asarray(radii, dtype=float)
    if ray_arr.size == 0 or ray_arr.shape != rad_arr.shape:
        raise EmptySample("need matching non-empty ray and radius samples")
    n = ray_arr.size

    details: dict[str, float] = {}
    passed = True

    away = rad_arr > 0.0
    counts = np.array([np.sum(ray_arr[away] == k) for k in range(1, spec.n_rays + 1)])
    chi_stat, chi_p = chi_square_rays(counts, np.asarray(spec.alpha))
    details["chi2_stat"] = chi_stat
    details["chi2_p"] = chi_p
    passed = passed and chi_p > chi_alpha

    ks_stat, ks_p = ks_statistic(rad_arr, folded_gaussian_cdf(t))
    details["ks_stat"] = ks_stat
    details["ks_p"] = ks_p
    passed = passed and ks_p > ks_alpha

    if functions is None:
        functions = default_marginal_functions(spec)
    for fn_name, fn in functions:
        reference = wbm_semigroup_apply(fn, spec, spec.origin, t, quad)
        mean, std = _mean_of_function(fn, ray_arr, rad_arr)
        z = (mean - reference) / (std / math.sqrt(n)) if std > 0 else math.inf
        details[f"z_{fn_name}"] = z
        passed = passed and abs(z) <= z_bound

    return TestReport(
        name=name,
        statistic=ks_stat,
        threshold=ks_alpha,
        passed=passed,
        replicas=int(n),
        p_value=ks_p,
        details=details,
    )
