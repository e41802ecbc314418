"""
Experiments that set simulated BBM-sausages, enlargements and Wiener sausages against their
closed-form limits.

Every experiment simulates one BBM per seed index at the largest time of its grid and reads
each grid time from it; a run on [0, t] is the restriction of the longer run, so each row is
reproducible from (root seed, experiment, t, seed index). Seeds run in parallel and rows are
sorted by (experiment, t, seed, method) before emission.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import theory
from .bbm_core import (
    BbmRun,
    BudgetExceededError,
    SimConfig,
    brownian_path,
    population_count,
    range_skeleton,
    simulate,
    support_snapshot,
)
from .geometry_volume import (
    PointCloud,
    SpatialHash,
    VolumeEstimate,
    covers_ball,
    sausage_radius_outer,
    volume_exact_1d,
    volume_mc,
    volume_voxel,
)
from .stats import derive_stream, generator, linear_fit, mean_ci, proportion_ci
from .storage import ResultRow

logger = logging.getLogger(__name__)

EXPERIMENTS = (
    "sausage_scaling",
    "enlargement_scaling",
    "d1_law",
    "wiener_sausage",
    "hitting",
    "coverage",
    "trap_survival",
    "population_growth",
)

BUDGET_METHOD = "budget-exceeded"
AGGREGATE_SEED = -1
HITTING_BATCH = 100_000
HITTING_MAX_STEP = 1e-3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    config: SimConfig
    t_grid: Tuple[float, ...]
    n_seeds: int
    estimator: str = "mc"
    samples: int = 100_000
    voxel: Optional[float] = None
    theta: float = 0.7
    lam: float = 0.1
    trap_radius: float = 0.5
    R: float = 1.0
    n_paths: Optional[int] = None
    workers: int = 1
    confidence: float = 0.95

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.name!r}")
        if self.n_seeds < 1:
            raise ConfigError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if not self.t_grid:
            raise ConfigError("t_grid is empty")
        if any(b <= a for a, b in zip(self.t_grid, self.t_grid[1:])):
            raise ConfigError(f"t_grid must be strictly increasing, got {self.t_grid}")
        if self.t_grid[0] < 0:
            raise ConfigError(f"t_grid must be nonnegative, got {self.t_grid}")
        if self.estimator not in ("mc", "voxel", "exact1d"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "exact1d" and self.config.dimension != 1:
            raise ConfigError("the exact1d estimator needs --dim 1")
        if abs(self.config.horizon - self.horizon) > 1e-12 * max(1.0, self.horizon):
            raise ConfigError(
                f"config horizon {self.config.horizon} must equal {self.horizon} for {self.name}"
            )

    @property
    def horizon(self) -> float:
        """Simulated time span: the unit hitting window, otherwise the last grid time."""
        return 1.0 if self.name == "hitting" else float(self.t_grid[-1])

    @property
    def paths(self) -> int:
        return self.n_paths if self.n_paths is not None else self.n_seeds

    def seed_for(self, index: int, *labels) -> int:
        return derive_stream(self.config.seed, self.name, index, *labels)

    def labels(self) -> dict:
        """Stream labels recorded in the run manifest."""
        return {
            "bbm": [self.name, "<seed index>", "bbm-root"],
            "volume": [self.name, "<seed index>", "<t>", "<method>", "volume-mc", "<chunk>"],
            "paths": [self.name, "<path index>"],
            "hitting": [self.name, "hitting", "<t>", "<batch>"],
        }


def _require_positive_times(spec: ExperimentSpec):
    if spec.t_grid[0] <= 0:
        raise ConfigError(f"{spec.name} divides by t^d; t_grid must be > 0, got {spec.t_grid}")


def _estimate(
    spec: ExperimentSpec, cloud: PointCloud, radius: float, seed: int
) -> VolumeEstimate:
    if spec.estimator == "exact1d":
        return volume_exact_1d(cloud, radius)
    if spec.estimator == "voxel":
        return volume_voxel(cloud, radius, spec.voxel or radius / 4.0)
    return volume_mc(cloud, radius, spec.samples, seed)


def _per_seed(
    spec: ExperimentSpec, measure: Callable[[int, BbmRun], List[ResultRow]]
) -> List[ResultRow]:
    """Simulate one BBM per seed index and collect the rows `measure` makes from it."""

    def one(index: int) -> List[ResultRow]:
        config = replace(spec.config, seed=spec.seed_for(index))
        try:
            return measure(index, simulate(config))
        except BudgetExceededError as e:
            logger.warning(f"{spec.name} seed {index}: {e}")
            return [
                ResultRow(spec.name, float(t), index, BUDGET_METHOD) for t in spec.t_grid
            ]

    with ThreadPoolExecutor(max_workers=max(1, spec.workers)) as executor:
        batches = list(executor.map(one, range(spec.n_seeds)))
    rows = [row for batch in batches for row in batch]
    logger.info(f"{spec.name}: {len(rows)} rows from {spec.n_seeds} seeds")
    return rows


def _aggregate(
    spec: ExperimentSpec, rows: List[ResultRow], methods: Sequence[str], suffix: str = "-mean"
) -> List[ResultRow]:
    """Seed-averaged rows (seed = -1) with the standard error of the mean."""
    out = []
    for method in methods:
        for t in spec.t_grid:
            group = [r for r in rows if r.method == method and r.t == float(t)]
            values = [r.value for r in group if r.value is not None]
            if not values:
                continue
            theory_value = group[0].theory
            if len(values) == 1:
                out.append(
                    ResultRow.measured(
                        spec.name, float(t), AGGREGATE_SEED, method + suffix,
                        values[0], None, theory_value,
                    )
                )
                continue
            ci = mean_ci(values, spec.confidence)
            out.append(
                ResultRow.measured(
                    spec.name, float(t), AGGREGATE_SEED, method + suffix,
                    ci.mean, ci.std_error, theory_value,
                )
            )
    return out


def _finish(rows: List[ResultRow]) -> List[ResultRow]:
    return sorted(rows, key=ResultRow.sort_key)


def run_sausage_scaling(spec: ExperimentSpec) -> List[ResultRow]:
    """vol(sausage with radius r_t)/t^d against the almost-sure limit, inner and outer radius."""
    _require_positive_times(spec)
    cfg = spec.config
    d = cfg.dimension
    limit = theory.limit_sausage(d, cfg.beta, cfg.k).value

    def measure(index: int, run: BbmRun) -> List[ResultRow]:
        rows = []
        for t in spec.t_grid:
            cloud = range_skeleton(run, 0.0, t)
            scale = float(t) ** d
            radii = {
                "inner": cfg.radius(t),
                "outer": sausage_radius_outer(cfg.radius(t), d, cfg.dt),
            }
            for method, radius in radii.items():
                est = _estimate(spec, cloud, radius, spec.seed_for(index, repr(float(t)), method))
                rows.append(
                    ResultRow.measured(
                        spec.name, float(t), index, method,
                        est.value / scale, est.std_error / scale, limit,
                    )
                )
        return rows

    rows = _per_seed(spec, measure)
    return _finish(rows + _aggregate(spec, rows, ("inner", "outer")))


def run_enlargement_scaling(spec: ExperimentSpec) -> List[ResultRow]:
    """vol(r_t-enlargement of the time-t support)/t^d, next to the sausage of the same run."""
    _require_positive_times(spec)
    cfg = spec.config
    d = cfg.dimension
    limit = theory.limit_enlargement(d, cfg.beta, cfg.k).value
    sausage_limit = theory.limit_sausage(d, cfg.beta, cfg.k).value

    def measure(index: int, run: BbmRun) -> List[ResultRow]:
        rows = []
        for t in spec.t_grid:
            scale = float(t) ** d
            radius = cfg.radius(t)
            clouds = {
                "enlargement": (support_snapshot(run, t), limit),
                "sausage": (range_skeleton(run, 0.0, t), sausage_limit),
            }
            for method, (cloud, reference) in clouds.items():
                est = _estimate(spec, cloud, radius, spec.seed_for(index, repr(float(t)), method))
                rows.append(
                    ResultRow.measured(
                        spec.name, float(t), index, method,
                        est.value / scale, est.std_error / scale, reference,
                    )
                )
        return rows

    rows = _per_seed(spec, measure)
    return _finish(rows + _aggregate(spec, rows, ("enlargement", "sausage")))


def run_d1_law(spec: ExperimentSpec) -> List[ResultRow]:
    """Exact one-dimensional sausage and enlargement lengths against 2*sqrt(2*beta) laws."""
    _require_positive_times(spec)
    cfg = spec.config
    if cfg.dimension != 1:
        raise ConfigError(f"d1_law needs --dim 1, got {cfg.dimension}")
    sausage_limit = theory.limit_sausage(1, cfg.beta, cfg.k).value
    enlargement_limit = theory.limit_enlargement(1, cfg.beta, cfg.k).value

    def measure(index: int, run: BbmRun) -> List[ResultRow]:
        rows = []
        for t in spec.t_grid:
            radius = cfg.radius(t)
            skeleton = range_skeleton(run, 0.0, t)
            sausage = volume_exact_1d(skeleton, radius).value
            span = 2.0 * radius + float(skeleton.hi[0] - skeleton.lo[0])
            enlargement = volume_exact_1d(support_snapshot(run, t), radius).value
            t = float(t)
            rows += [
                ResultRow.measured(spec.name, t, index, "sausage", sausage / t, 0.0, sausage_limit),
                ResultRow.measured(spec.name, t, index, "span", span / t, 0.0, sausage_limit),
                ResultRow.measured(
                    spec.name, t, index, "enlargement", enlargement / t, 0.0, enlargement_limit
                ),
            ]
        return rows

    rows = _per_seed(spec, measure)
    return _finish(rows + _aggregate(spec, rows, ("sausage", "span", "enlargement")))


def run_wiener_sausage(spec: ExperimentSpec) -> List[ResultRow]:
    """
    Single-path sausages. With k = 0 the radius is the fixed r0 and the reference is the
    fixed-radius expectation (plus a slope fit against the Newtonian capacity in d >= 3);
    with k > 0 the radius at time t is r0*exp(-beta*k*t).
    """
    _require_positive_times(spec)
    cfg = spec.config
    d = cfg.dimension
    shrinking = cfg.k > 0
    grid = cfg.grid_times()
    if grid.size > cfg.max_points:
        raise BudgetExceededError(grid.size, cfg.max_points, "points per Brownian path")

    def reference(t: float) -> Optional[float]:
        try:
            if shrinking:
                return theory.expected_shrinking_sausage(d, cfg.beta, cfg.k, cfg.r0, t).value
            return theory.expected_wiener_sausage(d, cfg.r0, t).value
        except ValueError:
            return None

    def one(index: int) -> List[ResultRow]:
        positions = brownian_path(
            grid, generator(cfg.seed, spec.name, index), np.zeros(d)
        )
        rows = []
        for t in spec.t_grid:
            t = cfg.snap(t)
            cloud = PointCloud.from_points(positions[grid <= t], d)
            radius = cfg.radius(t) if shrinking else cfg.r0
            est = _estimate(spec, cloud, radius, spec.seed_for(index, repr(float(t))))
            rows.append(
                ResultRow.measured(
                    spec.name, float(t), index, "sausage", est.value, est.std_error, reference(t)
                )
            )
        return rows

    with ThreadPoolExecutor(max_workers=max(1, spec.workers)) as executor:
        rows = [row for batch in executor.map(one, range(spec.paths)) for row in batch]
    aggregates = _aggregate(spec, rows, ("sausage",))
    if d >= 3 and not shrinking and len(spec.t_grid) >= 2:
        means = sorted((r.t, r.value) for r in aggregates)
        fit = linear_fit([t for t, _ in means], [v for _, v in means])
        aggregates.append(
            ResultRow.measured(
                spec.name, float(spec.t_grid[-1]), AGGREGATE_SEED, "slope",
                fit.slope, fit.slope_stderr, theory.newtonian_capacity(d, cfg.r0).value,
            )
        )
    logger.info(f"{spec.name}: {len(rows)} rows from {spec.paths} paths")
    return _finish(rows + aggregates)


def closest_approach(
    rng: np.random.Generator,
    n: int,
    d: int,
    R: float,
    radius: float,
    dt_min: float,
    dt_max: float,
    eta: float,
    horizon: float = 1.0,
) -> np.ndarray:
    """
    Minimum sampled |X(s)| over [0, horizon] for n Brownian paths started at (R, 0, ...).

    Steps adapt to the distance from the ball B(0, radius): the RMS step stays below eta
    times that distance and never below the fine step sqrt(d*dt_min). Paths stop once they
    enter the ball.
    """
    x = np.zeros((n, d))
    x[:, 0] = R
    clock = np.zeros(n)
    closest = np.full(n, float(R))
    active = np.arange(n)
    while active.size:
        xa = x[active]
        gap = np.linalg.norm(xa, axis=1) - radius
        h = np.clip((eta * gap) ** 2 / d, dt_min, dt_max)
        h = np.minimum(h, horizon - clock[active])
        xa = xa + np.sqrt(h)[:, None] * rng.standard_normal((active.size, d))
        x[active] = xa
        clock[active] += h
        norms = np.linalg.norm(xa, axis=1)
        closest[active] = np.minimum(closest[active], norms)
        done = (clock[active] >= horizon) | (norms <= radius)
        active = active[~done]
    return closest


def run_hitting(spec: ExperimentSpec) -> List[ResultRow]:
    """Hit proportions of the shrinking ball from distance R over the unit time window."""
    _require_positive_times(spec)
    cfg = spec.config
    d = cfg.dimension
    if d < 2:
        raise ConfigError("hitting needs d >= 2")
    rows = []
    for t in spec.t_grid:
        t = float(t)
        radius = cfg.radius(t)
        if radius >= spec.R:
            raise ConfigError(f"r_t={radius:.4g} must be below R={spec.R} at t={t}")
        reference = theory.hitting_prob_shrinking(d, spec.R, cfg.r0, cfg.beta, cfg.k, t).value
        dt_min = (cfg.eta * radius) ** 2 / d
        dt_max = max(HITTING_MAX_STEP, dt_min)
        outer = sausage_radius_outer(radius, d, dt_min)
        sizes = [
            min(HITTING_BATCH, spec.paths - start) for start in range(0, spec.paths, HITTING_BATCH)
        ]

        def batch(item) -> np.ndarray:
            index, size = item
            rng = generator(cfg.seed, spec.name, "hitting", repr(t), index)
            return closest_approach(
                rng, size, d, spec.R, radius, dt_min, dt_max, cfg.eta, cfg.horizon
            )

        with ThreadPoolExecutor(max_workers=max(1, spec.workers)) as executor:
            closest = np.concatenate(list(executor.map(batch, enumerate(sizes))))
        for method, bound in (("inner", radius), ("outer", outer)):
            hits = int((closest <= bound).sum())
            ci = proportion_ci(hits, closest.size, spec.confidence)
            rows.append(
                ResultRow.measured(
                    spec.name, t, AGGREGATE_SEED, method, ci.mean, ci.std_error, reference
                )
            )
        logger.info(f"{spec.name} t={t}: {closest.size} paths, r_t={radius:.4g}")
    return _finish(rows)


def run_coverage(spec: ExperimentSpec) -> List[ResultRow]:
    """
    Miss fractions of B(0, theta*sqrt(2*beta)*t) for the sausage and the enlargement. The
    sausage is also checked at its outer radius, which bounds the continuous-path sausage
    from above where the inner radius bounds it from below.
    """
    cfg = spec.config
    d = cfg.dimension
    origin = np.zeros(d)

    def measure(index: int, run: BbmRun) -> List[ResultRow]:
        rows = []
        for t in spec.t_grid:
            t = float(t)
            rho = theory.subcritical_radius(cfg.beta, spec.theta, t)
            radius = cfg.radius(t)
            skeleton = range_skeleton(run, 0.0, t)
            # Both sausage radii are checked against the same random points.
            checks = (
                ("sausage", "sausage", skeleton, radius),
                ("sausage-outer", "sausage", skeleton, sausage_radius_outer(radius, d, cfg.dt)),
                ("enlargement", "enlargement", support_snapshot(run, t), radius),
            )
            for method, stream, cloud, r in checks:
                if rho == 0:
                    covered, missed = True, 0.0
                else:
                    covered, missed = covers_ball(
                        cloud, r, origin, rho, spec.samples,
                        spec.seed_for(index, repr(t), stream),
                    )
                rows.append(ResultRow.measured(spec.name, t, index, f"{method}-miss", missed))
                rows.append(
                    ResultRow.measured(
                        spec.name, t, index, f"{method}-covered", 1.0 if covered else 0.0
                    )
                )
        return rows

    rows = _per_seed(spec, measure)
    methods = [
        f"{cloud}-{what}"
        for what in ("miss", "covered")
        for cloud in ("sausage", "sausage-outer", "enlargement")
    ]
    return _finish(rows + _aggregate(spec, rows, methods))


def poisson_traps(
    rng: np.random.Generator, lam: float, lo: np.ndarray, hi: np.ndarray
) -> np.ndarray:
    """Poisson point process of intensity lam restricted to the box [lo, hi]."""
    volume = float(np.prod(hi - lo))
    count = rng.poisson(lam * volume) if lam > 0 and volume > 0 else 0
    return lo + (hi - lo) * rng.random((count, lo.size))


def run_trap_survival(
    spec: ExperimentSpec, lam: Optional[float] = None, trap_radius: Optional[float] = None
) -> List[ResultRow]:
    """
    Survival among Poissonian traps two ways: the Laplace functional exp(-lam*vol(sausage))
    averaged over runs, and a sampled trap field that kills a run when any skeleton point is
    within trap_radius of a trap. One trap field per seed serves every grid time.
    """
    lam = spec.lam if lam is None else lam
    trap_radius = spec.trap_radius if trap_radius is None else trap_radius
    if lam < 0 or not trap_radius > 0:
        raise ConfigError(f"need lam >= 0 and trap radius > 0, got {lam}, {trap_radius}")

    def measure(index: int, run: BbmRun) -> List[ResultRow]:
        whole = range_skeleton(run, 0.0, spec.config.horizon)
        lo, hi = whole.inflated_box(trap_radius)
        traps = poisson_traps(generator(spec.seed_for(index), "traps"), lam, lo, hi)
        rows = []
        for t in spec.t_grid:
            t = float(t)
            cloud = range_skeleton(run, 0.0, t)
            est = volume_mc(cloud, trap_radius, spec.samples, spec.seed_for(index, repr(t)))
            survival = math.exp(-lam * est.value)
            killed = traps.shape[0] > 0 and bool(
                SpatialHash(cloud, trap_radius).contains(traps).any()
            )
            rows.append(
                ResultRow.measured(
                    spec.name, t, index, "fubini", survival, lam * survival * est.std_error
                )
            )
            rows.append(ResultRow.measured(spec.name, t, index, "direct", 0.0 if killed else 1.0))
        return rows

    rows = _per_seed(spec, measure)
    aggregates = _aggregate(spec, rows, ("fubini",))
    for t in spec.t_grid:
        outcomes = [r.value for r in rows if r.method == "direct" and r.t == float(t)]
        if outcomes:
            ci = proportion_ci(int(sum(outcomes)), len(outcomes), spec.confidence)
            aggregates.append(
                ResultRow.measured(
                    spec.name, float(t), AGGREGATE_SEED, "direct-mean", ci.mean, ci.std_error
                )
            )
    return _finish(rows + aggregates)


def run_population_growth(spec: ExperimentSpec) -> List[ResultRow]:
    """N_t against e^{beta t}, with the slope of log mean N_t against beta."""
    cfg = spec.config

    def measure(index: int, run: BbmRun) -> List[ResultRow]:
        return [
            ResultRow.measured(
                spec.name, float(t), index, "population",
                float(population_count(run, t)), None,
                theory.expected_population(cfg.beta, t),
            )
            for t in spec.t_grid
        ]

    rows = _per_seed(spec, measure)
    aggregates = _aggregate(spec, rows, ("population",))
    points = [(r.t, r.value) for r in aggregates if r.t > 0 and r.value and r.value > 0]
    if len(points) >= 2:
        fit = linear_fit([t for t, _ in points], [math.log(v) for _, v in points])
        aggregates.append(
            ResultRow.measured(
                spec.name, float(spec.t_grid[-1]), AGGREGATE_SEED, "log-slope",
                fit.slope, fit.slope_stderr, cfg.beta,
            )
        )
    return _finish(rows + aggregates)


RUNNERS = {
    "sausage_scaling": run_sausage_scaling,
    "enlargement_scaling": run_enlargement_scaling,
    "d1_law": run_d1_law,
    "wiener_sausage": run_wiener_sausage,
    "hitting": run_hitting,
    "coverage": run_coverage,
    "trap_survival": run_trap_survival,
    "population_growth": run_population_growth,
}


def run_experiment(spec: ExperimentSpec) -> List[ResultRow]:
    return RUNNERS[spec.name](spec)


def theory_rows(
    config: SimConfig, t_grid: Sequence[float], theta: float = 0.7
) -> List[ResultRow]:
    """Closed-form reference values for the configured (d, beta, k, r0) and coverage theta."""
    d, beta, k, r0 = config.dimension, config.beta, config.k, config.r0
    name = "theory"
    rows = [
        ResultRow(name, 0.0, AGGREGATE_SEED, "limit_sausage",
                  theory.limit_sausage(d, beta, k).value),
        ResultRow(name, 0.0, AGGREGATE_SEED, "limit_enlargement",
                  theory.limit_enlargement(d, beta, k).value),
        ResultRow(name, 0.0, AGGREGATE_SEED, "bbm_speed", theory.bbm_speed(beta)),
        ResultRow(name, 0.0, AGGREGATE_SEED, "unit_ball_volume", theory.unit_ball_volume(d)),
        ResultRow(name, 0.0, AGGREGATE_SEED, "coverage_k_threshold",
                  theory.coverage_k_threshold(d, theta)),
    ]
    if d >= 3:
        rows.append(
            ResultRow(name, 0.0, AGGREGATE_SEED, "newtonian_capacity",
                      theory.newtonian_capacity(d, r0).value)
        )
    for t in t_grid:
        t = float(t)
        rows.append(
            ResultRow(name, t, AGGREGATE_SEED, "expected_population",
                      theory.expected_population(beta, t))
        )
        rows.append(
            ResultRow(name, t, AGGREGATE_SEED, "population_sd", theory.population_sd(beta, t))
        )
        if t > 0:
            rows.append(
                ResultRow(name, t, AGGREGATE_SEED, "bramson_centring",
                          theory.bramson_centring(beta, t))
            )
        if t > 0 and k > 0:
            rows.append(
                ResultRow(name, t, AGGREGATE_SEED, "expected_shrinking_sausage",
                          theory.expected_shrinking_sausage(d, beta, k, r0, t).value)
            )
    return sorted(rows, key=ResultRow.sort_key)
