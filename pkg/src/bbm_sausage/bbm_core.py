"""
Event-driven simulation of strictly dyadic branching Brownian motion.

Each particle lives for an Exp(beta) lifetime, moving as a standard Brownian motion, and
then splits into two children at its death position. Paths are stored at the birth time,
at every point of the sample grid {j*dt} the particle is alive for, and at its death (or
the horizon). Branch times are exact; they are never snapped to the grid.

Randomness is genealogical: the root's stream comes from the seed and each child's stream
from its parent's stream and its child index. A particle therefore depends only on its
ancestry, never on scheduling order or worker count, and a run on [0, t] is the exact
restriction of any run with the same seed and a longer horizon.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry_volume import PointCloud
from .stats import derive_stream, generator

logger = logging.getLogger(__name__)

RUN_FORMAT_VERSION = 1

# Relative tolerance, in units of dt, for deciding that a time is a grid time.
_GRID_TOLERANCE = 1e-9
_GRID_DECIMALS = 12


class SimConfigError(ValueError):
    pass


class OffGridError(ValueError):
    pass


class BudgetExceededError(RuntimeError):
    """A pre-flight estimate exceeds a memory budget (path points or voxels)."""

    def __init__(
        self,
        estimate: float,
        budget: int,
        what: str = "path points",
        advice: str = "shrink the horizon or raise dt",
    ):
        self.estimate = estimate
        self.budget = budget
        super().__init__(f"{what}: estimated {estimate:.4g} exceeds budget {budget}; {advice}")


@dataclass(frozen=True)
class SimConfig:
    dimension: int
    beta: float
    r0: float
    k: float
    dt: float
    horizon: float
    seed: int
    max_points: int = 5_000_000
    eta: float = 0.25

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise SimConfigError(f"dimension must be an integer >= 1, got {self.dimension}")
        if not self.beta > 0:
            raise SimConfigError(f"beta must be > 0, got {self.beta}")
        if not self.r0 > 0:
            raise SimConfigError(f"r0 must be > 0, got {self.r0}")
        if not self.k >= 0:
            raise SimConfigError(f"k must be >= 0, got {self.k}")
        if not self.dt > 0:
            raise SimConfigError(f"dt must be > 0, got {self.dt}")
        if not self.horizon >= 0:
            raise SimConfigError(f"horizon must be >= 0, got {self.horizon}")
        if not self.eta > 0:
            raise SimConfigError(f"eta must be > 0, got {self.eta}")
        if self.max_points < 1:
            raise SimConfigError(f"max_points must be >= 1, got {self.max_points}")
        if self.horizon > 0 and self.dt > self.horizon:
            raise SimConfigError(f"dt={self.dt} exceeds the horizon {self.horizon}")
        step = math.sqrt(self.dimension * self.dt)
        smallest = self.eta * self.radius(self.horizon)
        if step > smallest:
            raise SimConfigError(
                f"RMS step sqrt(d*dt)={step:.4g} exceeds eta*r(T)={smallest:.4g}; "
                f"lower dt to at most {smallest**2 / self.dimension:.4g}"
            )

    def radius(self, t: float) -> float:
        return self.r0 * math.exp(-self.beta * self.k * t)

    @property
    def outer_step(self) -> float:
        """Three RMS Brownian steps, the outer-proxy padding of the discretized sausage."""
        return 3.0 * math.sqrt(self.dimension * self.dt)

    def expected_points(self) -> float:
        """Pre-flight estimate of stored path points, int_0^T E[N_s] ds / dt."""
        if self.horizon == 0:
            return 1.0
        bt = self.beta * self.horizon
        return math.expm1(bt) / (self.beta * self.dt)

    def _grid_value(self, j):
        # Rounded so that grid times match decimal inputs such as t=10 with dt=0.01.
        return np.round(j * self.dt, _GRID_DECIMALS)

    def grid_times(self) -> np.ndarray:
        n = int(math.floor(self.horizon / self.dt * (1.0 + _GRID_TOLERANCE)))
        times = self._grid_value(np.arange(n + 1, dtype=np.float64))
        times = times[times < self.horizon - _GRID_TOLERANCE * self.dt]
        return np.append(times, self.horizon)

    def snap(self, t: float) -> float:
        """Canonical grid time for t, or OffGridError."""
        if t < -_GRID_TOLERANCE * self.dt or t > self.horizon + _GRID_TOLERANCE * self.dt:
            raise OffGridError(f"t={t} lies outside [0, {self.horizon}]")
        if abs(t - self.horizon) <= _GRID_TOLERANCE * self.dt:
            return self.horizon
        j = round(t / self.dt)
        if abs(t / self.dt - j) > _GRID_TOLERANCE:
            raise OffGridError(f"t={t} is not on the sample grid of step {self.dt}")
        return float(self._grid_value(j))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Particle:
    id: int
    parent: Optional[int]
    generation: int
    birth_time: float
    death_time: float
    censored: bool
    times: np.ndarray
    positions: np.ndarray
    children: Tuple[int, ...] = ()

    @property
    def lifetime(self) -> float:
        return self.death_time - self.birth_time

    def __eq__(self, other):
        if not isinstance(other, Particle):
            return NotImplemented
        return (
            self.id == other.id
            and self.parent == other.parent
            and self.generation == other.generation
            and self.birth_time == other.birth_time
            and self.death_time == other.death_time
            and self.censored == other.censored
            and self.children == other.children
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.positions, other.positions)
        )


@dataclass(frozen=True, eq=False)
class BbmRun:
    config: SimConfig
    particles: List[Particle] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, BbmRun):
            return NotImplemented
        return self.config == other.config and self.particles == other.particles

    @cached_property
    def _columns(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All samples flattened: (times, positions, owning particle index)."""
        d = self.config.dimension
        if not self.particles:
            return np.empty(0), np.empty((0, d)), np.empty(0, dtype=np.int64)
        times = np.concatenate([p.times for p in self.particles])
        positions = np.concatenate([p.positions for p in self.particles])
        owner = np.repeat(
            np.arange(len(self.particles), dtype=np.int64),
            [p.times.size for p in self.particles],
        )
        return times, positions, owner

    @cached_property
    def _lifespans(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        births = np.array([p.birth_time for p in self.particles])
        deaths = np.array([p.death_time for p in self.particles])
        censored = np.array([p.censored for p in self.particles], dtype=bool)
        return births, deaths, censored

    @property
    def total_points(self) -> int:
        return int(self._columns[0].size)

    @property
    def max_generation(self) -> int:
        return max((p.generation for p in self.particles), default=0)

    def alive(self, t: float) -> np.ndarray:
        """Ids alive at t: birth <= t < death, with censored particles alive at the horizon."""
        births, deaths, censored = self._lifespans
        mask = (births <= t) & ((t < deaths) | (censored & (t >= self.config.horizon)))
        return np.flatnonzero(mask)


def brownian_path(
    times: np.ndarray, rng: np.random.Generator, start: np.ndarray
) -> np.ndarray:
    """Brownian positions at `times`, started from `start` at times[0]."""
    start = np.asarray(start, dtype=np.float64)
    steps = np.sqrt(np.diff(times))[:, None] * rng.standard_normal((times.size - 1, start.size))
    path = np.empty((times.size, start.size))
    path[0] = start
    np.cumsum(steps, axis=0, out=path[1:])
    path[1:] += start
    return path


@dataclass(frozen=True)
class _Pending:
    stream: int
    parent: Optional[int]
    generation: int
    birth_time: float
    birth_position: np.ndarray


def _grow(config: SimConfig, grid: np.ndarray, pending: _Pending):
    """Lifetime and path of one particle; a pure function of its pending state."""
    rng = np.random.Generator(np.random.Philox(pending.stream))
    lifetime = rng.exponential(1.0 / config.beta)
    death = pending.birth_time + lifetime
    censored = death >= config.horizon
    end = config.horizon if censored else death
    lo = np.searchsorted(grid, pending.birth_time, side="right")
    hi = np.searchsorted(grid, end, side="left")
    times = np.concatenate(([pending.birth_time], grid[lo:hi], [end]))
    if times.size > 1 and times[-1] == times[-2]:
        times = times[:-1]
    positions = brownian_path(times, rng, pending.birth_position)
    return (config.horizon if censored else death), censored, times, positions


def simulate(config: SimConfig, workers: int = 1) -> BbmRun:
    """
    Simulate one BBM on [0, horizon].

    Particles are grown generation by generation; within a generation the work is mapped
    over `workers` threads and collected in order, so ids and output are independent of the
    worker count.
    """
    estimate = config.expected_points()
    if estimate > config.max_points:
        raise BudgetExceededError(estimate, config.max_points)

    grid = config.grid_times()
    origin = np.zeros(config.dimension)
    frontier = [_Pending(derive_stream(config.seed, "bbm-root"), None, 0, 0.0, origin)]
    particles: List[Particle] = []
    children: dict = {}
    stored = 0

    if config.horizon == 0:
        root = Particle(0, None, 0, 0.0, 0.0, True, np.zeros(1), origin[None, :].copy())
        return BbmRun(config, [root])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        generation = 0
        while frontier:
            grown = list(executor.map(lambda p: _grow(config, grid, p), frontier))
            next_frontier = []
            for pending, (death, censored, times, positions) in zip(frontier, grown):
                pid = len(particles)
                stored += times.size
                if stored > config.max_points:
                    raise BudgetExceededError(stored, config.max_points, "stored path points")
                times.setflags(write=False)
                positions.setflags(write=False)
                particles.append(
                    Particle(
                        pid, pending.parent, pending.generation, pending.birth_time,
                        death, censored, times, positions,
                    )
                )
                if pending.parent is not None:
                    children.setdefault(pending.parent, []).append(pid)
                if not censored:
                    for child in (0, 1):
                        next_frontier.append(
                            _Pending(
                                derive_stream(pending.stream, "child", child),
                                pid, pending.generation + 1, death, positions[-1],
                            )
                        )
            logger.debug(f"generation {generation}: {len(frontier)} particles, {stored} points")
            frontier = next_frontier
            generation += 1

    particles = [
        Particle(
            p.id, p.parent, p.generation, p.birth_time, p.death_time, p.censored,
            p.times, p.positions, tuple(children.get(p.id, ())),
        )
        for p in particles
    ]
    logger.info(
        f"simulated BBM d={config.dimension} beta={config.beta} T={config.horizon}: "
        f"{len(particles)} particles, {stored} points"
    )
    return BbmRun(config, particles)


def population_count(run: BbmRun, t: float) -> int:
    if not 0 <= t <= run.config.horizon:
        raise ValueError(f"t={t} outside [0, {run.config.horizon}]")
    return int(run.alive(t).size)


def range_skeleton(run: BbmRun, t1: float, t2: float) -> PointCloud:
    """All stored samples with time stamps in [t1, t2]; an inner approximation of the range."""
    if t1 > t2:
        raise ValueError(f"empty window: t1={t1} > t2={t2}")
    t1, t2 = _snap_loose(run.config, t1), _snap_loose(run.config, t2)
    times, positions, _ = run._columns
    mask = (times >= t1) & (times <= t2)
    return PointCloud.from_points(positions[mask], run.config.dimension)


def _snap_loose(config: SimConfig, t: float) -> float:
    try:
        return config.snap(t)
    except OffGridError:
        return t


def _positions_at(run: BbmRun, t: float) -> np.ndarray:
    t = run.config.snap(t)
    ids = run.alive(t)
    out = np.empty((ids.size, run.config.dimension))
    for row, pid in enumerate(ids):
        particle = run.particles[pid]
        j = np.searchsorted(particle.times, t)
        if j >= particle.times.size or particle.times[j] != t:
            raise OffGridError(f"particle {pid} has no sample at t={t}")
        out[row] = particle.positions[j]
    return out


def support_snapshot(run: BbmRun, t: float) -> PointCloud:
    """Positions of the particles alive at grid time t."""
    return PointCloud.from_points(_positions_at(run, t), run.config.dimension)


def max_displacement(run: BbmRun, t: float) -> float:
    t = run.config.snap(t)
    cloud = range_skeleton(run, 0.0, t)
    if cloud.size == 0:
        return 0.0
    return float(np.sqrt((cloud.centers**2).sum(axis=1)).max())


def mass_in_ball(run: BbmRun, t: float, center: Sequence[float], radius: float) -> int:
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    positions = _positions_at(run, t)
    offsets = positions - np.asarray(center, dtype=np.float64)
    return int(((offsets**2).sum(axis=1) <= radius * radius).sum())


def standardized_increments(run: BbmRun) -> np.ndarray:
    """Pooled coordinate increments divided by the square root of their time gaps."""
    pieces = [
        (np.diff(p.positions, axis=0) / np.sqrt(np.diff(p.times))[:, None]).ravel()
        for p in run.particles
        if p.times.size > 1
    ]
    return np.concatenate(pieces) if pieces else np.empty(0)


def save_run(run: BbmRun, path) -> Path:
    """Write a version-tagged columnar dump of a run (.npz)."""
    path = Path(path)
    particles = run.particles
    offsets = np.cumsum([0] + [p.times.size for p in particles]).astype(np.int64)
    times, positions, _ = run._columns
    np.savez_compressed(
        path,
        version=np.array(RUN_FORMAT_VERSION),
        config=np.array(json.dumps(run.config.to_dict(), sort_keys=True)),
        ids=np.array([p.id for p in particles], dtype=np.int64),
        parents=np.array([-1 if p.parent is None else p.parent for p in particles], dtype=np.int64),
        generations=np.array([p.generation for p in particles], dtype=np.int64),
        births=np.array([p.birth_time for p in particles]),
        deaths=np.array([p.death_time for p in particles]),
        censored=np.array([p.censored for p in particles], dtype=bool),
        offsets=offsets,
        times=times,
        positions=positions,
    )
    logger.info(f"saved run with {len(particles)} particles to {path}")
    return path


def load_run(path) -> BbmRun:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["version"])
        if version != RUN_FORMAT_VERSION:
            raise ValueError(f"unsupported run format version {version}")
        config = SimConfig(**json.loads(str(data["config"])))
        parents = data["parents"]
        offsets = data["offsets"]
        times, positions = data["times"], data["positions"]
        children: dict = {}
        for pid, parent in enumerate(parents):
            if parent >= 0:
                children.setdefault(int(parent), []).append(pid)
        particles = []
        for i, pid in enumerate(data["ids"]):
            lo, hi = offsets[i], offsets[i + 1]
            t, x = times[lo:hi].copy(), positions[lo:hi].copy()
            t.setflags(write=False)
            x.setflags(write=False)
            particles.append(
                Particle(
                    int(pid),
                    None if parents[i] < 0 else int(parents[i]),
                    int(data["generations"][i]),
                    float(data["births"][i]),
                    float(data["deaths"][i]),
                    bool(data["censored"][i]),
                    t,
                    x,
                    tuple(children.get(int(pid), ())),
                )
            )
    return BbmRun(config, particles)
