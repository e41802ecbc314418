"""
Lebesgue volume of a union of equal-radius closed balls centred on a point cloud.

Three estimators cross-check each other: an exact sort-and-merge in d=1, a deterministic
voxel count, and a seeded Monte Carlo estimate over the radius-inflated bounding box with
membership answered by a spatial hash.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Optional, Sequence, Tuple

import numpy as np

from .stats import generator

logger = logging.getLogger(__name__)

MC_CHUNK = 1 << 16
MIN_MC_SAMPLES = 1000
MAX_VOXELS = 50_000_000
# Bounds the (query, candidate) pairs materialised at once by the spatial hash.
_MAX_PAIRS = 1 << 22

METHODS = ("exact1d", "voxel", "mc")


@dataclass(frozen=True, eq=False)
class PointCloud:
    dimension: int
    centers: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def from_points(cls, points, dimension: Optional[int] = None) -> "PointCloud":
        centers = np.asarray(points, dtype=np.float64)
        if centers.ndim == 1:
            centers = centers.reshape(-1, 1) if dimension in (None, 1) else centers.reshape(
                -1, dimension
            )
        if dimension is None:
            dimension = centers.shape[1]
        if centers.size == 0:
            centers = np.empty((0, dimension))
        if centers.shape[1] != dimension:
            raise ValueError(f"points have dimension {centers.shape[1]}, expected {dimension}")
        if centers.shape[0]:
            lo, hi = centers.min(axis=0), centers.max(axis=0)
        else:
            lo = hi = np.zeros(dimension)
        return cls(dimension, centers, lo, hi)

    @property
    def size(self) -> int:
        return int(self.centers.shape[0])

    def inflated_box(self, radius: float) -> Tuple[np.ndarray, np.ndarray]:
        return self.lo - radius, self.hi + radius


@dataclass(frozen=True)
class VolumeEstimate:
    value: float
    std_error: float
    n_samples: int
    method: str

    def __post_init__(self):
        if self.value < 0 or self.std_error < 0:
            raise ValueError(f"negative volume estimate: {self.value} +/- {self.std_error}")
        if self.method not in METHODS:
            raise ValueError(f"unknown estimator {self.method!r}")


def sausage_radius_outer(radius: float, dimension: int, dt: float) -> float:
    """Outer proxy radius for a sausage sampled every dt: three RMS steps of padding."""
    return radius + 3.0 * math.sqrt(dimension * dt)


class SpatialHash:
    """
    Uniform grid with cell size equal to the ball radius (coarser when the cloud spans too
    many cells for an int64 key), stored in CSR form.

    A query point only inspects the 3^d cells around its own, which hold every center that
    can be within the radius.
    """

    def __init__(self, cloud: PointCloud, radius: float):
        if not radius > 0:
            raise ValueError(f"spatial hash needs a positive radius, got {radius}")
        self.cloud = cloud
        self.radius = float(radius)
        d = cloud.dimension
        self.cell_size = float(radius)
        if cloud.size:
            # Keys are int64 row-major cell indices, so each axis holds at most 2**(62//d) cells.
            extent = float((cloud.hi - cloud.lo).max()) + 2.0 * radius
            self.cell_size = max(self.cell_size, extent / (2 ** (62 // d) - 3))
        self.origin = cloud.lo - radius
        cells = self._cells(cloud.centers)
        self.shape = cells.max(axis=0) + 3 if cloud.size else np.full(d, 3, dtype=np.int64)
        keys = self._keys(cells)
        self.order = np.argsort(keys, kind="stable")
        self.keys, self.starts, counts = np.unique(
            keys[self.order], return_index=True, return_counts=True
        )
        self.counts = counts
        self.offsets = np.array(list(product((0, -1, 1), repeat=d)), dtype=np.int64)

    def _cells(self, points: np.ndarray) -> np.ndarray:
        return np.floor((points - self.origin) / self.cell_size).astype(np.int64)

    def _keys(self, cells: np.ndarray) -> np.ndarray:
        # Row-major linearisation; valid because every occupied cell lies inside `shape`.
        key = np.zeros(cells.shape[0], dtype=np.int64)
        for axis in range(cells.shape[1]):
            key = key * int(self.shape[axis]) + cells[:, axis]
        return key

    def _lookup(self, cells: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """CSR start and count for each cell (count 0 when the cell is empty or outside)."""
        inside = np.all((cells >= 0) & (cells < self.shape), axis=1)
        keys = self._keys(np.where(inside[:, None], cells, 0))
        slot = np.searchsorted(self.keys, keys)
        slot = np.minimum(slot, max(self.keys.size - 1, 0))
        found = inside & (self.keys.size > 0)
        if self.keys.size:
            found &= self.keys[slot] == keys
        starts = np.where(found, self.starts[slot] if self.keys.size else 0, 0)
        counts = np.where(found, self.counts[slot] if self.keys.size else 0, 0)
        return starts, counts

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask: min distance from each point to a center is <= radius."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, self.cloud.dimension)
        hit = np.zeros(points.shape[0], dtype=bool)
        if self.cloud.size == 0 or points.shape[0] == 0:
            return hit
        base = self._cells(points)
        r2 = self.radius * self.radius
        for offset in self.offsets:
            pending = np.flatnonzero(~hit)
            if pending.size == 0:
                break
            starts, counts = self._lookup(base[pending] + offset)
            for sl in self._pair_batches(counts):
                idx, st, ct = pending[sl], starts[sl], counts[sl]
                if ct.sum() == 0:
                    continue
                query = np.repeat(np.arange(idx.size), ct)
                first = np.repeat(st - np.cumsum(ct) + ct, ct)
                member = self.order[first + np.arange(query.size)]
                diff = points[idx[query]] - self.cloud.centers[member]
                close = np.einsum("ij,ij->i", diff, diff) <= r2
                hit[idx[np.unique(query[close])]] = True
        return hit

    @staticmethod
    def _pair_batches(counts: np.ndarray):
        total = np.cumsum(counts)
        start = 0
        while start < counts.size:
            budget = (total[start - 1] if start else 0) + _MAX_PAIRS
            stop = max(int(np.searchsorted(total, budget, side="right")), start + 1)
            yield slice(start, stop)
            start = stop


def volume_exact_1d(cloud: PointCloud, radius: float) -> VolumeEstimate:
    """Exact measure of the union of [c - r, c + r] by sort-and-merge."""
    if cloud.dimension != 1:
        raise ValueError(f"volume_exact_1d needs d=1, got d={cloud.dimension}")
    if not radius > 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if cloud.size == 0:
        return VolumeEstimate(0.0, 0.0, 0, "exact1d")
    centers = np.sort(cloud.centers[:, 0])
    gaps = np.diff(centers)
    # Each gap contributes 2r of new length, capped by the gap itself where intervals overlap.
    value = 2.0 * radius + float(np.minimum(gaps, 2.0 * radius).sum())
    return VolumeEstimate(value, 0.0, cloud.size, "exact1d")


def volume_voxel(
    cloud: PointCloud, radius: float, voxel: float, max_voxels: int = MAX_VOXELS
) -> VolumeEstimate:
    """
    Count voxels whose centers lie in the union, over the radius-inflated bounding box.

    The reported std_error is half the volume of the boundary voxels, a surface * voxel bound.
    """
    if not radius > 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if not 0 < voxel <= radius / 4.0:
        raise ValueError(f"voxel {voxel} too coarse; it must be <= radius/4 = {radius / 4.0}")
    d = cloud.dimension
    if cloud.size == 0:
        return VolumeEstimate(0.0, 0.0, 0, "voxel")
    lo, hi = cloud.inflated_box(radius)
    shape = np.ceil((hi - lo) / voxel).astype(np.int64) + 1
    n_voxels = float(np.prod(shape.astype(np.float64)))
    if n_voxels > max_voxels:
        from .bbm_core import BudgetExceededError

        raise BudgetExceededError(
            n_voxels, max_voxels, "voxels", "raise the voxel size or max_voxels"
        )

    grid = np.zeros(tuple(shape), dtype=bool)
    reach = int(math.ceil(radius / voxel)) + 1
    stencil = np.array(list(product(range(-reach, reach + 1), repeat=d)), dtype=np.int64)
    r2 = radius * radius
    batch = max(1, _MAX_PAIRS // stencil.shape[0])
    for start in range(0, cloud.size, batch):
        centers = cloud.centers[start : start + batch]
        base = np.floor((centers - lo) / voxel).astype(np.int64)
        cells = (base[:, None, :] + stencil[None, :, :]).reshape(-1, d)
        owners = np.repeat(np.arange(centers.shape[0]), stencil.shape[0])
        ok = np.all((cells >= 0) & (cells < shape), axis=1)
        cells, owners = cells[ok], owners[ok]
        diff = lo + (cells + 0.5) * voxel - centers[owners]
        inside = np.einsum("ij,ij->i", diff, diff) <= r2
        grid[tuple(cells[inside].T)] = True

    count = int(grid.sum())
    padded = np.pad(grid, 1)
    interior = grid.copy()
    for axis in range(d):
        for shift in (-1, 1):
            neighbour = np.roll(padded, shift, axis=axis)[tuple([slice(1, -1)] * d)]
            interior &= neighbour
    boundary = count - int(interior.sum())
    cell = voxel**d
    return VolumeEstimate(count * cell, 0.5 * boundary * cell, int(n_voxels), "voxel")


def _mc_chunk(hasher: SpatialHash, lo, hi, n: int, seed: int, index: int) -> int:
    rng = generator(seed, "volume-mc", index)
    points = lo + (hi - lo) * rng.random((n, lo.size))
    return int(hasher.contains(points).sum())


def volume_mc(
    cloud: PointCloud, radius: float, n_samples: int, seed: int, workers: int = 1
) -> VolumeEstimate:
    """
    Hit-fraction estimate over the radius-inflated bounding box.

    Samples are drawn in fixed chunks of MC_CHUNK, each from its own derived stream, and
    summed in chunk order, so the result does not depend on `workers`.
    """
    if n_samples < MIN_MC_SAMPLES:
        raise ValueError(f"volume_mc needs n_samples >= {MIN_MC_SAMPLES}, got {n_samples}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if cloud.size == 0 or radius == 0:
        return VolumeEstimate(0.0, 0.0, n_samples, "mc")
    lo, hi = cloud.inflated_box(radius)
    box = float(np.prod(hi - lo))
    if box == 0.0:
        return VolumeEstimate(0.0, 0.0, n_samples, "mc")
    hasher = SpatialHash(cloud, radius)
    sizes = [min(MC_CHUNK, n_samples - start) for start in range(0, n_samples, MC_CHUNK)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        hits = sum(
            executor.map(
                lambda item: _mc_chunk(hasher, lo, hi, item[1], seed, item[0]),
                enumerate(sizes),
            )
        )
    fraction = hits / n_samples
    std_error = box * math.sqrt(fraction * (1.0 - fraction) / n_samples)
    return VolumeEstimate(box * fraction, std_error, n_samples, "mc")


def uniform_in_ball(
    rng: np.random.Generator, center: Sequence[float], rho: float, n: int
) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    d = center.size
    directions = rng.standard_normal((n, d))
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    radii = rho * rng.random(n) ** (1.0 / d)
    return center + directions * radii[:, None]


def covers_ball(
    cloud: PointCloud,
    radius: float,
    center: Sequence[float],
    rho: float,
    n_probes: int,
    seed: int,
) -> Tuple[bool, float]:
    """Probe B(center, rho) with uniform points; return (all probes hit, fraction missed)."""
    if not rho > 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    if cloud.size == 0 or n_probes < 1:
        return False, 1.0
    probes = uniform_in_ball(generator(seed, "covers-ball"), center, rho, n_probes)
    hits = SpatialHash(cloud, radius).contains(probes)
    missed = float(1.0 - hits.mean())
    return bool(hits.all()), missed
