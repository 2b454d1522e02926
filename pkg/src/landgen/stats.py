"""Landscape summary statistics, coverage evaluation, and RBF surfaces.

The four statistics depend only on the partition of pixels into classes,
so all are invariant to flips and to class relabeling. Adjacency counts
ordered 4-neighbor pairs (each matching undirected edge counts twice).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError
from .raster import CategoricalRaster, PixelMask


def entropy(raster: CategoricalRaster) -> float:
    """Entropy (nats) of the empirical class proportions; 0 log 0 = 0."""
    counts = np.bincount(raster.data.ravel(), minlength=raster.palette_K)
    p = counts[counts > 0] / raster.data.size
    return float(-(p * np.log(p)).sum())


def adjacency(raster: CategoricalRaster) -> int:
    """Ordered 4-neighbor same-class pair count."""
    a = raster.data
    horiz = int((a[:, :-1] == a[:, 1:]).sum())
    vert = int((a[:-1, :] == a[1:, :]).sum())
    return 2 * (horiz + vert)


def patch_count(raster: CategoricalRaster) -> int:
    """Number of maximal 4-connected same-class regions (union-find)."""
    a = raster.data
    h, w = a.shape
    n = h * w
    parent = np.arange(n)

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    flat = a.ravel()
    for r in range(h):
        base = r * w
        for c in range(w):
            i = base + c
            if c + 1 < w and flat[i] == flat[i + 1]:
                ra, rb = find(i), find(i + 1)
                if ra != rb:
                    parent[rb] = ra
            if r + 1 < h and flat[i] == flat[i + w]:
                ra, rb = find(i), find(i + w)
                if ra != rb:
                    parent[rb] = ra
    return int(sum(1 for i in range(n) if find(i) == i))


def modal_proportion(raster: CategoricalRaster) -> float:
    """Fraction of pixels in the most frequent class."""
    counts = np.bincount(raster.data.ravel(), minlength=raster.palette_K)
    return float(counts.max() / raster.data.size)


@dataclass(frozen=True)
class StatisticVector:
    entropy: float
    adjacency: int
    patch_count: int
    modal_proportion: float


def statistic_vector(raster: CategoricalRaster) -> StatisticVector:
    return StatisticVector(
        entropy=entropy(raster),
        adjacency=adjacency(raster),
        patch_count=patch_count(raster),
        modal_proportion=modal_proportion(raster),
    )


STATISTICS: dict[str, Callable[[CategoricalRaster], float]] = {
    "entropy": entropy,
    "adjacency": adjacency,
    "patch_count": patch_count,
    "modal_proportion": modal_proportion,
}


# ---------------------------------------------------------------------------
# Predictive-interval coverage
# ---------------------------------------------------------------------------

# sampler_fn(image, mask, count, temperature, seed) -> list of completed rasters
SamplerFn = Callable[[CategoricalRaster, PixelMask, int, float, int], list[CategoricalRaster]]


@dataclass(frozen=True)
class CoverageReport:
    """Empirical coverage per (statistic, percentile, temperature)."""

    rates: dict[tuple[str, int, float], float]
    n_images: int
    samples_per_image: int

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["statistic", "percentile", "temperature", "coverage"])
        for (stat, q, t), rate in sorted(self.rates.items()):
            w.writerow([stat, q, t, f"{rate:.4f}"])
        return out.getvalue()


def central_interval(values: np.ndarray, percentile: float) -> tuple[float, float]:
    """Equal-tailed empirical band with linear interpolation."""
    lo = (100.0 - percentile) / 2.0
    hi = (100.0 + percentile) / 2.0
    a, b = np.percentile(np.asarray(values, dtype=np.float64), [lo, hi], method="linear")
    return float(a), float(b)


def coverage(
    truths: Sequence[tuple[CategoricalRaster, PixelMask]],
    sampler_fn: SamplerFn,
    samples_per_image: int,
    percentiles: Iterable[int] = (50, 90, 95),
    temperatures: Iterable[float] = (1.0,),
    seed: int = 0,
    statistics: dict[str, Callable] | None = None,
) -> CoverageReport:
    """Fraction of truths whose statistic lands inside the equal-tailed
    empirical band (endpoints inclusive) of their sampled completions.

    Statistics are computed on full rasters (observed plus infilled).
    """
    if samples_per_image < 20:
        raise ValueError("need at least 20 samples per image")
    stats = statistics or STATISTICS
    percentiles = tuple(percentiles)
    temperatures = tuple(temperatures)
    hits = {(s, q, t): 0 for s in stats for q in percentiles for t in temperatures}
    for i, (image, mask) in enumerate(truths):
        true_vals = {s: fn(image) for s, fn in stats.items()}
        for t in temperatures:
            try:
                comps = sampler_fn(image, mask, samples_per_image, t, seed + 7919 * i)
            except Exception as exc:
                raise RuntimeError(f"sampler failed on image {i}: {exc}") from exc
            vals = {s: np.array([fn(c) for c in comps], dtype=np.float64) for s, fn in stats.items()}
            for s in stats:
                for q in percentiles:
                    lo, hi = central_interval(vals[s], q)
                    if lo <= true_vals[s] <= hi:
                        hits[(s, q, t)] += 1
    n = len(truths)
    return CoverageReport(
        rates={key: count / n for key, count in hits.items()},
        n_images=n,
        samples_per_image=samples_per_image,
    )


# ---------------------------------------------------------------------------
# RBF interpolation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    x0: float
    x1: float
    nx: int
    y0: float
    y1: float
    ny: int

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        xs = np.linspace(self.x0, self.x1, self.nx)
        ys = np.linspace(self.y0, self.y1, self.ny)
        return xs, ys


def rbf_interpolate(
    points: Sequence[tuple[float, float, float]],
    grid: GridSpec,
    length_scale: float,
    jitter: float = 1e-8,
) -> np.ndarray:
    """Gaussian-kernel exact interpolation of scattered (x, y, value)
    points onto a grid; returns (ny, nx) with row 0 at y0."""
    if not points:
        raise ValueError("need at least one point")
    if length_scale <= 0:
        raise ValueError("length_scale must be positive")
    pts = np.asarray([(x, y) for x, y, _ in points], dtype=np.float64)
    vals = np.asarray([v for _, _, v in points], dtype=np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    k = np.exp(-d2 / (2.0 * length_scale**2))
    try:
        weights = np.linalg.solve(k + jitter * np.eye(len(pts)), vals)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular RBF system (duplicate points?): {exc}") from exc
    xs, ys = grid.points()
    gx, gy = np.meshgrid(xs, ys)
    gpts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    d2g = ((gpts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    surface = np.exp(-d2g / (2.0 * length_scale**2)) @ weights
    return surface.reshape(grid.ny, grid.nx)


def grid_to_csv(grid: np.ndarray) -> str:
    out = io.StringIO()
    w = csv.writer(out)
    for row in np.asarray(grid):
        w.writerow([f"{v:.6g}" for v in row])
    return out.getvalue()
