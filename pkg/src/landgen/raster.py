"""Categorical raster data model, preprocessing, and synthetic landscapes.

Rasters are small H x W grids of class indices (uint8) with an attached
class count. All types are immutable after construction so they can be
shared freely across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InfeasibleWindowError


@dataclass(frozen=True)
class ClassPalette:
    """Legend binding class indices to short names and RGB colors."""

    labels: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ValueError("palette needs at least 2 classes")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("palette labels must be unique")
        if len(self.colors) != len(self.labels):
            raise ValueError("palette colors must match label count")
        for c in self.colors:
            if len(c) != 3 or any(not (0 <= v <= 255) for v in c):
                raise ValueError(f"bad RGB triple {c!r}")

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def truncated(self, k: int) -> "ClassPalette":
        """First-k-classes palette for rasters with fewer classes."""
        if not 2 <= k <= self.num_classes:
            raise ValueError(f"cannot truncate palette of {self.num_classes} to {k}")
        return ClassPalette(self.labels[:k], self.colors[:k])


# 20-class land-cover legend: water, ice/snow, 4 developed intensities,
# barren, 3 forest, 2 shrub, 4 herbaceous, 2 planted, 2 wetlands.
DEFAULT_PALETTE = ClassPalette(
    labels=(
        "water", "ice_snow",
        "dev_open", "dev_low", "dev_med", "dev_high",
        "barren",
        "forest_decid", "forest_ever", "forest_mixed",
        "scrub_dwarf", "scrub",
        "grassland", "sedge", "lichens", "moss",
        "pasture", "crops",
        "wetland_woody", "wetland_herb",
    ),
    colors=(
        (70, 107, 159), (209, 222, 248),
        (222, 197, 197), (217, 146, 130), (235, 0, 0), (171, 0, 0),
        (179, 172, 159),
        (104, 171, 95), (28, 95, 44), (181, 197, 143),
        (175, 150, 60), (204, 184, 121),
        (223, 223, 194), (209, 209, 130), (163, 204, 81), (130, 186, 158),
        (220, 217, 57), (171, 108, 40),
        (184, 217, 235), (108, 159, 184),
    ),
)

WATER_CLASS = 0
DEVELOPED_CLASSES = frozenset({2, 3, 4, 5})


def _frozen_array(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CategoricalRaster:
    """H x W grid of class indices in {0..palette_K-1}."""

    data: np.ndarray  # (H, W) uint8, read-only
    palette_K: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"raster data must be 2-D, got shape {data.shape}")
        if not 2 <= self.palette_K <= 256:
            raise ValueError(f"palette_K must be in [2, 256], got {self.palette_K}")
        if data.size and int(data.max()) >= self.palette_K:
            raise ValueError(
                f"class index {int(data.max())} out of range for K={self.palette_K}"
            )
        object.__setattr__(self, "data", _frozen_array(data.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CategoricalRaster):
            return NotImplemented
        return self.palette_K == other.palette_K and np.array_equal(self.data, other.data)

    def with_data(self, data: np.ndarray) -> "CategoricalRaster":
        return CategoricalRaster(data, self.palette_K)


@dataclass(frozen=True, eq=False)
class PixelMask:
    """H x W grid of booleans; True marks an observed pixel."""

    observed: np.ndarray  # (H, W) bool, read-only

    def __post_init__(self):
        obs = np.asarray(self.observed)
        if obs.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {obs.shape}")
        object.__setattr__(self, "observed", _frozen_array(obs.astype(bool)))

    @property
    def height(self) -> int:
        return self.observed.shape[0]

    @property
    def width(self) -> int:
        return self.observed.shape[1]

    @property
    def num_missing(self) -> int:
        return int((~self.observed).sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PixelMask):
            return NotImplemented
        return np.array_equal(self.observed, other.observed)

    def check_matches(self, raster: CategoricalRaster) -> None:
        if self.observed.shape != raster.data.shape:
            raise ValueError(
                f"mask shape {self.observed.shape} does not match raster {raster.data.shape}"
            )


def mask_all_observed(h: int, w: int) -> PixelMask:
    return PixelMask(np.ones((h, w), dtype=bool))


def mask_all_missing(h: int, w: int) -> PixelMask:
    return PixelMask(np.zeros((h, w), dtype=bool))


def mask_top_missing(h: int, w: int) -> PixelMask:
    obs = np.ones((h, w), dtype=bool)
    obs[: h // 2, :] = False
    return PixelMask(obs)


def mask_bottom_missing(h: int, w: int) -> PixelMask:
    obs = np.ones((h, w), dtype=bool)
    obs[h // 2 :, :] = False
    return PixelMask(obs)


def mask_center_missing(h: int, w: int) -> PixelMask:
    obs = np.ones((h, w), dtype=bool)
    r0, c0 = h // 4, w // 4
    obs[r0 : r0 + h // 2, c0 : c0 + w // 2] = False
    return PixelMask(obs)


MASK_FAMILIES = {
    "top": mask_top_missing,
    "bottom": mask_bottom_missing,
    "center": mask_center_missing,
    "full": mask_all_missing,
}


@dataclass(frozen=True)
class DatasetManifest:
    """Provenance record for a set of extracted training windows."""

    window_size: int
    K: int
    entries: tuple[tuple[str, int, int], ...]  # (source id, row offset, col offset)
    water_class: int
    water_fraction_limit: float

    def check_fits(self, sources: dict[str, CategoricalRaster]) -> None:
        for sid, r, c in self.entries:
            src = sources[sid]
            if r < 0 or c < 0 or r + self.window_size > src.height or c + self.window_size > src.width:
                raise ValueError(f"window ({sid}, {r}, {c}) does not fit its source")


def coarsen_majority(raster: CategoricalRaster, factor: int) -> CategoricalRaster:
    """Downscale by `factor`, each cell taking the modal class of its block.

    Ties are broken toward the lowest class index.
    """
    if factor < 1:
        raise ValueError(f"factor must be positive, got {factor}")
    h, w = raster.height, raster.width
    if h % factor:
        raise ValueError(f"height {h} not divisible by factor {factor}")
    if w % factor:
        raise ValueError(f"width {w} not divisible by factor {factor}")
    hh, ww = h // factor, w // factor
    blocks = (
        raster.data.reshape(hh, factor, ww, factor)
        .transpose(0, 2, 1, 3)
        .reshape(hh, ww, factor * factor)
    )
    counts = (blocks[..., None] == np.arange(raster.palette_K, dtype=np.uint8)).sum(axis=2)
    return CategoricalRaster(counts.argmax(axis=-1).astype(np.uint8), raster.palette_K)


def extract_windows(
    raster: CategoricalRaster,
    window: int,
    count: int,
    water_class: int = WATER_CLASS,
    water_limit: float = 0.5,
    seed: int = 0,
    source_id: str = "source0",
    max_consecutive_rejections: int = 10_000,
) -> tuple[DatasetManifest, list[CategoricalRaster]]:
    """Sample `count` windows uniformly over valid offsets, rejecting any
    window whose water fraction exceeds `water_limit`."""
    if window > min(raster.height, raster.width):
        raise ValueError(
            f"window {window} larger than raster {raster.height}x{raster.width}"
        )
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    data = raster.data
    entries: list[tuple[str, int, int]] = []
    windows: list[CategoricalRaster] = []
    for _ in range(count):
        rejections = 0
        while True:
            r = int(rng.integers(0, raster.height - window + 1))
            c = int(rng.integers(0, raster.width - window + 1))
            patch = data[r : r + window, c : c + window]
            frac = float((patch == water_class).mean())
            if frac <= water_limit:
                break
            rejections += 1
            if rejections >= max_consecutive_rejections:
                raise InfeasibleWindowError(
                    f"{rejections} consecutive windows exceeded water fraction "
                    f"{water_limit} (water class {water_class})"
                )
        entries.append((source_id, r, c))
        windows.append(CategoricalRaster(patch, raster.palette_K))
    manifest = DatasetManifest(
        window_size=window,
        K=raster.palette_K,
        entries=tuple(entries),
        water_class=water_class,
        water_fraction_limit=water_limit,
    )
    return manifest, windows


# ---------------------------------------------------------------------------
# Synthetic landscapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    """Knobs for the synthetic landscape generator."""

    smooth_radius: int = 2
    smooth_passes: int = 2
    proportion_concentration: float = 3.0
    road_probability: float = 0.35
    max_roads: int = 3
    water_probability: float = 0.3
    max_water_blobs: int = 2
    road_class: int | None = None  # default: lowest developed-ish index
    water_class: int = WATER_CLASS


def _box_blur(a: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with reflected edges, via integral images."""
    if radius < 1:
        return a
    k = 2 * radius + 1
    p = np.pad(a, radius, mode="reflect")
    s = np.cumsum(np.cumsum(p, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    out = s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]
    return out / (k * k)


def synth_landscape(
    h: int,
    w: int,
    k: int,
    seed: int,
    params: SynthParams = SynthParams(),
) -> CategoricalRaster:
    """Deterministic spatially-cohesive multi-class raster.

    A smoothed noise field is cut into k classes at rank thresholds drawn
    from a Dirichlet over class shares; optional 1-pixel road lines and
    elliptical water blobs are stamped on top. Uses a counter-based
    bit stream (Philox) so a seed maps to the same raster everywhere.
    """
    if k < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.Generator(np.random.Philox(seed))
    field_ = rng.random((h, w))
    for _ in range(params.smooth_passes):
        field_ = _box_blur(field_, params.smooth_radius)

    shares = rng.dirichlet(np.full(k, params.proportion_concentration))
    order = np.argsort(field_.ravel(), kind="stable")
    cuts = np.floor(np.cumsum(shares) * h * w).astype(np.int64)
    cuts[-1] = h * w
    labels = np.empty(h * w, dtype=np.uint8)
    start = 0
    for cls, stop in enumerate(cuts):
        labels[order[start:stop]] = cls
        start = stop
    grid = labels.reshape(h, w)

    road_class = params.road_class if params.road_class is not None else min(2, k - 1)
    for _ in range(params.max_roads):
        if rng.random() < params.road_probability:
            if rng.random() < 0.5:
                grid[int(rng.integers(0, h)), :] = road_class
            else:
                grid[:, int(rng.integers(0, w))] = road_class

    for _ in range(params.max_water_blobs):
        if rng.random() < params.water_probability:
            cy, cx = rng.integers(0, h), rng.integers(0, w)
            ry = int(rng.integers(1, max(2, h // 5)))
            rx = int(rng.integers(1, max(2, w // 5)))
            yy, xx = np.ogrid[:h, :w]
            blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            grid[blob] = params.water_class

    return CategoricalRaster(grid, k)
