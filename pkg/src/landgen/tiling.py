"""Sequential window-by-window infill of regions larger than the model.

The planner repeatedly takes the top-most (then left-most) missing pixel,
places a model-sized window whose context extends up to `margin` pixels
above and to the left (clipped at borders, never shifted off the raster),
claims every still-missing pixel inside that window, and repeats until
nothing is missing. Execution samples each step's claimed pixels with the
model, writing results back so later steps condition on earlier infills.
Spatial information beyond the window margin is discarded by design.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParameters
from .raster import CategoricalRaster, PixelMask
from .sampling import Orientation, SampleRequest, sample


@dataclass(frozen=True)
class TileStep:
    row0: int
    col0: int
    window: int
    missing: np.ndarray  # (window, window) bool: pixels this step fills

    def __post_init__(self):
        m = np.asarray(self.missing, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "missing", m)


@dataclass(frozen=True)
class TilePlan:
    steps: tuple[TileStep, ...]
    window: int
    margin: int


def plan_tiles(mask: PixelMask, window: int, margin: int) -> TilePlan:
    """Greedy cover of the missing set; deterministic."""
    h, w = mask.height, mask.width
    if window > min(h, w):
        raise ValueError(f"window {window} larger than raster {h}x{w}")
    if not 0 <= margin < window:
        raise ValueError(f"margin must be in [0, window), got {margin}")
    work = mask.observed.copy()
    steps: list[TileStep] = []
    while True:
        missing = np.argwhere(~work)
        if missing.size == 0:
            break
        r_star, c_star = missing[0]  # argwhere is row-major: top-most, then left-most
        r0 = min(max(0, r_star - margin), h - window)
        c0 = min(max(0, c_star - margin), w - window)
        sub = ~work[r0 : r0 + window, c0 : c0 + window]
        steps.append(TileStep(int(r0), int(c0), window, sub.copy()))
        work[r0 : r0 + window, c0 : c0 + window] = True
    return TilePlan(tuple(steps), window, margin)


def run_plan(
    plan: TilePlan,
    params: ModelParameters,
    raster: CategoricalRaster,
    mask: PixelMask,
    temperature: float = 1.0,
    seed: int = 0,
    flips: bool = True,
) -> CategoricalRaster:
    """Execute the plan on one completion; originally observed pixels are
    never altered and every missing pixel ends up filled."""
    mask.check_matches(raster)
    canvas = raster.data.copy()
    rng = np.random.default_rng(seed)
    for step_idx, step in enumerate(plan.steps):
        sl = (slice(step.row0, step.row0 + step.window), slice(step.col0, step.col0 + step.window))
        win_img = canvas[sl]
        win_obs = ~step.missing
        o = Orientation(
            flip_h=bool(flips and rng.random() < 0.5),
            flip_v=bool(flips and rng.random() < 0.5),
        )
        req = SampleRequest(
            params=params,
            image=CategoricalRaster(o.apply(win_img), raster.palette_K),
            mask=PixelMask(o.apply(win_obs)),
            temperature=temperature,
            seed=int(rng.integers(0, 2**63 - 1)),
            count=1,
        )
        completed = o.inverse.apply(sample(req)[0].data)
        win_img[step.missing] = completed[step.missing]
    return raster.with_data(canvas)


def probability_map(
    completions: list[CategoricalRaster],
    class_set: frozenset[int] | set[int],
    mask: PixelMask | None = None,
) -> np.ndarray:
    """Per-pixel fraction of completions whose class lies in `class_set`."""
    if not completions:
        raise ValueError("need at least one completion")
    shape = completions[0].data.shape
    for c in completions:
        if c.data.shape != shape:
            raise ValueError(f"completion shape {c.data.shape} does not match {shape}")
    if mask is not None and mask.observed.shape != shape:
        raise ValueError(f"mask shape {mask.observed.shape} does not match {shape}")
    lut = np.zeros(completions[0].palette_K, dtype=np.float64)
    for cls in class_set:
        lut[cls] = 1.0
    acc = np.zeros(shape, dtype=np.float64)
    for c in completions:
        acc += lut[c.data]
    return acc / len(completions)
