"""Ancestral raster-scan sampling, temperature control, and scoring.

Pixels are visited in raster order. Observed pixels are clamped (copied
verbatim, never resampled); each missing pixel is drawn from the softmax
of the summed logits divided by temperature, computed by a full forward
pass on the current canvas. Already-drawn pixels are visible to the
generative stack through the canvas values, while the auxiliary stack
keeps seeing only the originally observed context, so the per-pixel
conditionals match what `score` evaluates in a single pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import log_softmax, softmax
from .model import ModelParameters, forward_logits_batch
from .raster import CategoricalRaster, PixelMask, mask_all_missing

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class Orientation:
    """Horizontal/vertical flip pair; its own inverse."""

    flip_h: bool = False
    flip_v: bool = False

    def apply(self, a: np.ndarray) -> np.ndarray:
        if self.flip_v:
            a = a[::-1, :]
        if self.flip_h:
            a = a[:, ::-1]
        return np.ascontiguousarray(a)

    @property
    def inverse(self) -> "Orientation":
        return self


IDENTITY = Orientation()


def orient(
    image: CategoricalRaster, mask: PixelMask, policy: str, seed: int = 0
) -> tuple[CategoricalRaster, PixelMask, Orientation]:
    """Apply an orientation policy; returns the transform so completions
    can be mapped back (inverse == forward for flips)."""
    if policy == "identity":
        o = IDENTITY
    elif policy == "random-flips":
        rng = np.random.default_rng(seed)
        o = Orientation(flip_h=bool(rng.random() < 0.5), flip_v=bool(rng.random() < 0.5))
    else:
        raise ValueError(f"unknown orientation policy {policy!r}")
    return image.with_data(o.apply(image.data)), PixelMask(o.apply(mask.observed)), o


@dataclass(frozen=True)
class SampleRequest:
    params: ModelParameters
    image: CategoricalRaster
    mask: PixelMask
    temperature: float = 1.0
    seed: int = 0
    count: int = 1
    orientation: str = "identity"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        self.mask.check_matches(self.image)


@dataclass(frozen=True)
class ScoredImage:
    raster: CategoricalRaster
    nats: float  # total log-probability
    bits_per_dim: float


def temperature_scale(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / T) along the last axis, log-sum-exp stabilized."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    return softmax(z / temperature, axis=-1)


def _draw_class(probs: np.ndarray, u: float) -> int:
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    return min(int(np.searchsorted(cum, u, side="right")), probs.size - 1)


def sample(request: SampleRequest) -> list[CategoricalRaster]:
    """Draw `count` completions; deterministic given the request seed."""
    return sample_with_trace(request)[0]


def sample_with_trace(request: SampleRequest) -> tuple[list[CategoricalRaster], list[float]]:
    """Completions plus, per completion, the model log-probability (nats,
    temperature 1) of its drawn pixels along the sampling path."""
    params = request.params
    cfg = params.config
    image, mask = request.image, request.mask
    if image.palette_K != cfg.num_classes:
        raise ValueError(f"raster K={image.palette_K} vs model K={cfg.num_classes}")
    rngs = [np.random.default_rng(request.seed + i) for i in range(request.count)]
    orientations = []
    for rng in rngs:
        if request.orientation == "identity":
            orientations.append(IDENTITY)
        elif request.orientation == "random-flips":
            orientations.append(
                Orientation(flip_h=bool(rng.random() < 0.5), flip_v=bool(rng.random() < 0.5))
            )
        else:
            raise ValueError(f"unknown orientation policy {request.orientation!r}")

    results: list[CategoricalRaster | None] = [None] * request.count
    nats: list[float] = [0.0] * request.count
    groups: dict[Orientation, list[int]] = {}
    for i, o in enumerate(orientations):
        groups.setdefault(o, []).append(i)

    for o, idxs in groups.items():
        img = o.apply(image.data)
        obs = o.apply(mask.observed)
        missing = np.argwhere(~obs)  # raster order: argwhere is row-major
        b = len(idxs)
        canvases = np.repeat(img[None], b, axis=0)
        obs_b = np.repeat(obs[None], b, axis=0)
        for r, c in missing:
            logits = forward_logits_batch(params, canvases, obs_b, "eval").data[:, :, r, c]
            probs = temperature_scale(logits, request.temperature)
            logp_model = log_softmax(logits, axis=-1)
            for bi, gi in enumerate(idxs):
                cls = _draw_class(probs[bi], rngs[gi].random())
                canvases[bi, r, c] = cls
                nats[gi] += float(logp_model[bi, cls])
        inv = o.inverse
        for bi, gi in enumerate(idxs):
            results[gi] = image.with_data(inv.apply(canvases[bi]))
    return [r for r in results if r is not None], nats


def score(params: ModelParameters, raster: CategoricalRaster) -> ScoredImage:
    """Total log-probability of a raster under the unconditional chain rule.

    One forward pass: the auxiliary stack sees a fully-missing mask, the
    generative stack sees the true predecessors of each pixel.
    """
    cfg = params.config
    if raster.palette_K != cfg.num_classes:
        raise ValueError(f"raster K={raster.palette_K} vs model K={cfg.num_classes}")
    empty = mask_all_missing(raster.height, raster.width)
    logits = forward_logits_batch(params, raster.data[None], empty.observed[None], "eval").data[0]
    logp = log_softmax(logits.transpose(1, 2, 0), axis=-1)
    h, w = raster.height, raster.width
    rows, cols = np.indices((h, w))
    total = float(logp[rows, cols, raster.data].sum())
    return ScoredImage(raster=raster, nats=total, bits_per_dim=-total / LN2 / (h * w))
