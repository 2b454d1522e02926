"""Training loop: Adam, seeded shuffling, and a random mask curriculum.

Each epoch reshuffles the dataset and draws a fresh mask per image from
four families (top half missing, bottom half missing, centered rectangle
missing, fully missing) with equal probability. The loss covers all
pixels, so the generative stack keeps learning the unconditional chain
while the auxiliary stack learns to exploit whatever is observed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .model import LN2, ModelParameters, loss_tensor
from .optim import AdamState, adam_step
from .raster import MASK_FAMILIES, CategoricalRaster

_FAMILY_ORDER = ("top", "bottom", "center", "full")


def sample_mask_batch(rng: np.random.Generator, b: int, h: int, w: int) -> np.ndarray:
    """(B, H, W) observed masks, family drawn uniformly per image."""
    out = np.empty((b, h, w), dtype=bool)
    picks = rng.integers(0, len(_FAMILY_ORDER), size=b)
    for i, p in enumerate(picks):
        out[i] = MASK_FAMILIES[_FAMILY_ORDER[p]](h, w).observed
    return out


@dataclass
class TrainRow:
    epoch: int
    split: str
    nll_nats: float
    bits_per_dim: float
    wall_seconds: float


@dataclass
class TrainResult:
    rows: list[TrainRow] = field(default_factory=list)
    stopped_epoch: int | None = None

    def heldout_bits(self, epoch: int) -> float | None:
        for r in self.rows:
            if r.epoch == epoch and r.split == "heldout":
                return r.bits_per_dim
        return None

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "split", "nll_nats", "bits_per_dim", "wall_seconds"])
            for r in self.rows:
                w.writerow([r.epoch, r.split, f"{r.nll_nats:.6f}", f"{r.bits_per_dim:.6f}", f"{r.wall_seconds:.3f}"])


def evaluate_bits(
    params: ModelParameters,
    rasters: list[CategoricalRaster],
    rng: np.random.Generator,
    batch_size: int = 64,
) -> tuple[float, float]:
    """Eval-mode (nats, bits/dim) with masks from the training curriculum."""
    images = np.stack([r.data for r in rasters])
    h, w = images.shape[1:]
    masks = sample_mask_batch(rng, len(rasters), h, w)
    total = 0.0
    for i in range(0, len(rasters), batch_size):
        sl = slice(i, i + batch_size)
        n = len(images[sl])
        total += float(loss_tensor(params, images[sl], masks[sl], "eval").data) * n
    nats = total / len(rasters)
    return nats, nats / LN2


def train(
    params: ModelParameters,
    dataset: list[CategoricalRaster],
    epochs: int,
    batch_size: int = 64,
    lr: float = 5e-4,
    seed: int = 0,
    heldout: list[CategoricalRaster] | None = None,
    stop_below_heldout_bits: float | None = None,
    log_path: str | Path | None = None,
) -> tuple[TrainResult, AdamState]:
    """Optimize `params` in place; returns the per-epoch log.

    Epoch 0 rows are the pre-training evaluation of the fresh parameters.
    Deterministic given `seed` on one platform.
    """
    if not dataset:
        raise ValueError("empty dataset")
    cfg = params.config
    for r in dataset:
        if r.height != cfg.image_size or r.width != cfg.image_size or r.palette_K != cfg.num_classes:
            raise ValueError(
                f"dataset raster {r.height}x{r.width} K={r.palette_K} does not match config"
            )
    rng = np.random.default_rng(seed)
    adam = AdamState(lr=lr)
    result = TrainResult()
    images = np.stack([r.data for r in dataset])
    n = len(dataset)
    t0 = time.monotonic()

    def log_eval(epoch: int) -> float | None:
        nats, bits = evaluate_bits(params, dataset, np.random.default_rng(seed + 101), batch_size)
        result.rows.append(TrainRow(epoch, "train", nats, bits, time.monotonic() - t0))
        hb = None
        if heldout:
            hnats, hb = evaluate_bits(params, heldout, np.random.default_rng(seed + 202), batch_size)
            result.rows.append(TrainRow(epoch, "heldout", hnats, hb, time.monotonic() - t0))
        return hb

    log_eval(0)
    trainable = [t for _, t in params.store.trainable_items()]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        masks = sample_mask_batch(rng, n, cfg.image_size, cfg.image_size)
        epoch_nats = 0.0
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            with Tape() as tape:
                lt = loss_tensor(params, images[idx], masks[idx], "train")
            tape.backward(lt, params=trainable)
            adam_step(params.store, adam)
            epoch_nats += float(lt.data) * len(idx)
        nats = epoch_nats / n
        result.rows.append(TrainRow(epoch, "train", nats, nats / LN2, time.monotonic() - t0))
        hb = None
        if heldout:
            hnats, hb = evaluate_bits(params, heldout, np.random.default_rng(seed + 202 + epoch), batch_size)
            result.rows.append(TrainRow(epoch, "heldout", hnats, hb, time.monotonic() - t0))
        if stop_below_heldout_bits is not None and hb is not None and hb < stop_below_heldout_bits:
            result.stopped_epoch = epoch
            break
    if log_path is not None:
        result.write_csv(log_path)
    return result, adam


def class_marginal_entropy_bits(dataset: list[CategoricalRaster]) -> float:
    """Entropy (bits/pixel) of the pooled class marginal; the baseline any
    spatial model must beat."""
    k = dataset[0].palette_K
    counts = np.zeros(k, dtype=np.float64)
    for r in dataset:
        counts += np.bincount(r.data.ravel(), minlength=k)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())
