import numpy as np
import pytest

from landgen.model import DESK_CONFIG, ModelConfig, build_model
from landgen.raster import SynthParams, synth_landscape
from landgen.training import class_marginal_entropy_bits, train

TOY_CONFIG = ModelConfig(
    image_size=6, num_classes=4, gated_blocks=2, filters=6,
    kernel_size=3, aux_blocks=1, aux_filters=4, se_reduction=2,
)

TINY_3X3 = ModelConfig(
    image_size=3, num_classes=3, gated_blocks=2, filters=4,
    kernel_size=3, aux_blocks=1, aux_filters=4, se_reduction=2,
)


@pytest.fixture(scope="session")
def desk_dataset():
    data = [synth_landscape(16, 16, 5, seed=s) for s in range(2200)]
    return data[:2000], data[2000:]


@pytest.fixture(scope="session")
def trained_desk_model(desk_dataset):
    """Desk-scale model trained until held-out bits/dim beats the
    class-marginal entropy baseline (criterion: within 30 epochs)."""
    train_set, heldout = desk_dataset
    baseline = class_marginal_entropy_bits(train_set)
    params = build_model(DESK_CONFIG, seed=0)
    result, _ = train(
        params, train_set, epochs=30, batch_size=64, lr=1e-3, seed=0,
        heldout=heldout, stop_below_heldout_bits=baseline,
    )
    return {"params": params, "result": result, "baseline_bits": baseline}


@pytest.fixture(scope="session")
def overfit_toy_model():
    """Desk config memorizing 10 images over 300 epochs."""
    data = [synth_landscape(16, 16, 5, seed=1000 + s) for s in range(10)]
    params = build_model(DESK_CONFIG, seed=1)
    result, _ = train(params, data, epochs=300, batch_size=10, lr=2e-3, seed=1)
    train_rows = [r for r in result.rows if r.split == "train"]
    return {"params": params, "data": data, "final_bits": train_rows[-1].bits_per_dim}


def scaled_model(config: ModelConfig, seed: int, weight_scale: float = 3.0):
    """Random init with inflated weights so conditionals vary visibly."""
    params = build_model(config, seed=seed)
    for name, t in params.store.trainable_items():
        if name.endswith(".w"):
            t.data *= weight_scale
    return params


@pytest.fixture(scope="session")
def tiny_model():
    return scaled_model(TINY_3X3, seed=5)
