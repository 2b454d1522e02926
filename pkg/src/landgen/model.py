"""Pixel-constrained autoregressive convolutional model.

Two networks share one categorical-image input encoding (one-hot class
channels plus a mask channel) and their per-pixel class logits are added:

* the generative stack: gated blocks with causally masked convolutions,
  split into a vertical stack (rows strictly above) and a horizontal
  stack (current row, at-or-left), linked per block so the receptive
  field covers all raster-order predecessors without blind spots. It
  reads the raw one-hot image, so during training it is teacher-forced
  on true predecessor values and during sampling it sees already-drawn
  pixels.
* the auxiliary stack: an unmasked residual network with
  squeeze-and-excite gating that reads only the observed pixels (the
  one-hot block is zeroed wherever the mask is off), injecting
  conditioning information from anywhere in the image.

Spatial dimensions are preserved end to end; no pooling or striding.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .raster import CategoricalRaster, PixelMask


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    num_classes: int = 5
    gated_blocks: int = 6
    filters: int = 32
    kernel_size: int = 3
    aux_blocks: int = 4
    aux_filters: int = 32
    se_reduction: int = 8

    def __post_init__(self):
        if self.image_size < 2:
            raise ValueError("image_size must be at least 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd and positive")
        if self.filters % 2:
            raise ValueError("filters must be even (gated split)")
        if self.gated_blocks < 1 or self.aux_blocks < 0:
            raise ValueError("need at least one gated block")
        if not 1 <= self.se_reduction <= self.aux_filters:
            raise ValueError("se_reduction must be in [1, aux_filters]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


DESK_CONFIG = ModelConfig()
PAPER_SCALE_CONFIG = ModelConfig(
    image_size=40,
    num_classes=20,
    gated_blocks=22,
    filters=96,
    kernel_size=5,
    aux_blocks=12,
    aux_filters=96,
    se_reduction=16,
)


@dataclass(frozen=True)
class MaskPair:
    """Binary kernel masks for one gated block's two stacks."""

    vertical: np.ndarray  # (k, k): rows strictly above center
    horizontal: np.ndarray  # (1, k): columns left of (type A) or through (type B) center


def causal_masks(kernel_size: int, first_layer: bool) -> MaskPair:
    k = kernel_size
    v = np.zeros((k, k), dtype=np.float32)
    v[: k // 2, :] = 1.0
    h = np.zeros((1, k), dtype=np.float32)
    h[0, : k // 2] = 1.0
    if not first_layer:
        h[0, k // 2] = 1.0  # type B includes the center tap
    return MaskPair(vertical=v, horizontal=h)


class ModelParameters:
    """Named parameter registry for the two networks plus their config."""

    def __init__(self, config: ModelConfig, store: ParameterStore):
        self.config = config
        self.store = store
        self.masks = [
            causal_masks(config.kernel_size, first_layer=(b == 0))
            for b in range(config.gated_blocks)
        ]

    @property
    def dtype(self):
        return self.store["gen.head.w"].dtype

    def clone(self) -> "ModelParameters":
        return ModelParameters(self.config, self.store.clone())


def model_from_store(store: ParameterStore, config_dict: dict) -> ModelParameters:
    """Rebind checkpointed parameters to a config (see `checkpoint`)."""
    return ModelParameters(ModelConfig.from_dict(config_dict), store)


def _conv_init(rng: np.random.Generator, f: int, c: int, kh: int, kw: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(c * kh * kw)
    return rng.uniform(-bound, bound, size=(f, c, kh, kw)).astype(dtype)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParameters:
    """Fresh parameters: centered-uniform fan-in weights, zero biases,
    batch-norm buffers initialized to (0, 1) so eval mode works at init."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    k = config.kernel_size
    f = config.filters
    cin = config.num_classes + 1

    def conv(name: str, fo: int, ci: int, kh: int, kw: int):
        store.add(f"{name}.w", _conv_init(rng, fo, ci, kh, kw, dtype))
        store.add(f"{name}.b", np.zeros(fo, dtype=dtype))

    def bn(name: str, c: int):
        store.add(f"{name}.gamma", np.ones(c, dtype=dtype))
        store.add(f"{name}.beta", np.zeros(c, dtype=dtype))
        store.add(f"{name}.mean", np.zeros(c, dtype=dtype), trainable=False)
        store.add(f"{name}.var", np.ones(c, dtype=dtype), trainable=False)

    for b in range(config.gated_blocks):
        c = cin if b == 0 else f
        conv(f"gen.b{b}.v_conv", 2 * f, c, k, k)
        bn(f"gen.b{b}.v_bn", 2 * f)
        conv(f"gen.b{b}.link", 2 * f, 2 * f, 1, 1)
        conv(f"gen.b{b}.h_conv", 2 * f, c, 1, k)
        bn(f"gen.b{b}.h_bn", 2 * f)
        conv(f"gen.b{b}.h_out", f, f, 1, 1)
    conv("gen.head", config.num_classes, f, 1, 1)

    fa = config.aux_filters
    conv("aux.stem", fa, cin, k, k)
    bn("aux.stem_bn", fa)
    squeeze = max(1, fa // config.se_reduction)
    for b in range(config.aux_blocks):
        conv(f"aux.b{b}.conv1", fa, fa, k, k)
        bn(f"aux.b{b}.bn1", fa)
        conv(f"aux.b{b}.conv2", fa, fa, k, k)
        bn(f"aux.b{b}.bn2", fa)
        conv(f"aux.b{b}.se1", squeeze, fa, 1, 1)
        conv(f"aux.b{b}.se2", fa, squeeze, 1, 1)
    conv("aux.head", config.num_classes, fa, 1, 1)

    return ModelParameters(config, store)


# ---------------------------------------------------------------------------
# Input assembly
# ---------------------------------------------------------------------------


def conditioning_input(images: np.ndarray, observed: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    """Auxiliary-network input: one-hot channels zeroed at masked pixels,
    plus a trailing mask channel. Shape (B, K+1, H, W)."""
    onehot = _one_hot(images, k, dtype)
    m = observed.astype(dtype)[:, None]
    return np.concatenate([onehot * m, m], axis=1)


def generative_input(images: np.ndarray, observed: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    """Generative-stack input: raw one-hot channels plus the mask channel.
    Causal masking keeps future pixels invisible; predecessors (true,
    observed, or previously sampled) are read as-is."""
    onehot = _one_hot(images, k, dtype)
    m = observed.astype(dtype)[:, None]
    return np.concatenate([onehot, m], axis=1)


def _one_hot(images: np.ndarray, k: int, dtype) -> np.ndarray:
    im = np.asarray(images)
    if im.ndim != 3:
        raise ValueError(f"expected (B, H, W) images, got shape {im.shape}")
    if im.size and int(im.max()) >= k:
        raise ValueError(f"class index {int(im.max())} out of range for K={k}")
    eye = np.eye(k, dtype=dtype)
    return eye[im].transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _bn(params: ModelParameters, name: str, x: Tensor, mode: str) -> Tensor:
    s = params.store
    return ad.batchnorm2d(
        x, s[f"{name}.gamma"], s[f"{name}.beta"], s[f"{name}.mean"], s[f"{name}.var"], mode
    )


def _conv(params: ModelParameters, name: str, x: Tensor, mask=None) -> Tensor:
    s = params.store
    return ad.conv2d(x, s[f"{name}.w"], s[f"{name}.b"], mask=mask)


def forward_gen(params: ModelParameters, gen_in: np.ndarray, mode: str) -> Tensor:
    cfg = params.config
    f = cfg.filters
    x = Tensor(gen_in, dtype=params.dtype)
    v = x
    h = x
    for b in range(cfg.gated_blocks):
        mp = params.masks[b]
        v_pre = _bn(params, f"gen.b{b}.v_bn", _conv(params, f"gen.b{b}.v_conv", v, mask=mp.vertical), mode)
        link = _conv(params, f"gen.b{b}.link", v_pre)
        new_v = ad.gated_activation(ad.slice_channels(v_pre, 0, f), ad.slice_channels(v_pre, f, 2 * f))
        h_pre = ad.add(
            _bn(params, f"gen.b{b}.h_bn", _conv(params, f"gen.b{b}.h_conv", h, mask=mp.horizontal), mode),
            link,
        )
        h_g = ad.gated_activation(ad.slice_channels(h_pre, 0, f), ad.slice_channels(h_pre, f, 2 * f))
        h_out = _conv(params, f"gen.b{b}.h_out", h_g)
        h = h_out if b == 0 else ad.add(h_out, h)
        v = new_v
    return _conv(params, "gen.head", ad.relu(h))


def forward_aux(params: ModelParameters, aux_in: np.ndarray, mode: str) -> Tensor:
    cfg = params.config
    a = ad.relu(_bn(params, "aux.stem_bn", _conv(params, "aux.stem", Tensor(aux_in, dtype=params.dtype)), mode))
    for b in range(cfg.aux_blocks):
        y = ad.relu(_bn(params, f"aux.b{b}.bn1", _conv(params, f"aux.b{b}.conv1", a), mode))
        y = _bn(params, f"aux.b{b}.bn2", _conv(params, f"aux.b{b}.conv2", y), mode)
        gate = ad.sigmoid(_conv(params, f"aux.b{b}.se2", ad.relu(_conv(params, f"aux.b{b}.se1", ad.spatial_mean(y)))))
        a = ad.relu(ad.add(ad.mul(y, gate), a))
    return _conv(params, "aux.head", a)


def forward_logits_batch(
    params: ModelParameters,
    images: np.ndarray,
    observed: np.ndarray,
    mode: str = "eval",
    parts: bool = False,
):
    """Summed per-pixel class logits (B, K, H, W) for a batch.

    `images` holds class indices (B, H, W); `observed` is the boolean
    mask batch. With `parts=True` the (generative, auxiliary) logit
    tensors are returned instead of their sum.
    """
    cfg = params.config
    images = np.asarray(images)
    observed = np.asarray(observed, dtype=bool)
    if images.shape != observed.shape:
        raise ValueError(f"images {images.shape} vs masks {observed.shape}")
    if images.shape[1] != cfg.image_size or images.shape[2] != cfg.image_size:
        raise ValueError(
            f"expected {cfg.image_size}x{cfg.image_size} images, got {images.shape[1:]}"
        )
    gen = forward_gen(params, generative_input(images, observed, cfg.num_classes, params.dtype), mode)
    aux = forward_aux(params, conditioning_input(images, observed, cfg.num_classes, params.dtype), mode)
    if parts:
        return gen, aux
    return ad.add(gen, aux)


def forward_logits(
    params: ModelParameters, image: CategoricalRaster, mask: PixelMask, mode: str = "eval"
) -> np.ndarray:
    """Per-pixel class logits (K, H, W) for one raster."""
    mask.check_matches(image)
    if image.palette_K != params.config.num_classes:
        raise ValueError(
            f"raster K={image.palette_K} does not match model K={params.config.num_classes}"
        )
    out = forward_logits_batch(params, image.data[None], mask.observed[None], mode)
    logits = out.data[0]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    return logits


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

LN2 = float(np.log(2.0))


def loss_tensor(
    params: ModelParameters, images: np.ndarray, observed: np.ndarray, mode: str
) -> Tensor:
    """Scalar mean cross-entropy (nats per pixel) over batch and pixels."""
    logits = forward_logits_batch(params, images, observed, mode)
    b, k, hh, ww = logits.shape
    flat = ad.reshape(ad.transpose(logits, (0, 2, 3, 1)), (b * hh * ww, k))
    return ad.softmax_cross_entropy(flat, np.asarray(images).reshape(-1))


def loss(
    params: ModelParameters,
    batch: list[tuple[CategoricalRaster, PixelMask]],
    mode: str = "eval",
) -> tuple[float, float]:
    """Mean NLL of true classes at every pixel: (nats/pixel, bits/dim)."""
    if not batch:
        raise ValueError("empty batch")
    images = np.stack([r.data for r, _ in batch])
    masks = np.stack([m.observed for _, m in batch])
    nats = float(loss_tensor(params, images, masks, mode).data)
    return nats, nats / LN2


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


def count_params(config: ModelConfig) -> tuple[int, int, int]:
    """(generative, auxiliary, total) trainable parameter counts, from the
    layer plan arithmetic alone."""
    detail = count_params_detail(config)
    gen = sum(n for name, n in detail if name.startswith("gen."))
    aux = sum(n for name, n in detail if name.startswith("aux."))
    return gen, aux, gen + aux


def count_params_detail(config: ModelConfig) -> list[tuple[str, int]]:
    k = config.kernel_size
    f = config.filters
    cin = config.num_classes + 1
    out: list[tuple[str, int]] = []

    def conv(name, fo, ci, kh, kw):
        out.append((f"{name}.w", fo * ci * kh * kw))
        out.append((f"{name}.b", fo))

    def bn(name, c):
        out.append((f"{name}.gamma", c))
        out.append((f"{name}.beta", c))

    for b in range(config.gated_blocks):
        c = cin if b == 0 else f
        conv(f"gen.b{b}.v_conv", 2 * f, c, k, k)
        bn(f"gen.b{b}.v_bn", 2 * f)
        conv(f"gen.b{b}.link", 2 * f, 2 * f, 1, 1)
        conv(f"gen.b{b}.h_conv", 2 * f, c, 1, k)
        bn(f"gen.b{b}.h_bn", 2 * f)
        conv(f"gen.b{b}.h_out", f, f, 1, 1)
    conv("gen.head", config.num_classes, f, 1, 1)

    fa = config.aux_filters
    squeeze = max(1, fa // config.se_reduction)
    conv("aux.stem", fa, cin, k, k)
    bn("aux.stem_bn", fa)
    for b in range(config.aux_blocks):
        conv(f"aux.b{b}.conv1", fa, fa, k, k)
        bn(f"aux.b{b}.bn1", fa)
        conv(f"aux.b{b}.conv2", fa, fa, k, k)
        bn(f"aux.b{b}.bn2", fa)
        conv(f"aux.b{b}.se1", squeeze, fa, 1, 1)
        conv(f"aux.b{b}.se2", fa, squeeze, 1, 1)
    conv("aux.head", config.num_classes, fa, 1, 1)
    return out
