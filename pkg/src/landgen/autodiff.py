"""Dense-tensor numerical core with reverse-mode automatic differentiation.

A `Tape` records operations in execution order (a Wengert list); running
it backwards accumulates gradients for every tensor that requires them.
Only what the convolutional model needs is implemented: convolutions with
multiplicative weight masks, batch norm, ReLU, gating, softmax
cross-entropy, and elementwise/shape plumbing. Stride is always 1 and
convolutions use same-size zero padding.

Values default to float32; reductions (loss, batch statistics) accumulate
in float64. Gradient-check suites run the whole engine in float64 by
constructing float64 tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense array plus gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Record:
    out_id: int
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Execution-ordered operation log for one forward pass.

    Single-owner: enter as a context manager, build the graph, then call
    `backward` once. Records are held in execution order, which is a valid
    topological order, so the reverse walk touches each node exactly once.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._leaves: dict[int, Tensor] = {}
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self._records.append(_Record(id(out), inputs, backward))
        self._output_ids.add(id(out))
        for t in inputs:
            if t.requires_grad and id(t) not in self._output_ids:
                self._leaves[id(t)] = t

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Reverse accumulation from a scalar loss.

        Sets `.grad` on every leaf tensor on the loss path; tensors in
        `params` that never touched the loss get zero gradients.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            partials = rec.backward(g)
            for t, gt in zip(rec.inputs, partials):
                if gt is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gt if acc is None else acc + gt
        for tid, t in self._leaves.items():
            t.grad = grads.get(tid, np.zeros_like(t.data))
        for p in params:
            if id(p) not in self._leaves:
                p.grad = np.zeros_like(p.data)


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def sum_(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64)).astype(x.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).astype(x.dtype),))


def mean_(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n).astype(x.dtype)
    return _make(out, (x,), lambda g: ((np.broadcast_to(g, x.data.shape) / n).astype(x.dtype),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def gated_activation(a: Tensor, b: Tensor) -> Tensor:
    """tanh(a) * sigmoid(b); the two halves of a gated feature split."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"gated halves disagree: {a.data.shape} vs {b.data.shape}")
    t = np.tanh(a.data)
    s = _sigmoid(b.data)
    return _make(t * s, (a, b), lambda g: (g * s * (1.0 - t * t), g * t * s * (1.0 - s)))


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool over H and W: (N,C,H,W) -> (N,C,1,1)."""
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)
    return _make(
        out, (x,), lambda g: ((np.broadcast_to(g, x.data.shape) / (h * w)).astype(x.dtype),)
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    mask: np.ndarray | Tensor | None = None,
) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    When `mask` is given the effective kernel is `weight * mask`, and the
    weight gradient is masked identically, so gradient flows only through
    unmasked taps.
    """
    n, c, h, w = x.data.shape
    f, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ValueError(f"input has {c} channels, weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel must be odd, got {kh}x{kw}")
    m = None
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        m = np.broadcast_to(m.astype(weight.dtype, copy=False), weight.data.shape)
    weff = weight.data if m is None else weight.data * m
    cols = _im2col(x.data, kh, kw)
    out = cols @ weff.reshape(f, -1).T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, h, w, f).transpose(0, 3, 1, 2)

    def backward(g):
        gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, f)
        gw = (gr.T @ _im2col(x.data, kh, kw)).reshape(weight.data.shape)
        if m is not None:
            gw = gw * m
        gb = None if bias is None else gr.sum(axis=0, dtype=np.float64).astype(bias.dtype)
        # dX is the correlation of g with the flipped, channel-swapped kernel
        wflip = weff[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = (
            (_im2col(g, kh, kw) @ wflip.reshape(c, -1).T)
            .reshape(n, h, w, c)
            .transpose(0, 3, 1, 2)
        )
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, backward)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor | None,
    running_var: Tensor | None,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channel-wise batch norm over batch and spatial dims.

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode uses the running buffers and fails if they
    were never initialized.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.data.shape
    shape = (1, c, 1, 1)
    if mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch norm requires initialized running stats")
        rm = running_mean.data.reshape(shape)
        inv = (1.0 / np.sqrt(running_var.data.reshape(shape) + eps)).astype(x.dtype)
        xhat = (x.data - rm) * inv
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def backward_eval(g):
            gx = g * (gamma.data.reshape(shape) * inv)
            ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
            gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(beta.dtype)
            return gx, ggamma, gbeta

        return _make(out, (x, gamma, beta), backward_eval)

    m = x.data.size // c
    mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
    var = x.data.var(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
    if running_mean is not None and running_var is not None:
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var
    inv = (1.0 / np.sqrt(var + eps)).reshape(shape).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape)) * inv
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward_train(g):
        dxhat = g * gamma.data.reshape(shape)
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        gx = (inv / m * (m * dxhat - s1 - xhat * s2)).astype(x.dtype)
        ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
        gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(beta.dtype)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward_train)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Log-sum-exp stabilized softmax on a plain array (float64 internally)."""
    z64 = np.asarray(z, dtype=np.float64)
    z64 = z64 - z64.max(axis=axis, keepdims=True)
    e = np.exp(z64)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z64 = np.asarray(z, dtype=np.float64)
    z64 = z64 - z64.max(axis=axis, keepdims=True)
    return z64 - np.log(np.exp(z64).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    t = np.asarray(targets)
    m, k = logits.data.shape
    if t.shape != (m,):
        raise ValueError(f"targets shape {t.shape} does not match {m} rows")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"target {int(t.max())} out of range for K={k}")
    logp = log_softmax(logits.data, axis=1)
    loss = np.asarray(-logp[np.arange(m), t].mean())
    probs = np.exp(logp)

    def backward(g):
        d = probs.copy()
        d[np.arange(m), t] -= 1.0
        return ((g * d / m).astype(logits.dtype),)

    return _make(loss.astype(np.float64), (logits,), backward)


# ---------------------------------------------------------------------------
# Parameter registry
# ---------------------------------------------------------------------------


class ParameterStore:
    """Ordered name -> tensor registry; the checkpoint unit.

    Entries flagged trainable receive gradients and optimizer updates;
    the rest are buffers (e.g. batch-norm running statistics).
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data), requires_grad=trainable, name=name)
        self._entries[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.items())

    def names(self) -> list[str]:
        return list(self._entries)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._entries.items() if self._trainable[n]]

    def trainable_size(self) -> int:
        return sum(t.size for _, t in self.trainable_items())

    def total_size(self) -> int:
        return sum(t.size for t in self._entries.values())

    def clone(self) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self._entries.items():
            out.add(name, t.data.copy(), self._trainable[name])
        return out
