"""Minimal dense-tensor engine with reverse-mode differentiation.

The operator set is closed and deliberately small: 1x1/3x3 convolutions
(stride 1 or 2, zero padding), 2x2 average pooling, 2x bilinear upsampling,
space/depth shuffles, elementwise add and scalar scaling, ReLU, sigmoid, and
a mean-absolute-difference reduction. Data lives in (channels, height, width)
numpy arrays, float32 by default; pass float64 arrays for gradient checks.

A single graph is owned by one training step; separate graphs may run on
separate threads. ``no_grad()`` disables graph construction for inference.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "no_grad",
    "conv2d",
    "relu",
    "sigmoid",
    "add",
    "scale",
    "avg_pool2",
    "bilinear_upsample2",
    "space_to_depth",
    "depth_to_space",
    "mean_abs_diff",
    "AdamState",
    "adam_init",
    "adam_step",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / detached forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from this (scalar) tensor."""
        if self.data.shape != ():
            raise ValueError("backward() starts from a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_chw(x: Tensor, op: str) -> None:
    if x.data.ndim != 3:
        raise ValueError(f"{op} expects (channels, height, width), got {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(C*k*k, out_h*out_w) patch matrix from a padded (C, H, W) array."""
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    win = as_strided(xp, (c, k, k, out_h, out_w),
                     (s0, s1, s2, s1 * stride, s2 * stride))
    return win.reshape(c * k * k, out_h * out_w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with zero padding (k-1)/2; output = input/stride."""
    _check_chw(x, "conv2d")
    o, i, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d supports 1x1 and 3x3 kernels, got {k}x{k2}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d supports stride 1 or 2, got {stride}")
    c, h, w = x.shape
    if i != c:
        raise ValueError(f"conv2d weight expects {i} input channels, input has {c}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({o},)")
    if (h % stride) or (w % stride):
        raise ValueError("conv2d stride must divide the spatial size")
    pad = (k - 1) // 2
    out_h, out_w = h // stride, w // stride
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.ascontiguousarray(_im2col(xp, k, stride, out_h, out_w))
    wmat = weight.data.reshape(o, i * k * k)
    out = (wmat @ cols).reshape(o, out_h, out_w) + bias.data[:, None, None]

    def backward(grad):
        gy = grad.reshape(o, out_h * out_w)
        if weight.requires_grad:
            weight._accumulate((gy @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(gy.sum(axis=1))
        if x.requires_grad:
            gcols = (wmat.T @ gy).reshape(i, k, k, out_h, out_w)
            gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki:ki + out_h * stride:stride,
                        kj:kj + out_w * stride:stride] += gcols[:, ki, kj]
            x._accumulate(gxp[:, pad:pad + h, pad:pad + w] if pad else gxp)

    return _make(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# Elementwise and activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(grad):
        if x.requires_grad:
            x._accumulate(grad * (x.data > 0))

    return _make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)

    def backward(grad):
        if x.requires_grad:
            x._accumulate(grad * out * (1.0 - out))

    return _make(out, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"add shape mismatch: {x.shape} vs {y.shape}")
    out = x.data + y.data

    def backward(grad):
        if x.requires_grad:
            x._accumulate(grad)
        if y.requires_grad:
            y._accumulate(grad)

    return _make(out, (x, y), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)
    out = x.data * np.asarray(f, dtype=x.dtype)

    def backward(grad):
        if x.requires_grad:
            x._accumulate(grad * f)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    _check_chw(x, "avg_pool2")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(grad):
        if x.requires_grad:
            g = np.broadcast_to(grad[:, :, None, :, None] * 0.25,
                                (c, h // 2, 2, w // 2, 2))
            x._accumulate(g.reshape(c, h, w))

    return _make(out, (x,), backward)


def _upsample_taps(n: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Edge-clamped source indices/weights: centers at (i + 0.5)/2 - 0.5."""
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = (src - i0).astype(dtype)
    return i0, i1, w1


def bilinear_upsample2(x: Tensor) -> Tensor:
    """2x bilinear upsampling; linear operator, gradient is its transpose."""
    _check_chw(x, "bilinear_upsample2")
    c, h, w = x.shape
    r0, r1, rw = _upsample_taps(h, x.dtype)
    c0, c1, cw = _upsample_taps(w, x.dtype)
    rows = x.data[:, r0, :] * (1 - rw)[None, :, None] + x.data[:, r1, :] * rw[None, :, None]
    out = rows[:, :, c0] * (1 - cw)[None, None, :] + rows[:, :, c1] * cw[None, None, :]

    def backward(grad):
        if not x.requires_grad:
            return
        grows = np.zeros((c, 2 * h, w), dtype=grad.dtype)
        np.add.at(grows, (slice(None), slice(None), c0), grad * (1 - cw)[None, None, :])
        np.add.at(grows, (slice(None), slice(None), c1), grad * cw[None, None, :])
        gx = np.zeros((c, h, w), dtype=grad.dtype)
        np.add.at(gx, (slice(None), r0), grows * (1 - rw)[None, :, None])
        np.add.at(gx, (slice(None), r1), grows * rw[None, :, None])
        x._accumulate(gx)

    return _make(out, (x,), backward)


def space_to_depth(x: Tensor) -> Tensor:
    """(C, H, W) -> (4C, H/2, W/2); block offsets (0,0),(0,1),(1,0),(1,1)
    map to channel offsets 0..3 within each source channel's group."""
    _check_chw(x, "space_to_depth")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"space_to_depth needs even spatial dims, got {h}x{w}")
    out = (x.data.reshape(c, h // 2, 2, w // 2, 2)
           .transpose(0, 2, 4, 1, 3)
           .reshape(4 * c, h // 2, w // 2))

    def backward(grad):
        if x.requires_grad:
            g = (grad.reshape(c, 2, 2, h // 2, w // 2)
                 .transpose(0, 3, 1, 4, 2)
                 .reshape(c, h, w))
            x._accumulate(g)

    return _make(np.ascontiguousarray(out), (x,), backward)


def depth_to_space(x: Tensor) -> Tensor:
    """Exact inverse of space_to_depth."""
    _check_chw(x, "depth_to_space")
    c4, h, w = x.shape
    if c4 % 4:
        raise ValueError(f"depth_to_space needs 4k channels, got {c4}")
    c = c4 // 4
    out = (x.data.reshape(c, 2, 2, h, w)
           .transpose(0, 3, 1, 4, 2)
           .reshape(c, 2 * h, 2 * w))

    def backward(grad):
        if x.requires_grad:
            g = (grad.reshape(c, h, 2, w, 2)
                 .transpose(0, 2, 4, 1, 3)
                 .reshape(c4, h, w))
            x._accumulate(g)

    return _make(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def mean_abs_diff(x: Tensor, y: Tensor) -> Tensor:
    """Scalar mean |x - y|; subgradient 0 where the difference is exactly 0."""
    if x.shape != y.shape:
        raise ValueError(f"mean_abs_diff shape mismatch: {x.shape} vs {y.shape}")
    d = x.data - y.data
    out = np.abs(d).mean(dtype=d.dtype)
    n = d.size

    def backward(grad):
        g = grad * np.sign(d) / n
        if x.requires_grad:
            x._accumulate(g)
        if y.requires_grad:
            y._accumulate(-g)

    return _make(np.asarray(out), (x, y), backward)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers per parameter plus hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict[str, Tensor], lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != "
                             f"parameter {name} shape {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
