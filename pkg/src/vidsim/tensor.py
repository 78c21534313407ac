"""Minimal rank-generic tensor engine with reverse-mode autodiff.

Every operation records its inputs and an explicit backward function on the
output node; ``Tensor.backward()`` replays the recorded tape in reverse
topological order. Data is float64 throughout (checkpoints downcast to
float32 at the serialization boundary, see ``checkpoint``).

Layout convention: channels last. Spatial operations treat the trailing
axes as ``(S1, ..., Sr, C)`` with r in {2, 3} and everything before them
as batch-like leading axes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "concat",
    "stack",
    "matmul",
    "dense",
    "conv",
    "pool",
    "upsample",
    "activation",
    "leaky_relu",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "seq_norm",
    "sgd_step",
    "xavier_uniform",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``_parents`` / ``_backward`` form the recorded tape: ``_backward`` maps
    the incoming output gradient to one gradient array per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into every reachable node of the tape."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    "backward() without an explicit gradient requires a scalar, "
                    f"got shape {self.shape}"
                )
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        # iterative post-order DFS; recursion depth explodes on long BPTT tapes
        while stack:
            node = stack[-1]
            if id(node) in seen:
                stack.pop()
                continue
            pending = [p for p in node._parents if id(p) not in seen]
            if pending:
                stack.extend(pending)
            else:
                seen.add(id(node))
                order.append(node)
                stack.pop()

        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if pgrad is None:
                    continue
                if parent.grad is None:
                    parent.grad = pgrad.copy() if pgrad.base is not None else pgrad
                else:
                    parent.grad = parent.grad + pgrad

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return _binary(self, _wrap(other), np.add, lambda g, a, b: (g, g))

    def __radd__(self, other):
        return _wrap(other).__add__(self)

    def __sub__(self, other):
        return _binary(self, _wrap(other), np.subtract, lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _wrap(other).__sub__(self)

    def __mul__(self, other):
        return _binary(
            self, _wrap(other), np.multiply, lambda g, a, b: (g * b, g * a)
        )

    def __rmul__(self, other):
        return _wrap(other).__mul__(self)

    def __truediv__(self, other):
        return _binary(
            self,
            _wrap(other),
            np.divide,
            lambda g, a, b: (g / b, -g * a / (b * b)),
        )

    def __rtruediv__(self, other):
        return _wrap(other).__truediv__(self)

    def __neg__(self):
        return _unary(self, lambda x: -x, lambda g, x, y: -g)

    def __pow__(self, c):
        if not isinstance(c, (int, float)):
            raise TypeError("only constant exponents are supported")
        return _unary(
            self, lambda x: x**c, lambda g, x, y: g * c * np.power(x, c - 1)
        )

    def __getitem__(self, idx):
        fancy = any(
            isinstance(part, (np.ndarray, list))
            for part in (idx if isinstance(idx, tuple) else (idx,))
        )

        def bwd(g, x, y):
            gx = np.zeros_like(x)
            if fancy:
                np.add.at(gx, idx, g)  # repeated indices must accumulate
            else:
                gx[idx] += g
            return gx

        return _unary(self, lambda x: x[idx], bwd)

    # -- shape manipulation ---------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        return _unary(
            self, lambda x: x.reshape(shape), lambda g, x, y: g.reshape(orig)
        )

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        inv = np.argsort(axes)
        return _unary(
            self,
            lambda x: np.transpose(x, axes),
            lambda g, x, y: np.transpose(g, inv),
        )

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        orig = self.data.shape

        def bwd(g, x, y):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, _norm_axes(axis, len(orig)))
            return np.broadcast_to(g, orig).copy()

        return _unary(
            self, lambda x: np.sum(x, axis=axis, keepdims=keepdims), bwd
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        orig = self.data.shape
        n = self.data.size if axis is None else int(
            np.prod([orig[a] for a in _norm_axes(axis, len(orig))])
        )

        def bwd(g, x, y):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, _norm_axes(axis, len(orig)))
            return np.broadcast_to(g / n, orig).copy()

        return _unary(
            self, lambda x: np.mean(x, axis=axis, keepdims=keepdims), bwd
        )


class Parameter:
    """Named trainable tensor with a classical-momentum buffer."""

    __slots__ = ("name", "tensor", "momentum_buffer")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.momentum_buffer = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unary(x: Tensor, fwd, bwd) -> Tensor:
    y = fwd(x.data)
    return _make(y, (x,), lambda g, xd=x.data, yd=y: (bwd(g, xd, yd),))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out axes that numpy broadcasting introduced or expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a: Tensor, b: Tensor, fwd, bwd) -> Tensor:
    y = fwd(a.data, b.data)

    def backward(g, ad=a.data, bd=b.data):
        ga, gb = bwd(g, ad, bd)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(y, (a, b), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(y, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    y = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _make(y, tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics on leading axes."""
    a, b = _wrap(a), _wrap(b)
    y = np.matmul(a.data, b.data)

    def backward(g, ad=a.data, bd=b.data):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(y, (a, b), backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` over the trailing axis.

    ``x`` may be a single flattened vector or a batch of them.
    """
    x, weights, bias = _wrap(x), _wrap(weights), _wrap(bias)
    if x.shape[-1] != weights.shape[0]:
        raise ValueError(
            f"dense: input length {x.shape[-1]} does not match weight "
            f"rows {weights.shape[0]}"
        )
    if weights.shape[1] != bias.shape[0]:
        raise ValueError(
            f"dense: weight columns {weights.shape[1]} do not match bias "
            f"length {bias.shape[0]}"
        )
    squeeze = x.ndim == 1
    xm = x.reshape(1, -1) if squeeze else x
    y = matmul(xm, weights) + bias
    return y.reshape(-1) if squeeze else y


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return _unary(
        x,
        lambda v: np.where(v > 0, v, slope * v),
        lambda g, v, y: g * np.where(v > 0, 1.0, slope),
    )


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0 (hinge convention)
    return _unary(
        x,
        lambda v: np.maximum(v, 0.0),
        lambda g, v, y: g * (v > 0),
    )


def sigmoid(x: Tensor) -> Tensor:
    def fwd(v):
        # exp of -|v| cannot overflow; both branches share it
        e = np.exp(-np.abs(v))
        return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    return _unary(x, fwd, lambda g, v, y: g * y * (1.0 - y))


def tanh(x: Tensor) -> Tensor:
    return _unary(x, np.tanh, lambda g, v, y: g * (1.0 - y * y))


_ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "relu": lambda x, slope=0.0: relu(x),
    "sigmoid": lambda x, slope=0.0: sigmoid(x),
    "tanh": lambda x, slope=0.0: tanh(x),
}


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """Elementwise nonlinearity; ``slope`` only applies to leaky_relu."""
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation kind {kind!r}")
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    return _ACTIVATIONS[kind](x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    def fwd(v):
        shifted = v - np.max(v, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g, v, y):
        return y * (g - np.sum(g * y, axis=axis, keepdims=True))

    return _unary(x, fwd, bwd)


# ---------------------------------------------------------------------------
# convolution / pooling / upsampling
# ---------------------------------------------------------------------------


def _conv_pads(spatial, ksp, stride, padding):
    if padding == "valid":
        return [(0, 0)] * len(spatial)
    if padding != "same":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    pads = []
    for s, k in zip(spatial, ksp):
        out = -(-s // stride)
        total = max((out - 1) * stride + k - s, 0)
        pads.append((total // 2, total - total // 2))
    return pads


def _conv_windows(xp: np.ndarray, ksp, stride, nlead):
    # sliding_window_view appends window axes last: (..., O1..Or, C, k1..kr)
    r = len(ksp)
    axes = tuple(range(nlead, nlead + r))
    w = sliding_window_view(xp, ksp, axis=axes)
    if stride > 1:
        sl = (
            (slice(None),) * nlead
            + (slice(None, None, stride),) * r
            + (Ellipsis,)
        )
        w = w[sl]
    return w


def conv(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """N-d cross-correlation over the trailing spatial+channel axes.

    ``x``: (..., S1..Sr, Cin), ``kernel``: (k1..kr, Cin, Cout) with r in
    {2, 3}. Leading axes are treated as batch. Gradients flow to both the
    input and the kernel.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    r = kernel.ndim - 2
    if r not in (2, 3):
        raise ValueError(f"conv kernel must have spatial rank 2 or 3, got {r}")
    if x.ndim < r + 1:
        raise ValueError(
            f"conv input rank {x.ndim} too small for kernel spatial rank {r}"
        )
    ksp = kernel.shape[:r]
    cin, cout = kernel.shape[r], kernel.shape[r + 1]
    if x.shape[-1] != cin:
        raise ValueError(
            f"conv: input has {x.shape[-1]} channels but kernel expects {cin}"
        )
    if stride < 1:
        raise ValueError(f"conv stride must be >= 1, got {stride}")
    spatial = x.shape[-r - 1 : -1]
    if padding == "valid" and any(s < k for s, k in zip(spatial, ksp)):
        raise ValueError(
            f"conv: spatial extents {spatial} smaller than kernel {ksp} "
            "with valid padding"
        )
    nlead = x.ndim - r - 1
    pads = _conv_pads(spatial, ksp, stride, padding)

    xp = np.pad(x.data, [(0, 0)] * nlead + pads + [(0, 0)])
    w = _conv_windows(xp, ksp, stride, nlead)
    # contract (C, k1..kr) of the windows with (k1..kr -> C) of the kernel
    y = np.tensordot(
        w, kernel.data, axes=(list(range(w.ndim - r - 1, w.ndim)), [r] + list(range(r)))
    )

    def backward(g, xshape=x.shape, kd=kernel.data):
        # kernel gradient: contract windows with g over batch+output axes
        nbatch = g.ndim - 1
        gk = np.tensordot(w, g, axes=(list(range(nbatch)), list(range(nbatch))))
        # gk axes: (C, k1..kr, Cout) -> (k1..kr, C, Cout)
        gk = np.moveaxis(gk, 0, r)
        # input gradient: scatter each kernel offset back onto the padded grid
        gxp = np.zeros(xp.shape, dtype=np.float64)
        osp = g.shape[nlead:-1]
        for offset in np.ndindex(*ksp):
            contrib = np.tensordot(g, kd[offset], axes=([-1], [-1]))
            sl = tuple(
                slice(o, o + stride * n, stride) for o, n in zip(offset, osp)
            )
            gxp[(slice(None),) * nlead + sl + (slice(None),)] += contrib
        crop = tuple(
            slice(p[0], p[0] + s) for p, s in zip(pads, spatial)
        )
        gx = gxp[(slice(None),) * nlead + crop + (slice(None),)]
        return gx, gk

    return _make(y, (x, kernel), backward)


def _pool_reshape(shape, r, window):
    lead, spatial, c = shape[: -r - 1], shape[-r - 1 : -1], shape[-1]
    inner = []
    for s in spatial:
        inner.extend((s // window, window))
    return lead + tuple(inner) + (c,), lead, spatial, c


def pool(x: Tensor, kind: str, window: int, spatial_rank: int | None = None) -> Tensor:
    """Non-overlapping max/avg pooling over the spatial axes.

    Every spatial extent must be divisible by ``window``. ``spatial_rank``
    defaults to input rank minus 2 (one leading batch-like axis assumed
    absent); pass it explicitly when leading axes are present.
    """
    x = _wrap(x)
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if window < 1:
        raise ValueError(f"pool window must be >= 1, got {window}")
    r = spatial_rank if spatial_rank is not None else x.ndim - 1
    spatial = x.shape[-r - 1 : -1]
    for s in spatial:
        if s % window != 0:
            raise ValueError(
                f"pool: spatial extent {s} not divisible by window {window}"
            )
    if window == 1:
        return _unary(x, lambda v: v.copy(), lambda g, v, y: g)

    split_shape, lead, spatial, c = _pool_reshape(x.shape, r, window)
    nlead = len(lead)
    win_axes = tuple(nlead + 2 * i + 1 for i in range(r))
    keep_axes = tuple(a for a in range(len(split_shape)) if a not in win_axes)
    perm = keep_axes + win_axes
    inv_perm = tuple(np.argsort(perm))
    out_spatial = tuple(s // window for s in spatial)
    flat_shape = lead + out_spatial + (c, window**r)

    def to_windows(v):
        return v.reshape(split_shape).transpose(perm).reshape(flat_shape)

    def from_windows(gw):
        pre = lead + out_spatial + (c,) + (window,) * r
        return gw.reshape(pre).transpose(inv_perm).reshape(x.shape)

    if kind == "avg":
        y = to_windows(x.data).mean(axis=-1)

        def backward_avg(g):
            gw = np.repeat(
                (g / window**r)[..., None], window**r, axis=-1
            )
            return (from_windows(gw),)

        return _make(y, (x,), backward_avg)

    windows = to_windows(x.data)
    arg = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward_max(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (from_windows(gw),)

    return _make(y, (x,), backward_max)


def upsample(x: Tensor, factor: int, spatial_rank: int | None = None) -> Tensor:
    """Nearest-neighbor upsampling: repeat each spatial cell ``factor`` times."""
    x = _wrap(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _unary(x, lambda v: v.copy(), lambda g, v, y: g)
    r = spatial_rank if spatial_rank is not None else x.ndim - 1
    spatial_axes = tuple(range(x.ndim - r - 1, x.ndim - 1))

    def fwd(v):
        for ax in spatial_axes:
            v = np.repeat(v, factor, axis=ax)
        return v

    def bwd(g, v, y):
        # fold each repeated block back into a sum
        for ax in spatial_axes:
            shape = g.shape[:ax] + (g.shape[ax] // factor, factor) + g.shape[ax + 1 :]
            g = g.reshape(shape).sum(axis=ax + 1)
        return g

    return _unary(x, fwd, bwd)


# ---------------------------------------------------------------------------
# sequence normalization
# ---------------------------------------------------------------------------


def seq_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per channel over every non-channel axis jointly.

    Statistics are computed across all sequences and timesteps present in
    ``x`` (population variance), then a learnable affine is applied.
    Gradients flow through the statistics.
    """
    x = _wrap(x)
    axes = tuple(range(x.ndim - 1))
    mu = x.mean(axis=axes, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    normed = centered * ((var + eps) ** -0.5)
    return normed * gamma + beta


def seq_norm_inference(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Affine normalization against frozen (running) channel statistics."""
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


# ---------------------------------------------------------------------------
# optimization / initialization
# ---------------------------------------------------------------------------


def sgd_step(
    params: Iterable[Parameter],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """Classical-momentum SGD with L2 decay folded into the gradient.

    buf <- momentum * buf + grad + weight_decay * param
    param <- param - lr * buf

    Gradients are cleared afterwards; a missing gradient is an error.
    """
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name!r} has no gradient")
    for p in params:
        grad = p.tensor.grad
        if weight_decay != 0.0:
            grad = grad + weight_decay * p.tensor.data
        np.multiply(p.momentum_buffer, momentum, out=p.momentum_buffer)
        p.momentum_buffer += grad
        p.tensor.data = p.tensor.data - lr * p.momentum_buffer
        p.tensor.grad = None


def xavier_uniform(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Xavier/Glorot uniform init.

    For convolution kernels (k1..kr, Cin, Cout) the fans include the
    receptive field; for dense weights (n, m) they are the two extents.
    """
    shape = tuple(shape)
    if len(shape) < 2:
        raise ValueError("xavier init needs at least rank 2")
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in = shape[-2] * receptive
    fan_out = shape[-1] * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
