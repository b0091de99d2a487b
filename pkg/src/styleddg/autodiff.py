"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A :class:`Tensor` records the operation that produced it together with a
closure that pushes its gradient to its inputs.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order.  The graph is rebuilt on every forward pass; nothing is cached.

Only the handful of operations a small CNN and the style operators need are
provided.  Rank-4 activations use the (batch, channel, height, width) layout.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InputError, ShapeError, StateError

__all__ = [
    "Tensor",
    "tensor",
    "concat",
    "safe_sqrt",
    "relu",
    "spatial_var",
    "restyle",
    "conv2d",
    "conv2d_reference",
    "avg_pool2d",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array with an optional gradient buffer and graph linkage."""

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _prev: Sequence["Tensor"] = (),
        _op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)
        self.grad: Optional[np.ndarray] = None
        self._prev = tuple(_prev)
        self._op = _op
        self._backward: Callable[[np.ndarray], None] = lambda g: None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph traversal --------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise StateError("backward() needs a scalar output")
        if not self._prev:
            raise StateError("backward() called on a tensor with no recorded forward graph")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._prev:
                node._accumulate(g)
                continue
            node._pending = grads  # consumed by _send
            node._backward(g)
            del node._pending

    def _send(self, parent: "Tensor", g: np.ndarray) -> None:
        if not parent.requires_grad:
            return
        grads = self._pending
        key = id(parent)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data + other.data, _prev=(self, other), _op="add")

        def _bw(g):
            out._send(self, _unbroadcast(g, self.shape))
            out._send(other, _unbroadcast(g, other.shape))

        out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, _prev=(self,), _op="neg")
        out._backward = lambda g: out._send(self, -g)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data * other.data, _prev=(self, other), _op="mul")

        def _bw(g):
            out._send(self, _unbroadcast(g * other.data, self.shape))
            out._send(other, _unbroadcast(g * self.data, other.shape))

        out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data / other.data, _prev=(self, other), _op="div")

        def _bw(g):
            out._send(self, _unbroadcast(g / other.data, self.shape))
            out._send(other, _unbroadcast(-g * self.data / other.data**2, other.shape))

        out._backward = _bw
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def square(self) -> "Tensor":
        out = Tensor(self.data * self.data, _prev=(self,), _op="square")
        out._backward = lambda g: out._send(self, 2.0 * self.data * g)
        return out

    # -- reductions and reshaping ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _prev=(self,), _op="sum")

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            out._send(self, np.broadcast_to(g, self.shape))

        out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        out = Tensor(self.data.reshape(shape), _prev=(self,), _op="reshape")
        out._backward = lambda g: out._send(self, g.reshape(self.shape))
        return out

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            raise InputError("index with integer arrays or slices, not tensors")
        out = Tensor(self.data[idx], _prev=(self,), _op="getitem")
        direct = _is_basic_index(idx) or _is_unique_row_index(idx)

        def _bw(g):
            full = np.zeros_like(self.data)
            if direct:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            out._send(self, full)

        out._backward = _bw
        return out


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def _is_unique_row_index(idx) -> bool:
    # a single repeat-free integer array along axis 0 can be scattered without add.at
    if isinstance(idx, tuple):
        return False
    a = np.asarray(idx)
    if a.dtype.kind not in "iu" or a.ndim != 1:
        return False
    return np.unique(a).size == a.size


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _prev=parts, _op="concat")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def _bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out._send(p, g[tuple(sl)])

    out._backward = _bw
    return out


def safe_sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    """``sqrt(x + eps)`` with a zero subgradient where the argument is zero.

    Keeps gradients finite for degenerate inputs (constant maps, singleton
    batches) without perturbing the forward value when ``eps == 0``.
    """
    arg = np.maximum(x.data + eps, 0.0)
    val = np.sqrt(arg)
    out = Tensor(val, _prev=(x,), _op="sqrt")

    def _bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(val > 0.0, 0.5 / val, 0.0)
        out._send(x, g * d)

    out._backward = _bw
    return out


def spatial_var(x: Tensor) -> Tensor:
    """Population variance over the two trailing (spatial) axes, shape (B, C)."""
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {x.shape}")
    n = x.shape[2] * x.shape[3]
    centered = x.data - x.data.mean(axis=(2, 3), keepdims=True)
    out = Tensor((centered * centered).mean(axis=(2, 3)), _prev=(x,), _op="spatial_var")

    def _bw(g):
        # the mean's own gradient term vanishes because centered sums to zero
        out._send(x, g[:, :, None, None] * (2.0 / n) * centered)

    out._backward = _bw
    return out


def restyle(x: Tensor, mu, sigma, mu_t, sigma_t) -> Tensor:
    """``(x - mu) / sigma * sigma_t + mu_t`` per (instance, channel), as one node.

    ``mu``/``sigma`` are (B, C); the targets may be (B, C) or (C,).  Any
    argument may be a plain array, in which case it receives no gradient.
    """
    x, mu, sigma, mu_t, sigma_t = (_as_tensor(v) for v in (x, mu, sigma, mu_t, sigma_t))
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {x.shape}")
    if mu.shape != x.shape[:2] or sigma.shape != x.shape[:2]:
        raise ShapeError("mu and sigma must be (B, C)")

    def col(t):
        return t.data.reshape((1, -1, 1, 1) if t.ndim == 1 else t.shape + (1, 1))

    s = col(sigma_t) / col(sigma)
    xhat = (x.data - col(mu)) / col(sigma)
    out = Tensor(xhat * col(sigma_t) + col(mu_t), _prev=(x, mu, sigma, mu_t, sigma_t), _op="restyle")

    def _bw(g):
        s2 = s[:, :, 0, 0]
        gsum = g.sum(axis=(2, 3))
        gx = (g * xhat).sum(axis=(2, 3))
        if x.requires_grad:
            out._send(x, g * s)
        if mu.requires_grad:
            out._send(mu, -gsum * s2)
        if sigma.requires_grad:
            out._send(sigma, -gx * s2)
        if mu_t.requires_grad:
            out._send(mu_t, gsum if mu_t.ndim == 2 else gsum.sum(axis=0))
        if sigma_t.requires_grad:
            out._send(sigma_t, gx if sigma_t.ndim == 2 else gx.sum(axis=0))

    out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = Tensor(x.data * mask, _prev=(x,), _op="relu")
    out._backward = lambda g: out._send(x, g * mask)
    return out


def _check_rank4(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects a rank-4 (B, C, H, W) tensor, got shape {x.shape}")


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv_args(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, pad: int) -> None:
    _check_rank4(x, "conv2d input")
    if w.ndim != 4:
        raise ShapeError(f"kernel must be (out, in, kh, kw), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel in-channels {w.shape[1]} != input channels {x.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0")
    if _conv_out(x.shape[2], w.shape[2], stride, pad) < 1 or _conv_out(x.shape[3], w.shape[3], stride, pad) < 1:
        raise ShapeError("kernel larger than padded input")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.

    Columns are laid out as (C*kh*kw, B*Ho*Wo) and filled one kernel offset
    at a time, which avoids a six-axis transpose copy.
    """
    _check_conv_args(x, w, b, stride, pad)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = _conv_out(H, kh, stride, pad), _conv_out(W, kw, stride, pad)
    if pad:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
        xp[:, :, pad : pad + H, pad : pad + W] = x.data
    else:
        xp = x.data
    cols = np.empty((C, kh, kw, B, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    wmat = w.data.reshape(O, C * kh * kw)
    res = wmat @ cols
    if b is not None:
        res += b.data[:, None]
    prev = (x, w) if b is None else (x, w, b)
    out = Tensor(np.ascontiguousarray(res.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)), _prev=prev, _op="conv2d")

    def _bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        if w.requires_grad:
            out._send(w, (gm @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            out._send(b, gm.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(C, kh, kw, B, Ho, Wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            out._send(x, dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp)

    out._backward = _bw
    return out


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct nested-loop convolution; slow, used as the oracle for :func:`conv2d`."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = _conv_out(H, kh, stride, pad), _conv_out(W, kw, stride, pad)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + H, pad : pad + W] = x
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for r in range(Ho):
                for s in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[n, c, r * stride + i, s * stride + j] * w[o, c, i, j]
                    out[n, o, r, s] = acc
    return out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; trailing rows/cols are dropped."""
    _check_rank4(x, "avg_pool2d input")
    B, C, H, W = x.shape
    if k < 1 or H < k or W < k:
        raise ShapeError(f"pool size {k} does not fit spatial dims {(H, W)}")
    Ho, Wo = H // k, W // k
    acc = np.zeros((B, C, Ho, Wo))
    for i in range(k):
        for j in range(k):
            acc += x.data[:, :, i : Ho * k : k, j : Wo * k : k]
    out = Tensor(acc / (k * k), _prev=(x,), _op="avg_pool2d")

    def _bw(g):
        blocks = np.empty((B, C, Ho, k, Wo, k))
        blocks[...] = (g / (k * k))[:, :, :, None, :, None]
        blocks = blocks.reshape(B, C, Ho * k, Wo * k)
        if (Ho * k, Wo * k) != (H, W):
            full = np.zeros_like(x.data)
            full[:, :, : Ho * k, : Wo * k] = blocks
            blocks = full
        out._send(x, blocks)

    out._backward = _bw
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C, 1, 1)."""
    _check_rank4(x, "global_avg_pool input")
    return x.mean(axis=(2, 3), keepdims=True)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` for a (batch, in) input; rank-4 inputs are flattened."""
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"weight {w.shape} incompatible with input features {x.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
    res = x.data @ w.data.T
    if b is not None:
        res = res + b.data
    prev = (x, w) if b is None else (x, w, b)
    out = Tensor(res, _prev=prev, _op="linear")

    def _bw(g):
        out._send(x, g @ w.data)
        out._send(w, g.T @ x.data)
        if b is not None:
            out._send(b, g.sum(axis=0))

    out._backward = _bw
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must be integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = Tensor(-logp[rows, labels].mean(), _prev=(logits,), _op="xent")

    def _bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        out._send(logits, g * p / n)

    out._backward = _bw
    return out
