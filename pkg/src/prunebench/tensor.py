"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operator records its parents and a closure mapping the output
gradient to parent gradients. :func:`gradient` walks the recorded graph
in reverse topological order. Layout for images is NHWC.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "affine",
    "conv2d",
    "relu",
    "maxpool2",
    "flatten",
    "pick",
    "softmax_cross_entropy",
    "gradient",
]


class Tensor:
    """An immutable float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> Tensor:
        return tensor_sum(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents
    out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g, needs):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g, needs: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g, needs):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward, "mul")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g, needs: (np.broadcast_to(g, shape).copy(),), "sum")


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (n, d), ``W`` (d, k), ``b`` (k,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(f"affine expects 2-d x, 2-d W, 1-d b; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine shape mismatch: {x.shape} @ {W.shape} + {b.shape}")
    out = x.data @ W.data + b.data

    def backward(g, needs):
        dx = g @ W.data.T if needs[0] else None
        dW = x.data.T @ g if needs[1] else None
        return dx, dW, g.sum(axis=0)

    return _node(out, (x, W, b), backward, "affine")


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, K: Tensor, b: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of an NHWC batch with a (kh, kw, c_in, c_out) kernel.

    ``padding="same"`` follows the usual convention of putting the odd
    pixel of padding on the bottom/right; ``"valid"`` uses no padding.
    """
    if x.data.ndim != 4 or K.data.ndim != 4 or b.data.ndim != 1:
        raise DimensionError(f"conv2d expects NHWC x, 4-d kernel, 1-d bias; got {x.shape}, {K.shape}, {b.shape}")
    n, h, w, ci = x.shape
    kh, kw, kci, co = K.shape
    if kci != ci:
        raise DimensionError(f"conv2d channel mismatch: input has {ci}, kernel expects {kci}")
    if b.shape[0] != co:
        raise DimensionError(f"conv2d bias has {b.shape[0]} entries for {co} output channels")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if padding == "same":
        pt, pb = _same_padding(h, kh, stride)
        pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ContractError(f"unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x.data
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    kd = K.data

    def window(i, j):
        return xp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :]

    def columns():
        # (n, oh, ow, ci, kh, kw) window view copied channel-last
        view = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, kh * kw * ci)

    cols2d = None
    if ci < 8:
        cols2d = columns()
        out = (cols2d @ kd.reshape(kh * kw * ci, co)).reshape(n, oh, ow, co) + b.data
    else:
        # many channels: one matmul per kernel offset beats materialising the columns
        out = np.empty((n, oh, ow, co))
        out[...] = b.data
        for i in range(kh):
            for j in range(kw):
                out += window(i, j) @ kd[i, j]

    def backward(g, needs):
        g2d = g.reshape(n * oh * ow, co)
        dk = dx = None
        if needs[1]:
            cols = cols2d if cols2d is not None else columns()
            dk = (cols.T @ g2d).reshape(kh, kw, ci, co)
        if needs[0]:
            dxp = np.zeros((n, hp, wp, ci))
            if cols2d is not None:
                dcols = (g2d @ kd.reshape(kh * kw * ci, co).T).reshape(n, oh, ow, kh, kw, ci)
            for i in range(kh):
                for j in range(kw):
                    part = dcols[:, :, :, i, j, :] if cols2d is not None else g @ kd[i, j].T
                    dxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :] += part
            dx = dxp[:, pt:pt + h, pl:pl + w, :]
        return dx, dk, g2d.sum(axis=0)

    return _node(out, (x, K, b), backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _node(np.maximum(x.data, 0.0), (x,), lambda g, needs: (g * active,), "relu")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first maximal cell."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 expects NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c)
    out = blocks.max(axis=(2, 4))

    def backward(g, needs):
        # window cells in row-major order (top-left, top-right, bottom-left, bottom-right)
        win = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        arg = win.argmax(axis=-1)
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        dx = gw.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (dx,)

    return _node(out, (x,), backward, "maxpool2")


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(x.data.reshape(shape[0], -1), (x,), lambda g, needs: (g.reshape(shape),), "flatten")


def pick(z: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[i] = z[i, index[i]]``."""
    index = np.asarray(index, dtype=np.int64)
    if z.data.ndim != 2 or index.shape != (z.shape[0],):
        raise DimensionError(f"pick expects (n, C) and (n,) index; got {z.shape}, {index.shape}")
    rows = np.arange(z.shape[0])

    def backward(g, needs):
        dz = np.zeros_like(z.data)
        dz[rows, index] = g
        return (dz,)

    return _node(z.data[rows, index], (z,), backward, "pick")


def _check_labels(labels, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"labels must lie in [0, {classes})")
    return labels


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``softmax(logits)`` against integer labels.

    ``reduction="sum"`` keeps per-sample gradients unscaled, which is what
    batched attacks want.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (n, C), got {logits.shape}")
    n, classes = logits.shape
    labels = _check_labels(labels, n, classes)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = -logp[rows, labels].sum() * scale

    def backward(g, needs):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (scale * g),)

    return _node(np.asarray(loss), (logits,), backward, "xent")


def gradient(loss: Tensor, wrt: Iterable[Tensor]) -> dict[Tensor, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``wrt``.

    Leaves that do not influence ``loss`` get an all-zero gradient. Only
    branches leading to a requested leaf are differentiated.
    """
    if loss.data.size != 1:
        raise ContractError(f"gradient needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt)
    targets = {id(t) for t in wrt}

    # forward topological order (parents before children), iterative DFS
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if id(p) not in seen)

    needed: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in needed for p in node._parents):
            needed.add(id(node))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        key = id(node)
        if key not in needed or node._backward is None:
            continue
        g = grads.get(key) if key in targets else grads.pop(key, None)
        if g is None:
            continue
        needs = tuple(id(p) in needed for p in node._parents)
        for parent, need, pg in zip(node._parents, needs, node._backward(g, needs)):
            if not need or pg is None:
                continue
            pk = id(parent)
            grads[pk] = grads[pk] + pg if pk in grads else pg
    return {leaf: Tensor(grads.get(id(leaf), np.zeros_like(leaf.data))) for leaf in wrt}
