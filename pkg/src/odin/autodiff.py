"""Minimal tape-style reverse-mode differentiation over float64 numpy arrays.

Only the operations needed by the backbone, heads and contrastive loss are
provided. Every op builds a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class DegenerateNormWarning(RuntimeWarning):
    """Emitted when l2_normalize meets an exactly-zero vector."""


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 array. Leaves created by the user have no
    parents; set ``requires_grad`` to have ``backward`` report a gradient.
    """

    __slots__ = ("data", "parents", "_backward", "requires_grad", "grad", "_consumed")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad: np.ndarray | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(x) -> Tensor:
    """Wrap an array as a differentiable leaf."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data, parents, backward) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, parents, backward)


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # gradient at exactly 0 is 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# -- reductions ----------------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _make(
        x.data.sum(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand(g, x.shape, axis, keepdims).copy(),),
    )


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; ties split the gradient evenly."""
    x = as_tensor(x)
    out = x.data.max(axis=axis, keepdims=True)
    hit = (x.data == out).astype(np.float64)
    hit /= hit.sum(axis=axis, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * hit,)

    return _make(out if keepdims else np.squeeze(out, axis), (x,), backward)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along ``axis``, stabilised by subtracting the max."""
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - shift)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + shift
    soft = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out if keepdims else np.squeeze(out, axis), (x,), backward)


# -- shape manipulation ----------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take(x, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


# -- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul extents {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """Affine map along the last axis: ``x @ weight + bias``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias {bias.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, weight.shape[0])
    out = flat @ weight.data + bias.data

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        return (
            (g2 @ weight.data.T).reshape(x.shape),
            flat.T @ g2,
            g2.sum(axis=0),
        )

    return _make(out.reshape(*lead, weight.shape[1]), (x, weight, bias), backward)


def l2_normalize(x, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale vectors along ``axis`` to unit length.

    An exactly-zero vector maps to zero with zero gradient and a
    :class:`DegenerateNormWarning`.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True)) + eps
    zero = norm == 0
    if zero.any():
        warnings.warn("l2_normalize of a zero vector", DegenerateNormWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, x.data / safe)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(zero, 0.0, (g - y * dot) / safe),)

    return _make(y, (x,), backward)


def _pad_amount(k: int, padding: str) -> int:
    if padding == "same":
        return k // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation over channels-last input.

    ``x`` is ``h×w×Cin`` or batched ``N×h×w×Cin``; ``kernel`` is
    ``kh×kw×Cin×Cout`` with odd spatial extents.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be kh×kw×Cin×Cout, got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel extents must be odd")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or xd.shape[-1] != cin:
        raise ShapeError(f"input {x.shape} incompatible with kernel {kernel.shape}")
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    n, hp, wp, _ = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("input smaller than kernel")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # win: n×oh×ow×cin×kh×kw -> columns ordered (kh, kw, cin) to match the kernel
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, oh, ow, cout)

    def backward(g):
        g2 = g.reshape(n * oh * ow, cout) if batched else g[None].reshape(n * oh * ow, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += gcols[
                    :, :, :, i, j
                ]
        gx = gxp[:, ph : hp - ph, pw : wp - pw]
        return (gx if batched else gx[0]), gk

    return _make(out if batched else out[0], (x, kernel), backward)


# -- backward ----------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) for every differentiable leaf under ``root``.

    Gradients are also stored on ``leaf.grad``. A graph may only be
    differentiated once; call :func:`reset` to allow another pass.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise RuntimeError("backward already called on this graph; reset() first")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    root._consumed = True
    return leaves


def reset(root: Tensor) -> None:
    """Clear leaf gradients under ``root`` and allow another backward pass."""
    for node in _topo_order(root):
        if not node.parents:
            node.grad = None
    root._consumed = False
