"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op stores a ``_Node`` on its output holding the parent
tensors, a backward closure and a sequence number drawn from a global counter.
The sequence numbers define the recording order of the implicit tape;
:meth:`Tensor.backward` replays the reachable nodes in reverse recording order
and then releases them, so a second ``backward`` on the same loss fails.

There is no implicit broadcasting. Elementwise ops require identical shapes;
the only shape-polymorphic arithmetic is multiplication by a Python scalar.
"""

from __future__ import annotations

import contextlib
import itertools
from collections.abc import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateFeatureError, DimensionError, StateError

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run a block without recording anything on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    __slots__ = ("parents", "backward", "seq")

    def __init__(self, parents: tuple[Tensor, ...], backward: Callable):
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)


_CONSUMED = object()


class Tensor:
    """An n-d float array (f32 or f64) that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _DTYPES else np.float32
        dtype = np.dtype(dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        self.data = np.array(arr, dtype=dtype, copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = None

    # plumbing -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not provided")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires it.

        Gradients accumulate into existing ``.grad`` buffers, as usual.
        """
        if self._node is _CONSUMED:
            raise StateError("backward() already ran on this graph; run a new forward pass")
        if self.data.shape != ():
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")

        seed = np.ones((), dtype=self.dtype)
        if self._node is None:
            if self.requires_grad:
                self.grad = seed if self.grad is None else self.grad + seed
            self._node = _CONSUMED
            return

        nodes: dict[int, tuple[_Node, Tensor]] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node is _CONSUMED or id(node) in nodes:
                continue
            nodes[id(node)] = (node, t)
            stack.extend(node.parents)

        pending: dict[int, np.ndarray] = {id(self): seed}
        for node, out in sorted(nodes.values(), key=lambda nt: nt[0].seq, reverse=True):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                elif id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg

        for node, out in nodes.values():
            node.parents = ()
            out._node = _CONSUMED


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._node = _Node(tuple(parents), backward)
    return out


def _same_dtype(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"dtype mismatch: {dt} vs {t.dtype}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    _same_dtype(a, b)


# elementwise ------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # relu'(0) == 0
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def sqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    """Elementwise ``sqrt(a + eps)``."""
    out = np.sqrt(a.data + a.dtype.type(eps))
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


# shape ------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    _same_dtype(*ts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(ts), backward)


# reductions -------------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum(dtype=a.dtype)), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(out, (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    inv = a.dtype.type(1.0 / n)
    return _result(np.asarray(a.data.mean(dtype=a.dtype)), (a,), lambda g: (np.full(shape, g * inv, dtype=g.dtype),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: ``[B,C,H,W] -> [B,C]``."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    inv = x.dtype.type(1.0 / (H * W))
    out = x.data.mean(axis=(2, 3), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),)

    return _result(out, (x,), backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling (stride == size).

    Trailing rows/columns that do not fill a window are dropped. The gradient
    goes to the first maximal element of each window.
    """
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise DimensionError(f"max_pool2d window {size} larger than input {H}x{W}")
    xs = x.data[:, :, : Ho * size, : Wo * size]
    win = xs.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : Ho * size, : Wo * size] = (
            gw.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        )
        return (gx,)

    return _result(out, (x,), backward)


# linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _same_dtype(a, b)
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``out[b, j] = sum_i x[b, i] * weight[j, i] + bias[j]``."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(f"linear: bad ranks {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise DimensionError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    _same_dtype(x, weight, bias)
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _result(out, (x, weight, bias), backward)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, ``[B,C,H,W] * [F,C,kh,kw] -> [B,F,H',W']``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d operands, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride={stride}, padding={padding}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input {H}x{W}+{padding}")
    _same_dtype(x, kernel)

    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wflat = kernel.data.reshape(F, C * kh * kw)
    out = (cols @ wflat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    kshape = kernel.shape

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gk = (gf.T @ cols).reshape(kshape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gf @ wflat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gk

    return _result(out, (x, kernel), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat every pixel ``factor`` times along both spatial axes."""
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest expects a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


# feature ops ------------------------------------------------------------------


def l2_normalize(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale every row of ``[B,D]`` to unit Euclidean norm."""
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize expects [B,D], got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norm < min_norm):
        rows = np.flatnonzero(norm[:, 0] < min_norm).tolist()
        raise DegenerateFeatureError(f"rows {rows} have norm below {min_norm:g}")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _result(y, (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of ``[B,C]`` logits against integer targets."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B,C] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (logits.shape[0],):
        raise DimensionError(f"targets shape {targets.shape} does not match batch {logits.shape[0]}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    per_row = (np.log(se[:, 0]) + zmax[:, 0]) - z[rows, targets]
    n = z.shape[0]

    def backward(g):
        p = e / se
        p[rows, targets] -= 1
        return (p * (g / n),)

    return _result(np.asarray(per_row.mean(), dtype=z.dtype), (logits,), backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` along the first axis (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise DimensionError(f"take_rows needs a 1-d index, got shape {index.shape}")
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise ContractError(f"take_rows: index out of range for {x.shape[0]} rows")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), backward)


def batched_dot(q: Tensor, keys: Tensor) -> Tensor:
    """``out[b, n] = q[b] . keys[b, n]`` for ``q: [B,D]`` and ``keys: [B,N,D]``."""
    if q.ndim != 2 or keys.ndim != 3 or keys.shape[0] != q.shape[0] or keys.shape[2] != q.shape[1]:
        raise DimensionError(f"batched_dot: q {q.shape} vs keys {keys.shape}")
    _same_dtype(q, keys)
    qd, kd = q.data, keys.data
    out = np.einsum("bd,bnd->bn", qd, kd)

    def backward(g):
        return np.einsum("bn,bnd->bd", g, kd), np.einsum("bn,bd->bnd", g, qd)

    return _result(out, (q, keys), backward)
