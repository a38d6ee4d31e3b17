"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a closure mapping the
output gradient to input gradients. :meth:`Tensor.backward` walks the recorded
graph once in reverse topological order and then releases it.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from cpgan import kernels

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "conv2d",
    "matmul",
    "softmax",
    "log_softmax",
    "upsample",
    "group_norm",
    "relu",
    "leaky_relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "square",
    "mean",
    "sum",
    "log",
    "clip",
    "rotate180",
    "reshape",
    "transpose",
    "concat",
    "take",
    "elementwise",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{rg})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- differentiation -----------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf tensor that requires it.

        Gradients accumulate into existing ``.grad`` buffers. The recorded
        graph is released afterwards; a second call raises.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("graph already consumed by an earlier backward()")
        if not self.requires_grad:
            self._consumed = True
            return

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
            if node._consumed and node is not self:
                raise RuntimeError("graph already consumed by an earlier backward()")
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                in_grads = node._backward(g)
                for p, pg in zip(node._parents, in_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True
        self._consumed = True


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str,
            check: bool = True) -> Tensor:
    if check:
        out = Tensor(data)
    else:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        out._consumed = False
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# pointwise


def add(a, b) -> Tensor:
    """Elementwise sum; operands must share a shape (scalars excepted)."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def square(t: Tensor) -> Tensor:
    d = t.data
    return _result(d * d, (t,), lambda g: (2.0 * d * g,), "square")


def relu(t: Tensor) -> Tensor:
    pos = t.data > 0
    return _result(np.maximum(t.data, 0), (t,), lambda g: (g * pos,), "relu")


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    pos = t.data > 0
    scale = np.where(pos, 1.0, slope).astype(t.dtype)
    return _result(t.data * scale, (t,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(t.dtype)
    return _result(y, (t,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log(t: Tensor) -> Tensor:
    d = t.data
    if (d <= 0).any():
        raise FloatingPointError("log of non-positive value")
    return _result(np.log(d), (t,), lambda g: (g / d,), "log")


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    d = t.data
    inside = (d >= lo) & (d <= hi)
    return _result(np.clip(d, lo, hi), (t,), lambda g: (g * inside,), "clip")


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = t.shape
    out = t.data.mean(axis=axis, keepdims=keepdims)
    count = t.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(t.dtype),)

    return _result(np.asarray(out, dtype=t.dtype), (t,), backward, "mean")


def sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = t.shape
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(t.dtype),)

    return _result(np.asarray(out, dtype=t.dtype), (t,), backward, "sum")


_UNARY = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "square": square,
    "mean": mean,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch a pointwise op by name."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        if isinstance(a, Tensor) and isinstance(b, Tensor) and a.shape != b.shape:
            raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# structural


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    old = t.shape
    return _result(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),), "reshape")


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(t.data.transpose(axes)), (t,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take(t: Tensor, index: Sequence[int]) -> Tensor:
    """Select rows along the leading axis."""
    idx = np.asarray(index, dtype=np.intp)
    shape = t.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(t.data[idx], (t,), backward, "take")


def rotate180(t: Tensor) -> Tensor:
    """Reverse both trailing spatial axes (a 180 degree rotation)."""
    if t.ndim < 2:
        raise ShapeError(f"rotate180 needs a spatial tensor, got shape {t.shape}")
    out = np.ascontiguousarray(t.data[..., ::-1, ::-1])
    return _result(out, (t,), lambda g: (np.ascontiguousarray(g[..., ::-1, ::-1]),), "rotate180")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes must agree)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), backward, "matmul")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {t.shape}")
    if axis in (-1, t.ndim - 1):
        y = kernels.softmax_lastaxis(t.data)
        return _result(y, (t,), lambda g: (kernels.softmax_lastaxis_grad(y, g),), "softmax", check=False)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    # exp of max-shifted finite input is finite and the row sum is >= 1
    return _result(y, (t,), backward, "softmax", check=False)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {t.shape}")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (t,), backward, "log_softmax")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with an OIKK kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    xd, wd = x.data, weight.data
    pointwise = kh == kw == 1 and stride == 1 and pad == 0
    if pointwise:
        oh, ow = h, w
        cols = xd.reshape(n, c, h * w)
    else:
        cols, oh, ow = kernels.im2col(xd, kh, kw, stride, pad)
    wm = wd.reshape(o, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, oh, ow)

    def backward(g):
        g = g.reshape(n, o, oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        if x.requires_grad:
            gcols = np.matmul(wm.T, g)
            gx = gcols.reshape(xd.shape) if pointwise else kernels.col2im(gcols, xd.shape, kh, kw, stride, pad)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalisation over channel groups, then a per-channel affine map."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine parameters must have shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dh = (g * gamma.data[:, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (dh - dh.mean(axis=2, keepdims=True) - xh * (dh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "group_norm")


_UPSAMPLE_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _interp_matrix(n: int, factor: int, dtype) -> np.ndarray:
    key = (n, factor, np.dtype(dtype).str)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = np.zeros((n * factor, n), dtype=np.float64)
        for o in range(n * factor):
            src = max((o + 0.5) / factor - 0.5, 0.0)
            i0 = min(int(np.floor(src)), n - 1)
            i1 = min(i0 + 1, n - 1)
            lam = src - i0
            m[o, i0] += 1.0 - lam
            m[o, i1] += lam
        m = m.astype(dtype)
        _UPSAMPLE_CACHE[key] = m
    return m


def upsample(t: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling of the spatial axes (half-pixel centres, edge clamped)."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if t.ndim != 4:
        raise ShapeError(f"upsample expects NCHW, got {t.shape}")
    if factor == 1:
        return _result(t.data.copy(), (t,), lambda g: (g,), "upsample")
    _, _, h, w = t.shape
    uh = _interp_matrix(h, factor, t.dtype)
    uw = _interp_matrix(w, factor, t.dtype)
    out = np.matmul(np.matmul(uh, t.data), uw.T)
    return _result(out, (t,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),), "upsample")


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam over a name -> Tensor parameter mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for k, g in grads.items():
            p = self.params[k]
            if g.shape != p.shape:
                raise ShapeError(f"adam: gradient for {k} has shape {g.shape}, parameter {p.shape}")
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam) -> dict[str, Tensor]:
    state.step(grads)
    return params


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"CPGN1"


def save_checkpoint(path: str | Path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write parameters atomically (temp file then rename)."""
    path = Path(path)
    chunks = [_MAGIC]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:5] != _MAGIC:
        raise ValueError(f"{path}: bad magic at byte offset 0")
    out: dict[str, np.ndarray] = {}
    pos = 5

    def need(k: int) -> None:
        if pos + k > len(buf):
            raise ValueError(f"{path}: truncated at byte offset {pos}")

    while pos < len(buf):
        need(4)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(nlen)
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        need(4)
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        need(4 * count)
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    return out


def parameters_to_dtype(params: Iterable[Tensor], dtype) -> None:
    for p in params:
        p.data = p.data.astype(dtype)
