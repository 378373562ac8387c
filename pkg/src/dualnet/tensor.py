"""Minimal dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the dual-learner model are provided. Every
operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them; :meth:`Tensor.backward`
replays those closures in reverse topological order.

Elementwise operations require identical shapes (or a Python scalar).
Broadcasting is only available through the explicit :meth:`Tensor.broadcast_to`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericalError",
    "get_default_dtype",
    "set_default_dtype",
    "float64_mode",
    "no_grad",
    "tensor",
    "zeros",
    "ones",
    "conv2d",
    "matmul",
    "relu",
    "softmax",
    "log_softmax",
    "global_avg_pool",
    "l2_norm_squared",
    "concat",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(FloatingPointError):
    """A NaN/Inf appeared, or a quantity is numerically degenerate."""


_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype() -> type:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Temporarily create all new tensors in double precision."""
    previous = _DTYPE
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        _check_finite(arr, "tensor construction")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------ graph build
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self.data.size != 1 or self.ndim > 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -------------------------------------------------------------- operators
    def _coerce(self, other) -> "Tensor | float":
        if isinstance(other, Tensor):
            if other.shape != self.shape and other.size != 1:
                raise ShapeError(f"elementwise shapes differ: {self.shape} vs {other.shape}")
            return other
        return float(other)

    def __add__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return Tensor._make(self.data + self.data.dtype.type(other), (self,), lambda g: (g,), "add")
        if other.shape != self.shape:
            return self + other.broadcast_to(self.shape)
        return Tensor._make(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return self + (-other)
        if other.shape != self.shape:
            return self - other.broadcast_to(self.shape)
        return Tensor._make(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            c = self.data.dtype.type(other)
            return Tensor._make(self.data * c, (self,), lambda g: (g * c,), "mul")
        if other.shape != self.shape:
            return self * other.broadcast_to(self.shape)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return self * (1.0 / other)
        if other.shape != self.shape:
            return self / other.broadcast_to(self.shape)
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(out, (self, other), lambda g: (g / b, -g * out / b), "div")

    def __rtruediv__(self, other):
        return Tensor(np.full(self.shape, float(other), dtype=self.data.dtype)) / self

    def __pow__(self, exponent: float):
        p = float(exponent)
        a = self.data
        if p == 2.0:
            return Tensor._make(a * a, (self,), lambda g: (2.0 * g * a,), "square")
        return Tensor._make(a**p, (self,), lambda g: (p * g * a ** (p - 1.0),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        out = self.data[index]
        shape, dtype = self.shape, self.data.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.ascontiguousarray(out), (self,), back, "getitem")

    # ------------------------------------------------------------- unary math
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        if (a <= 0).any():
            raise NumericalError("log of non-positive value")
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        safe = np.where(out > 0, out, 1.0)

        def back(g):
            # subgradient 0 at the origin keeps all-zero columns finite
            return (np.where(out > 0, 0.5 * g / safe, 0.0).astype(out.dtype),)

        return Tensor._make(out, (self,), back, "sqrt")

    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    # ------------------------------------------------------------ reductions
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(out), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # --------------------------------------------------------- shape algebra
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose")

    @property
    def T(self):
        return self.transpose()

    def broadcast_to(self, shape):
        shape = tuple(shape)
        src = self.shape
        try:
            out = np.broadcast_to(self.data, shape)
        except ValueError as exc:
            raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
        lead = len(shape) - len(src)
        axes = tuple(range(lead)) + tuple(
            i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1
        )

        def back(g):
            return (g.sum(axis=axes, keepdims=True).reshape(src) if axes else g,)

        return Tensor._make(out, (self,), back, "broadcast")

    def take_rows(self, index) -> "Tensor":
        """Gather rows along the first axis (duplicates allowed)."""
        index = np.asarray(index, dtype=np.intp)
        shape, dtype = self.shape, self.data.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), back, "take_rows")


# ---------------------------------------------------------------- factories
def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


# ----------------------------------------------------------------- functions
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return Tensor._make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def relu(x: Tensor) -> Tensor:
    return x.relu()


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._make(out, tuple(tensors), back, "concat")


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return temperature


def log_softmax(logits: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Row-wise ``log(softmax(logits / temperature))``."""
    t = _check_temperature(temperature)
    z = logits.data / logits.data.dtype.type(t)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return ((g - soft * g.sum(axis=axis, keepdims=True)) / t,)

    return Tensor._make(out, (logits,), back, "log_softmax")


def softmax(logits: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax with temperature; rows sum to one."""
    t = _check_temperature(temperature)
    z = logits.data / logits.data.dtype.type(t)
    z = np.exp(z - z.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / t,)

    return Tensor._make(out, (logits,), back, "softmax")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    return x.mean(axis=(2, 3))


def l2_norm_squared(x: Tensor, per_sample: bool = True) -> Tensor:
    """Squared Euclidean norm, per leading-axis sample (shape [N]) or total."""
    sq = x * x
    if per_sample:
        return sq.sum(axis=tuple(range(1, x.ndim)))
    return sq.sum()


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with a [C_out, C_in, kH, kW] kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    # im2col in channel-major layout [C, kH, kW, N, Ho, Wo]
    xc = x.data.transpose(1, 0, 2, 3)
    if padding:
        xp = np.zeros((c, n, hp, wp), dtype=x.data.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = xc
    else:
        xp = xc
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + he : stride, j : j + we : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(co, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3))

    def back(g):
        gm = g.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
        gk = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + he : stride, j : j + we : stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        return (gx, gk)

    return Tensor._make(out, (x, kernel), back, "conv2d")


def iter_leaves(root: Tensor) -> Iterable[Tensor]:
    """Yield every requires_grad leaf reachable from ``root`` (for debugging)."""
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is None and node.requires_grad:
            yield node
        stack.extend(node._parents)
