"""Small define-by-run reverse-mode autodiff over dense numpy arrays.

Only the operations needed by the coordinate network, the ultrasound
renderer and the SSIM/L2 loss are provided. Every operation returns a new
:class:`Tensor` that remembers its parents and a backward rule; calling
:func:`backward` on a scalar walks the record once in reverse topological
order and returns a :class:`GradientStore`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
LOG_EPS = 1e-12

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_grad():
    """Evaluate without building a computation record."""
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Tensor:
    """Dense array node in the computation record."""

    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, _parents=(), _backward=None, _op="leaf"):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = _parents
        self.backward_fn: Callable | None = _backward
        self.id = next(_ids)
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def lift(*xs) -> list[Tensor]:
    """Wrap plain numbers/arrays as constants matching the first tensor's dtype."""
    dtype = next((x.dtype for x in xs if isinstance(x, Tensor)), None)
    if dtype is None:
        dtype = next((x.dtype for x in xs if isinstance(x, np.ndarray) and x.dtype.kind == "f"), DEFAULT_DTYPE)
    return [x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype) for x in xs]


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = is_recording() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, dtype=data.dtype, _op=op)
    return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=tuple(parents), _backward=backward, _op=op)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# binary elementwise


def add(a, b) -> Tensor:
    a, b = lift(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = lift(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = lift(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = lift(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


# ----------------------------------------------------------------------------
# unary elementwise


def neg(x) -> Tensor:
    (x,) = lift(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    (x,) = lift(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    """Natural log with the input clamped to at least ``LOG_EPS``.

    The clamp is treated as part of the function: below the floor the
    derivative is zero.
    """
    (x,) = lift(x)
    floor = x.dtype.type(LOG_EPS)
    clamped = np.maximum(x.data, floor)

    def bw(g):
        return (np.where(x.data >= floor, g / clamped, 0).astype(x.dtype),)

    return _make(np.log(clamped), (x,), bw, "log")


def sin(x) -> Tensor:
    (x,) = lift(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x) -> Tensor:
    (x,) = lift(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def tabs(x) -> Tensor:
    # abs'(0) = 0 via np.sign
    (x,) = lift(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x) -> Tensor:
    (x,) = lift(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    (x,) = lift(x)
    # split by sign to avoid overflow in exp
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    # e / (1 + e)^2 keeps full precision where 1 - out would round to 0
    slope = (e / (1 + e) ** 2).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * slope,), "sigmoid")


def square(x) -> Tensor:
    (x,) = lift(x)
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log-safe": log,
    "sin": sin,
    "cos": cos,
    "abs": tabs,
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
}


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch an elementwise operation by name (``"add"``, ``"sigmoid"``, ...)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*inputs)


def straight_through(prob, sample: np.ndarray) -> Tensor:
    """Forward value is ``sample``; backward passes the gradient to ``prob`` unchanged."""
    (prob,) = lift(prob)
    sample = np.asarray(sample, dtype=prob.dtype)
    if sample.shape != prob.shape:
        raise ShapeError("straight_through", prob.shape, sample.shape)
    return _make(sample.copy(), (prob,), lambda g: (g,), "straight_through")


# ----------------------------------------------------------------------------
# reductions and shape ops


def tsum(x) -> Tensor:
    (x,) = lift(x)
    return _make(np.asarray(x.data.sum(dtype=x.dtype)), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def tmean(x) -> Tensor:
    (x,) = lift(x)
    n = x.data.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _make(np.asarray(x.data.mean(dtype=x.dtype)), (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    (x,) = lift(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x) -> Tensor:
    (x,) = lift(x)
    return _make(x.data.T, (x,), lambda g: (g.T,), "transpose")


def getitem(x, idx) -> Tensor:
    (x,) = lift(x)
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (x,), bw, "getitem")


def matmul(a, b) -> Tensor:
    a, b = lift(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expected [m x k] @ [k x n]")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = lift(*tensors)
    ndim = ts[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError("concat", *(t.shape for t in ts), detail=f"axis {axis} out of range")
    axis %= ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != axis):
            raise ShapeError("concat", *(t.shape for t in ts), detail=f"non-concat dimensions differ on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def cumprod(x, exclusive: bool = True) -> Tensor:
    """Running product along the last axis of a 2-D tensor.

    With ``exclusive`` element ``d`` is the product of factors ``0..d-1`` and
    element 0 is 1. The backward pass uses a suffix recursion so zero
    factors are handled exactly.
    """
    (x,) = lift(x)
    if x.ndim != 2:
        raise ShapeError("cumprod", x.shape, detail="expected [W x D]")
    xs = x.data
    inclusive = np.cumprod(xs, axis=1)
    if exclusive:
        prefix = np.ones_like(xs)
        prefix[:, 1:] = inclusive[:, :-1]
        out = prefix
    else:
        prefix = np.ones_like(xs)
        prefix[:, 1:] = inclusive[:, :-1]
        out = inclusive

    def bw(g):
        depth = xs.shape[1]
        suffix = np.zeros_like(xs)
        if exclusive:
            # S_j = g_{j+1} + x_{j+1} * S_{j+1}, S_{D-1} = 0
            for j in range(depth - 2, -1, -1):
                suffix[:, j] = g[:, j + 1] + xs[:, j + 1] * suffix[:, j + 1]
        else:
            # S_j = g_j + x_{j+1} * S_{j+1}, S_{D-1} = g_{D-1}
            suffix[:, -1] = g[:, -1]
            for j in range(depth - 2, -1, -1):
                suffix[:, j] = g[:, j] + xs[:, j + 1] * suffix[:, j + 1]
        return (prefix * suffix,)

    return _make(out, (x,), bw, "cumprod")


def _correlate(image: np.ndarray, kernel: np.ndarray, mode: str) -> np.ndarray:
    kw, kd = kernel.shape
    if mode == "same":
        image = np.pad(image, ((kw // 2, kw // 2), (kd // 2, kd // 2)))
    elif mode == "full":
        image = np.pad(image, ((kw - 1, kw - 1), (kd - 1, kd - 1)))
    windows = sliding_window_view(image, kernel.shape)
    return np.einsum("ijkl,kl->ij", windows, kernel, optimize=True)


def conv2d(image, kernel: np.ndarray, mode: str = "same") -> Tensor:
    """2-D correlation of a tensor with a constant kernel.

    ``mode="same"`` zero-pads so the output keeps the input shape (odd kernels
    only); ``mode="valid"`` keeps only fully overlapped positions.
    """
    (image,) = lift(image)
    kernel = np.asarray(kernel, dtype=image.dtype)
    if image.ndim != 2 or kernel.ndim != 2:
        raise ShapeError("conv2d", image.shape, kernel.shape, detail="expected 2-D image and kernel")
    if mode == "same":
        if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ShapeError("conv2d", image.shape, kernel.shape, detail="kernel dimensions must be odd")
    elif mode == "valid":
        if kernel.shape[0] > image.shape[0] or kernel.shape[1] > image.shape[1]:
            raise ShapeError("conv2d", image.shape, kernel.shape, detail="kernel larger than image")
    else:
        raise ValueError(f"unknown conv2d mode {mode!r}")
    flipped = kernel[::-1, ::-1]

    def bw(g):
        return (_correlate(g, flipped, "same" if mode == "same" else "full"),)

    return _make(_correlate(image.data, kernel, mode), (image,), bw, "conv2d")


def conv2d_same(image, kernel: np.ndarray) -> Tensor:
    return conv2d(image, kernel, "same")


# ----------------------------------------------------------------------------
# reverse pass


class GradientStore:
    """Gradients keyed by node id; index with the tensor itself."""

    def __init__(self):
        self.grads: dict[int, np.ndarray] = {}
        self.visits: dict[int, int] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self.grads[t.id]

    def get(self, t: Tensor, default=None):
        return self.grads.get(t.id, default)

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self.grads

    def __len__(self) -> int:
        return len(self.grads)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_all: bool = False) -> GradientStore:
    """Reverse pass from a scalar ``loss``.

    Returns gradients for every leaf that requires grad (and for every
    intermediate node when ``retain_all``). Each node's backward rule runs
    exactly once.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    store = GradientStore()
    if not loss.requires_grad:
        return store
    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        store.visits[node.id] = store.visits.get(node.id, 0) + 1
        if not node.parents or retain_all:
            store.grads[node.id] = g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = pg
    return store


def gradcheck(
    f: Callable[[Sequence[Tensor]], Tensor],
    point: Sequence[np.ndarray] | np.ndarray,
    epsilon: float = 1e-6,
    dtype=np.float64,
    oracle_dtype=np.float64,
    rel_floor: float = 0.0,
) -> float:
    """Largest component-wise relative error between analytic and central-difference gradients.

    ``f`` receives a list of tensors (one per array in ``point``) and must
    return a scalar tensor. The analytic gradient is computed in ``dtype``;
    the finite differences are evaluated in ``oracle_dtype`` so a 32-bit
    analytic pass is compared against a reference that is not itself
    swamped by rounding; the point is rounded to ``dtype`` before either
    pass. Relative error uses ``max(|a|, |b|, 1e-8)`` as the
    denominator; ``rel_floor`` raises that floor to a fraction of the
    largest numeric component of the same input, so entries far below the
    difference quotient's resolution are judged on an absolute scale.
    """
    arrays = [point] if isinstance(point, np.ndarray) else list(point)
    # both passes see the same point: round to the analytic precision first
    arrays = [np.asarray(a, dtype=dtype).astype(oracle_dtype) for a in arrays]
    leaves = [Tensor(a.astype(dtype), requires_grad=True, dtype=dtype) for a in arrays]
    store = backward(f(leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = store.get(leaf, np.zeros(arrays[k].shape)).astype(np.float64)
        flat = arrays[k].reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                up = float(f([Tensor(a, dtype=oracle_dtype) for a in arrays]).data)
            flat[i] = orig - epsilon
            with no_grad():
                down = float(f([Tensor(a, dtype=oracle_dtype) for a in arrays]).data)
            flat[i] = orig
            numeric[i] = (up - down) / (2 * epsilon)
        a = analytic.reshape(-1)
        floor = max(1e-8, rel_floor * float(np.abs(numeric).max(initial=0.0)))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        if flat.size:
            worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst


def parameters_grads(store: GradientStore, params: Iterable[Tensor]) -> list[np.ndarray]:
    return [store.get(p, np.zeros_like(p.data)) for p in params]
