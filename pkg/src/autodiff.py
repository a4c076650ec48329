"""
Tape-based reverse-mode automatic differentiation over numpy arrays.

Every backward rule is expressed with differentiable Tensor ops, so a
gradient computed with ``create_graph=True`` is itself part of the graph
and can be differentiated again (needed for the gradient penalty).
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import NumericError, debug_log, is_debug

ArrayLike = Union["Tensor", np.ndarray, float, int]

_DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
GRAD_NORM_GUARD = 1e-12


class ShapeError(ValueError):
    """Input shapes do not conform to an op's shape rule."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from non-float data."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(f"Unsupported dtype: {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class _State(threading.local):
    def __init__(self):
        self.graphs: List["Graph"] = []
        self.recording = True


_state = _State()


class Tensor:
    """An n-dimensional real array that may take part in a recorded graph."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = values.values if isinstance(values, Tensor) else np.asarray(values)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else _DEFAULT_DTYPE
        self.values = np.asarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self.graph: Optional["Graph"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    # Arithmetic
    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Sub.apply(self, other)
    def __rsub__(self, other): return Sub.apply(other, self)
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __truediv__(self, other): return Div.apply(self, other)
    def __rtruediv__(self, other): return Div.apply(other, self)
    def __neg__(self): return Neg.apply(self)
    def __pow__(self, exponent): return Pow.apply(self, exponent=float(exponent))
    def __matmul__(self, other): return MatMul.apply(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return Transpose.apply(self, axes=axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def exp(self): return Exp.apply(self)
    def log(self): return Log.apply(self)
    def sqrt(self): return Sqrt.apply(self)
    def abs(self): return Abs.apply(self)
    def relu(self): return ReLU.apply(self)
    def tanh(self): return Tanh.apply(self)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as tensors, matching the dtype of ``like`` for scalars."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


class Node:
    """One recorded op application."""

    __slots__ = ("op", "inputs", "output", "needs_grad")

    def __init__(self, op: "Op", inputs: Tuple[Tensor, ...], output: Tensor, needs_grad: Tuple[bool, ...]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.needs_grad = needs_grad


class Graph:
    """
    Append-only tape of recorded ops.

    Use as a context manager; ops applied inside the ``with`` block to
    tensors that require grad are recorded. When ``differentiable`` is
    true, gradients computed on this graph are recorded as well.
    """

    def __init__(self, differentiable: bool = False):
        self.nodes: List[Node] = []
        self.differentiable = differentiable

    def __enter__(self) -> "Graph":
        _state.graphs.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.graphs.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> int:
        for t in node.inputs:
            if t.node_id is not None and t.graph is self and t.node_id >= len(self.nodes):
                raise RuntimeError("graph input references a later node")
        node_id = len(self.nodes)
        self.nodes.append(node)
        node.output.node_id = node_id
        node.output.graph = self
        return node_id


def current_graph() -> Optional[Graph]:
    return _state.graphs[-1] if _state.graphs else None


@contextmanager
def ensure_graph(differentiable: bool = True) -> Iterator[Graph]:
    """Yield the active graph, or a fresh one when none is active."""
    graph = current_graph()
    if graph is not None:
        yield graph
        return
    with Graph(differentiable=differentiable) as graph:
        yield graph


@contextmanager
def no_record() -> Iterator[None]:
    """Evaluate ops without recording them."""
    previous = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


@contextmanager
def _activate(graph: Optional[Graph], record: bool) -> Iterator[None]:
    previous = _state.recording
    pushed = graph is not None and current_graph() is not graph
    if pushed:
        _state.graphs.append(graph)
    _state.recording = record
    try:
        yield
    finally:
        _state.recording = previous
        if pushed:
            _state.graphs.pop()


class Op:
    """Base class for a primitive op: numpy forward plus a Tensor-level backward."""

    name = "op"

    def __init__(self, **attrs):
        self.attrs = attrs
        self.saved: Dict[str, np.ndarray] = {}

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: Tensor, inputs: Tuple[Tensor, ...], output: Tensor) -> Tuple[Optional[Tensor], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **attrs) -> Tensor:
        like = next((x for x in inputs if isinstance(x, Tensor)), None)
        tensors = tuple(as_tensor(x, like) for x in inputs)
        op = cls(**attrs)
        out = Tensor(op.forward(*(t.values for t in tensors)))
        if is_debug() and not np.all(np.isfinite(out.values)):
            if all(np.all(np.isfinite(t.values)) for t in tensors):
                raise NumericError(f"{cls.name}: non-finite output from finite inputs")
        graph = current_graph()
        if graph is not None and _state.recording:
            needs = tuple(t.requires_grad for t in tensors)
            if any(needs):
                out.requires_grad = True
                graph.record(Node(op, tensors, out, needs))
        return out


def _broadcast_shape(name: str, *shapes) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {' and '.join(str(s) for s in shapes)}")


def _sum_to_shape(a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    return a.sum(axis=axes, keepdims=True).reshape(shape) if axes else a.reshape(shape)


def _unbroadcast(g: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return g if g.shape == tuple(shape) else sum_to(g, shape)


# Elementwise

class Add(Op):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        return a + b

    def backward(self, g, inputs, output):
        a, b = inputs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Op):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        return a - b

    def backward(self, g, inputs, output):
        a, b = inputs
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        return a * b

    def backward(self, g, inputs, output):
        a, b = inputs
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Op):
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        return a / b

    def backward(self, g, inputs, output):
        a, b = inputs
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * output / b, b.shape)


class Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g, inputs, output):
        return (-g,)


class Pow(Op):
    name = "pow"

    def forward(self, a):
        e = self.attrs["exponent"]
        if e != int(e) and np.any(a < 0):
            raise DomainError(f"{self.name}: non-integer exponent {e} of a negative value")
        return np.power(a, e)

    def backward(self, g, inputs, output):
        (a,) = inputs
        e = self.attrs["exponent"]
        if e == 0:
            return (g * 0.0,)
        if e == 1:
            return (g,)
        return (g * e * Pow.apply(a, exponent=e - 1),)


class Exp(Op):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, g, inputs, output):
        return (g * output,)


class Log(Op):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError(f"{self.name}: argument must be positive (min {a.min():.3g})")
        return np.log(a)

    def backward(self, g, inputs, output):
        return (g / inputs[0],)


class Sqrt(Op):
    name = "sqrt"

    def forward(self, a):
        if np.any(a < 0):
            raise DomainError(f"{self.name}: argument must be non-negative (min {a.min():.3g})")
        return np.sqrt(a)

    def backward(self, g, inputs, output):
        return (g * 0.5 / output,)


class Abs(Op):
    name = "abs"

    def forward(self, a):
        self.saved["sign"] = np.sign(a)
        return np.abs(a)

    def backward(self, g, inputs, output):
        return (g * Tensor(self.saved["sign"], dtype=g.dtype),)


class ReLU(Op):
    name = "relu"

    def forward(self, a):
        self.saved["mask"] = (a > 0).astype(a.dtype)
        return np.where(a > 0, a, np.zeros((), dtype=a.dtype))

    def backward(self, g, inputs, output):
        return (g * Tensor(self.saved["mask"]),)


class Tanh(Op):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def backward(self, g, inputs, output):
        return (g * (1.0 - output * output),)


class ClampMin(Op):
    name = "clamp_min"

    def forward(self, a):
        low = self.attrs["low"]
        self.saved["mask"] = (a >= low).astype(a.dtype)
        return np.maximum(a, np.asarray(low, dtype=a.dtype))

    def backward(self, g, inputs, output):
        return (g * Tensor(self.saved["mask"]),)


# Linear algebra and reductions

class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"{self.name}: incompatible shapes {a.shape} and {b.shape}")
        return a @ b

    def backward(self, g, inputs, output):
        a, b = inputs
        return MatMul.apply(g, b.transpose()), MatMul.apply(a.transpose(), g)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


class Sum(Op):
    name = "sum"

    def forward(self, a):
        self.attrs["axes"] = _normalize_axes(self.attrs.get("axis"), a.ndim)
        return np.asarray(a.sum(axis=self.attrs["axes"], keepdims=self.attrs.get("keepdims", False)))

    def backward(self, g, inputs, output):
        (a,) = inputs
        kept = tuple(1 if i in self.attrs["axes"] else s for i, s in enumerate(a.shape))
        return (broadcast_to(g.reshape(kept), a.shape),)


class Reshape(Op):
    name = "reshape"

    def forward(self, a):
        try:
            return a.reshape(self.attrs["shape"])
        except ValueError:
            raise ShapeError(f"{self.name}: cannot reshape {a.shape} into {tuple(self.attrs['shape'])}")

    def backward(self, g, inputs, output):
        return (g.reshape(inputs[0].shape),)


class Transpose(Op):
    name = "transpose"

    def forward(self, a):
        axes = self.attrs.get("axes")
        self.attrs["axes"] = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        if sorted(self.attrs["axes"]) != list(range(a.ndim)):
            raise ShapeError(f"{self.name}: axes {self.attrs['axes']} invalid for rank {a.ndim}")
        return np.transpose(a, self.attrs["axes"])

    def backward(self, g, inputs, output):
        return (g.transpose(tuple(np.argsort(self.attrs["axes"]))),)


class BroadcastTo(Op):
    name = "broadcast_to"

    def forward(self, a):
        shape = tuple(self.attrs["shape"])
        if _broadcast_shape(self.name, a.shape, shape) != shape:
            raise ShapeError(f"{self.name}: cannot broadcast {a.shape} to {shape}")
        return np.array(np.broadcast_to(a, shape))

    def backward(self, g, inputs, output):
        return (sum_to(g, inputs[0].shape),)


class SumTo(Op):
    name = "sum_to"

    def forward(self, a):
        shape = tuple(self.attrs["shape"])
        if _broadcast_shape(self.name, a.shape, shape) != a.shape:
            raise ShapeError(f"{self.name}: cannot reduce {a.shape} to {shape}")
        return _sum_to_shape(a, shape)

    def backward(self, g, inputs, output):
        return (broadcast_to(g, inputs[0].shape),)


class Slice(Op):
    name = "slice"

    def forward(self, a):
        return np.array(a[self.attrs["index"]])

    def backward(self, g, inputs, output):
        return (PadInto.apply(g, index=self.attrs["index"], shape=inputs[0].shape),)


class PadInto(Op):
    """Place a block into a zero array at ``index``; adjoint of Slice."""

    name = "pad_into"

    def forward(self, a):
        out = np.zeros(self.attrs["shape"], dtype=a.dtype)
        out[self.attrs["index"]] = a
        return out

    def backward(self, g, inputs, output):
        return (Slice.apply(g, index=self.attrs["index"]),)


class Concat(Op):
    name = "concat"

    def forward(self, *xs):
        axis = self.attrs.get("axis", 0)
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref))
                                         if i != axis % len(ref)):
                raise ShapeError(f"{self.name}: shapes {ref} and {x.shape} differ off axis {axis}")
        return np.concatenate(xs, axis=axis)

    def backward(self, g, inputs, output):
        axis = self.attrs.get("axis", 0) % g.ndim
        grads, start = [], 0
        for t in inputs:
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + t.shape[axis])
            grads.append(Slice.apply(g, index=tuple(index)))
            start += t.shape[axis]
        return tuple(grads)


class Softmax(Op):
    name = "softmax"

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def backward(self, g, inputs, output):
        inner = (g * output).sum(axis=-1, keepdims=True)
        return (output * (g - inner),)


# Image ops, NCHW layout

def _require_rank4(name: str, a: np.ndarray) -> None:
    if a.ndim != 4:
        raise ShapeError(f"{name}: expected NCHW input, got shape {a.shape}")


class Unfold(Op):
    """im2col: (N, C, H, W) -> (N*Ho*Wo, C*k*k) for stride-1 windows."""

    name = "unfold"

    def forward(self, x):
        _require_rank4(self.name, x)
        k, pad = self.attrs["k"], self.attrs["pad"]
        if pad < 0 or k < 1:
            raise ValueError(f"{self.name}: invalid kernel {k} or padding {pad}")
        n, c, h, w = x.shape
        ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: kernel {k} larger than padded input {x.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)

    def backward(self, g, inputs, output):
        return (Fold.apply(g, shape=inputs[0].shape, k=self.attrs["k"], pad=self.attrs["pad"]),)


class Fold(Op):
    """col2im with scatter-add; adjoint of Unfold."""

    name = "fold"

    def forward(self, cols):
        n, c, h, w = self.attrs["shape"]
        k, pad = self.attrs["k"], self.attrs["pad"]
        ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
        if cols.shape != (n * ho * wo, c * k * k):
            raise ShapeError(f"{self.name}: got {cols.shape}, expected {(n * ho * wo, c * k * k)}")
        blocks = cols.reshape(n, ho, wo, c, k, k)
        out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
        for i in range(k):
            for j in range(k):
                out[:, :, i:i + ho, j:j + wo] += blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return out[:, :, pad:pad + h, pad:pad + w]

    def backward(self, g, inputs, output):
        return (Unfold.apply(g, k=self.attrs["k"], pad=self.attrs["pad"]),)


class Upsample(Op):
    """Nearest-neighbour upsampling by an integer factor."""

    name = "upsample"

    def forward(self, x):
        _require_rank4(self.name, x)
        f = self.attrs["factor"]
        return x.repeat(f, axis=2).repeat(f, axis=3)

    def backward(self, g, inputs, output):
        return (SumPool.apply(g, factor=self.attrs["factor"]),)


def _pool_view(name: str, x: np.ndarray, f: int) -> np.ndarray:
    _require_rank4(name, x)
    n, c, h, w = x.shape
    if h % f or w % f:
        raise ShapeError(f"{name}: spatial size {h}x{w} not divisible by {f}")
    return x.reshape(n, c, h // f, f, w // f, f)


class SumPool(Op):
    name = "sum_pool"

    def forward(self, x):
        return _pool_view(self.name, x, self.attrs["factor"]).sum(axis=(3, 5))

    def backward(self, g, inputs, output):
        return (Upsample.apply(g, factor=self.attrs["factor"]),)


class MaxPool(Op):
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""

    name = "max_pool"

    def forward(self, x):
        f = self.attrs["factor"]
        view = _pool_view(self.name, x, f)
        n, c, ho, _, wo, _ = view.shape
        win = view.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, f * f)
        idx = win.argmax(axis=-1)
        onehot = (np.arange(f * f) == idx[..., None]).astype(x.dtype)
        self.saved["mask"] = (
            onehot.reshape(n, c, ho, wo, f, f).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        )
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, g, inputs, output):
        up = Upsample.apply(g, factor=self.attrs["factor"])
        return (up * Tensor(self.saved["mask"]),)


# Functional API

def add(a: ArrayLike, b: ArrayLike) -> Tensor: return Add.apply(a, b)
def mul(a: ArrayLike, b: ArrayLike) -> Tensor: return Mul.apply(a, b)
def power(a: ArrayLike, exponent: float) -> Tensor: return Pow.apply(a, exponent=float(exponent))
def exp(a: ArrayLike) -> Tensor: return Exp.apply(a)
def log(a: ArrayLike) -> Tensor: return Log.apply(a)
def sqrt(a: ArrayLike) -> Tensor: return Sqrt.apply(a)
def relu(a: ArrayLike) -> Tensor: return ReLU.apply(a)
def tanh(a: ArrayLike) -> Tensor: return Tanh.apply(a)
def clamp_min(a: ArrayLike, low: float) -> Tensor: return ClampMin.apply(a, low=low)
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor: return MatMul.apply(a, b)
def softmax(a: ArrayLike) -> Tensor: return Softmax.apply(a)
def broadcast_to(a: ArrayLike, shape) -> Tensor: return BroadcastTo.apply(a, shape=tuple(shape))
def sum_to(a: ArrayLike, shape) -> Tensor: return SumTo.apply(a, shape=tuple(shape))
def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor: return Concat.apply(*tensors, axis=axis)
def upsample2x(x: ArrayLike) -> Tensor: return Upsample.apply(x, factor=2)
def sum_pool(x: ArrayLike, factor: int) -> Tensor: return SumPool.apply(x, factor=factor)
def maxpool(x: ArrayLike, factor: int = 2) -> Tensor: return MaxPool.apply(x, factor=factor)


def reshape(a: ArrayLike, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return Sum.apply(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def meanpool2x(x: ArrayLike) -> Tensor:
    """2x2 mean pooling."""
    return SumPool.apply(x, factor=2) * 0.25


def dense(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """Affine map ``x @ W + b`` with W of shape (in, out)."""
    out = MatMul.apply(x, weight)
    return out + bias if bias is not None else out


def conv2d(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None, pad: int = 1) -> Tensor:
    """
    Stride-1 2-D convolution (cross-correlation).

    Args:
        x: Input of shape (N, C, H, W)
        weight: Kernel of shape (O, C, k, k)
        bias: Optional bias of shape (O,)
        pad: Zero padding on every side

    Returns:
        Tensor: Output of shape (N, O, H + 2*pad - k + 1, W + 2*pad - k + 1)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: kernel must be (O, C, k, k), got {weight.shape}")
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1:2]} do not match kernel {weight.shape}")
    n, _, h, w = x.shape
    o, c, k, _ = weight.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = Unfold.apply(x, k=k, pad=pad)
    out = MatMul.apply(cols, weight.reshape(o, c * k * k).transpose())
    if bias is not None:
        out = out + bias
    return out.reshape(n, ho, wo, o).transpose((0, 3, 1, 2))


def batch_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5,
               running: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """
    Batch normalization over the batch and spatial axes.

    With ``running`` given, the stored (mean, var) are used as constants
    (inference mode); otherwise batch statistics are computed and
    differentiated through.
    """
    x = as_tensor(x)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    stat_shape = (1, x.shape[1]) if x.ndim == 2 else (1, x.shape[1], 1, 1)
    if running is None:
        mu = mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axis=axes, keepdims=True)
    else:
        centered = x - Tensor(np.asarray(running[0], dtype=x.dtype).reshape(stat_shape))
        var = Tensor(np.asarray(running[1], dtype=x.dtype).reshape(stat_shape))
    normed = centered / Sqrt.apply(var + eps)
    return normed * reshape(gamma, stat_shape) + reshape(beta, stat_shape)


OPS: Dict[str, Callable[..., Tensor]] = {
    "add": lambda a, b: Add.apply(a, b),
    "sub": lambda a, b: Sub.apply(a, b),
    "mul": lambda a, b: Mul.apply(a, b),
    "div": lambda a, b: Div.apply(a, b),
    "neg": lambda a: Neg.apply(a),
    "pow": lambda a, exponent: Pow.apply(a, exponent=float(exponent)),
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": lambda a: Abs.apply(a),
    "relu": relu,
    "tanh": tanh,
    "clamp_min": clamp_min,
    "matmul": matmul,
    "dense": dense,
    "conv2d": conv2d,
    "upsample2x": upsample2x,
    "meanpool2x": meanpool2x,
    "maxpool2x2": lambda x: maxpool(x, 2),
    "maxpool": maxpool,
    "softmax": softmax,
    "batch_norm": batch_norm,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "reshape": reshape,
    "transpose": lambda a, axes=None: Transpose.apply(a, axes=axes),
    "sum": lambda a, axis=None, keepdims=False: Sum.apply(a, axis=axis, keepdims=keepdims),
    "mean": mean,
    "broadcast_to": broadcast_to,
    "sum_to": sum_to,
}


def forward_op(kind: str, inputs: Sequence[ArrayLike], attrs: Optional[Dict] = None) -> Tensor:
    """
    Apply an op by name.

    Raises:
        ValueError: If the op kind is unknown
        ShapeError: If input shapes do not conform
        DomainError: If an input lies outside the op's domain
    """
    if kind not in OPS:
        raise ValueError(f"Unknown op kind: {kind}")
    return OPS[kind](*inputs, **(attrs or {}))


class GradientMap:
    """Gradients keyed by tensor identity."""

    def __init__(self):
        self._tensors: Dict[int, Tensor] = {}
        self._grads: Dict[int, Tensor] = {}

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __getitem__(self, tensor: Tensor) -> Tensor:
        try:
            return self._grads[id(tensor)]
        except KeyError:
            raise KeyError(f"no gradient for {tensor!r}")

    def __len__(self) -> int:
        return len(self._grads)

    def get(self, tensor: Tensor, default=None):
        return self._grads.get(id(tensor), default)

    def set(self, tensor: Tensor, grad: Tensor) -> None:
        self._tensors[id(tensor)] = tensor
        self._grads[id(tensor)] = grad

    def tensors(self) -> List[Tensor]:
        return list(self._tensors.values())

    def items(self) -> Iterable[Tuple[Tensor, Tensor]]:
        for key, tensor in self._tensors.items():
            yield tensor, self._grads[key]


def _propagate(outputs: Sequence[Tensor], grad_outputs: Sequence[Tensor], create_graph: bool,
               collect_leaves: bool) -> Tuple[Dict[int, Tensor], Dict[int, Tensor]]:
    grads: Dict[int, Tensor] = {}
    keep: Dict[int, Tensor] = {}
    for out, g in zip(outputs, grad_outputs):
        grads[id(out)] = grads[id(out)] + g if id(out) in grads else g
        keep[id(out)] = out

    recorded = [o for o in outputs if o.node_id is not None and o.graph is not None]
    if not recorded:
        return grads, keep
    graph = recorded[0].graph
    last = max(o.node_id for o in recorded if o.graph is graph)
    snapshot = graph.nodes[:last + 1]

    with _activate(graph, record=create_graph):
        for node in reversed(snapshot):
            g = grads.get(id(node.output))
            if g is None:
                continue
            input_grads = node.op.backward(g, node.inputs, node.output)
            for t, needed, gi in zip(node.inputs, node.needs_grad, input_grads):
                if not needed or gi is None:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                keep[key] = t
    if not collect_leaves:
        return grads, keep
    leaves = {k: t for k, t in keep.items() if t.node_id is None and t.requires_grad}
    return grads, leaves


def grad(outputs: Union[Tensor, Sequence[Tensor]], wrt: Union[Tensor, Sequence[Tensor]],
         grad_outputs: Optional[Union[Tensor, Sequence[Tensor]]] = None,
         create_graph: Optional[bool] = None) -> List[Tensor]:
    """
    Vector-Jacobian products of ``outputs`` with respect to ``wrt``.

    Args:
        outputs: Tensor(s) to differentiate
        wrt: Tensor(s) to differentiate with respect to
        grad_outputs: Upstream gradients; ones when omitted
        create_graph: Record the backward pass so results are differentiable;
            defaults to the graph's ``differentiable`` flag

    Returns:
        List[Tensor]: One gradient per ``wrt`` entry (zeros when unreachable)
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    wrt_list = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    if grad_outputs is None:
        grad_outputs = [Tensor(np.ones_like(o.values)) for o in outputs]
    elif isinstance(grad_outputs, Tensor):
        grad_outputs = [grad_outputs]
    for o, g in zip(outputs, grad_outputs):
        if o.shape != g.shape:
            raise ShapeError(f"grad: output shape {o.shape} does not match gradient shape {g.shape}")
    if create_graph is None:
        graph = next((o.graph for o in outputs if o.graph is not None), current_graph())
        create_graph = bool(graph is not None and graph.differentiable)

    grads, _ = _propagate(outputs, list(grad_outputs), create_graph, collect_leaves=False)
    return [grads.get(id(w), Tensor(np.zeros_like(w.values))) for w in wrt_list]


def backward(loss: Tensor, create_graph: bool = False) -> GradientMap:
    """
    Reverse pass from a scalar loss.

    Returns:
        GradientMap: Gradient for every requires_grad leaf reached by the graph

    Raises:
        ShapeError: If the loss is not a scalar
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    seed = Tensor(np.ones_like(loss.values))
    grads, leaves = _propagate([loss], [seed], create_graph, collect_leaves=True)
    result = GradientMap()
    for key, tensor in leaves.items():
        result.set(tensor, grads[key])
    if loss.node_id is None and loss.requires_grad:
        result.set(loss, seed)
    debug_log(f"backward: {len(result)} leaf gradients")
    return result


def grad_norm(output: Tensor, wrt: Tensor, p: float = 2.0, create_graph: Optional[bool] = None) -> Tensor:
    """
    Per-sample p-norm of d(output_i)/d(wrt_i).

    Rows of ``wrt`` must be independent samples, so summing the outputs
    yields each row's own gradient. The p=2 case is sqrt(sum g^2 + 1e-12).

    Raises:
        ValueError: If p <= 0
    """
    if p <= 0:
        raise ValueError(f"grad_norm: norm order must be positive, got {p}")
    if output.shape[0] != wrt.shape[0] or output.size != output.shape[0]:
        raise ShapeError(f"grad_norm: need one output per row of wrt, got {output.shape} vs {wrt.shape}")
    (g,) = grad(output, wrt, create_graph=create_graph)
    flat = g.reshape(wrt.shape[0], -1) if g.ndim > 1 else g.reshape(wrt.shape[0], 1)
    if p == 2:
        return Sqrt.apply((flat * flat).sum(axis=1) + GRAD_NORM_GUARD)
    return power(power(Abs.apply(flat), p).sum(axis=1) + GRAD_NORM_GUARD, 1.0 / p)


def finite_difference_oracle(f: Callable[[Tensor], ArrayLike], x: ArrayLike, h: float = 1e-5) -> Tensor:
    """
    Central-difference gradient of a scalar function.

    Raises:
        ValueError: If h <= 0
    """
    if h <= 0:
        raise ValueError(f"finite_difference_oracle: step must be positive, got {h}")
    base = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    result = out.reshape(-1)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = _scalar(f(Tensor(base.copy())))
            flat[i] = orig - h
            lo = _scalar(f(Tensor(base.copy())))
            flat[i] = orig
            result[i] = (hi - lo) / (2.0 * h)
    return Tensor(out)


def _scalar(value: ArrayLike) -> float:
    arr = value.values if isinstance(value, Tensor) else np.asarray(value)
    if arr.size != 1:
        raise ShapeError(f"expected a scalar function value, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])
