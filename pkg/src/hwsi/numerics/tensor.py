"""Dense tensors, the primitive table and tape-based reverse-mode differentiation.

Every differentiable computation in the package is a composition of the
primitives registered in ``PRIMITIVES``.  A primitive is a pair of pure numpy
functions: ``forward(arrays, attrs) -> (out, saved)`` and
``backward(grad_out, saved, arrays, attrs) -> tuple of input grads``.

Operands are never broadcast implicitly.  ``add`` and ``mul`` accept a second
operand whose shape is a trailing suffix of the first (bias vectors, layer-norm
gains, attention masks); ``matmul`` accepts a rank-2 right operand shared
across the leading axes of the left one.  Everything else requires exact
shape agreement.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from hwsi.errors import ContractError, DimensionError, NonFiniteError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def set_checked(flag: bool) -> None:
    """Enable NaN/Inf detection on every primitive output (per thread)."""
    _state.checked = bool(flag)


def is_checked() -> bool:
    return getattr(_state, "checked", False)


class Tensor:
    """Immutable dense array.  ``data`` is a read-only numpy array."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ContractError(f"tensor extents must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: takes ownership without copying
        t = cls.__new__(cls)
        if not arr.flags.owndata:
            arr = arr.copy()
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # operator sugar over the primitives
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(shape):
    raise ContractError(f"expected a single-element tensor, got shape {shape}")


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    saved: object
    attrs: dict


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Only applications with at least one tracked input are recorded; a tensor
    becomes tracked by ``watch`` or by being produced from a tracked input.
    Use as a context manager to make it the active tape of the current thread.
    """

    nodes: list = field(default_factory=list)
    _tracked: set = field(default_factory=set)
    _watched: list = field(default_factory=list)

    def watch(self, tensor: Tensor) -> Tensor:
        self._tracked.add(id(tensor))
        self._watched.append(tensor)
        return tensor

    def is_tracked(self, tensor: Tensor) -> bool:
        return id(tensor) in self._tracked

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._tracked.add(id(node.output))

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list:
        """Reverse sweep from a scalar ``loss``; returns one array per ``wrt``.

        Untracked targets, or targets the loss does not depend on, receive
        zero arrays.
        """
        if loss.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self.is_tracked(loss):
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            spec = PRIMITIVES[node.op]
            arrays = [t.data for t in node.inputs]
            in_grads = spec.backward(g, node.saved, arrays, node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not self.is_tracked(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros(t.shape, dtype=t.dtype) if g is None else np.asarray(g, dtype=t.dtype))
        return out


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable
    check: Callable


PRIMITIVES: dict = {}


def _register(name, forward, backward, check):
    PRIMITIVES[name] = Primitive(name, forward, backward, check)


def primitive_forward(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply primitive ``op``; records a tape node when differentiation is on."""
    spec = PRIMITIVES.get(op)
    if spec is None:
        raise ContractError(f"unknown primitive {op!r}")
    inputs = tuple(inputs)
    arrays = [t.data for t in inputs]
    spec.check(arrays, attrs)
    out, saved = spec.forward(arrays, attrs)
    if is_checked() and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor._wrap(np.asarray(out))
    stack = _tape_stack()
    if stack:
        tape = stack[-1]
        if any(tape.is_tracked(t) for t in inputs):
            tape.record(Node(op, inputs, result, saved, attrs))
    return result


def _sum_to_suffix(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _suffix_ok(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    return 0 < b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape


# -- matmul ---------------------------------------------------------------

def _matmul_check(arrays, attrs):
    a, b = arrays
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok and b.ndim > 2:
        ok = a.shape[:-2] == b.shape[:-2]
    if not ok:
        raise DimensionError("matmul", [a.shape, b.shape])


def _matmul_fwd(arrays, attrs):
    a, b = arrays
    return a @ b, None


def _matmul_bwd(g, saved, arrays, attrs):
    a, b = arrays
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


_register("matmul", _matmul_fwd, _matmul_bwd, _matmul_check)


# -- add / mul -------------------------------------------------------------

def _binary_check(name):
    def check(arrays, attrs):
        a, b = arrays
        if not _suffix_ok(a, b):
            raise DimensionError(name, [a.shape, b.shape], "second operand must match or be a trailing suffix")
    return check


_register(
    "add",
    lambda arrays, attrs: (arrays[0] + arrays[1], None),
    lambda g, s, arrays, attrs: (g, _sum_to_suffix(g, arrays[1].shape)),
    _binary_check("add"),
)
_register(
    "mul",
    lambda arrays, attrs: (arrays[0] * arrays[1], None),
    lambda g, s, arrays, attrs: (g * arrays[1], _sum_to_suffix(g * arrays[0], arrays[1].shape)),
    _binary_check("mul"),
)


def _no_check(arrays, attrs):
    pass


_register(
    "scale",
    lambda arrays, attrs: (arrays[0] * attrs["c"], None),
    lambda g, s, arrays, attrs: (g * attrs["c"],),
    _no_check,
)


# -- row-wise maps -----------------------------------------------------------

def _softmax_fwd(arrays, attrs):
    x = arrays[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_bwd(g, y, arrays, attrs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(arrays, attrs):
    x = arrays[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    return y, y


def _log_softmax_bwd(g, y, arrays, attrs):
    return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)


def _rank1_check(name):
    def check(arrays, attrs):
        if arrays[0].ndim < 1:
            raise DimensionError(name, [arrays[0].shape], "needs at least one axis")
    return check


_register("softmax", _softmax_fwd, _softmax_bwd, _rank1_check("softmax"))
_register("log_softmax", _log_softmax_fwd, _log_softmax_bwd, _rank1_check("log_softmax"))


def _l2n_fwd(arrays, attrs):
    x = arrays[0]
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    zero = norm == 0.0
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, x / safe)
    return y, (y, safe, zero)


def _l2n_bwd(g, saved, arrays, attrs):
    y, norm, zero = saved
    gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / norm
    return (np.where(zero, 0.0, gx),)


_register("l2_normalize", _l2n_fwd, _l2n_bwd, _rank1_check("l2_normalize"))


def zero_rows(x: Tensor) -> np.ndarray:
    """Boolean flags (leading shape) for rows that ``l2_normalize`` maps to zero."""
    return ~np.any(x.data != 0.0, axis=-1)


def _layer_norm_fwd(arrays, attrs):
    x = arrays[0]
    eps = attrs["eps"]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    return y, (y, inv)


def _layer_norm_bwd(g, saved, arrays, attrs):
    y, inv = saved
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - y * gym),)


_register("layer_norm", _layer_norm_fwd, _layer_norm_bwd, _rank1_check("layer_norm"))

_register(
    "relu",
    lambda arrays, attrs: (np.maximum(arrays[0], 0.0), None),
    lambda g, s, arrays, attrs: (g * (arrays[0] > 0.0),),
    _no_check,
)

_SQRT1_2 = 1.0 / np.sqrt(2.0)


def _gelu_fwd(arrays, attrs):
    x = arrays[0]
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    return x * cdf, cdf


def _gelu_bwd(g, cdf, arrays, attrs):
    x = arrays[0]
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return (g * (cdf + x * pdf),)


_register("gelu", _gelu_fwd, _gelu_bwd, _no_check)


# -- reductions ----------------------------------------------------------------

def _axis_check(name):
    def check(arrays, attrs):
        axis = attrs.get("axis")
        x = arrays[0]
        if axis is not None and not -x.ndim <= axis < x.ndim:
            raise DimensionError(name, [x.shape], f"axis {axis} out of range")
    return check


def _expand_grad(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _mean_bwd(g, s, arrays, attrs):
    x = arrays[0]
    axis = attrs.get("axis")
    n = x.size if axis is None else x.shape[axis]
    return (_expand_grad(g / n, x.shape, axis).copy(),)


_register(
    "mean",
    lambda arrays, attrs: (np.asarray(arrays[0].mean(axis=attrs.get("axis"))), None),
    _mean_bwd,
    _axis_check("mean"),
)
_register(
    "sum",
    lambda arrays, attrs: (np.asarray(arrays[0].sum(axis=attrs.get("axis"))), None),
    lambda g, s, arrays, attrs: (_expand_grad(g, arrays[0].shape, attrs.get("axis")).copy(),),
    _axis_check("sum"),
)
_register(
    "sum_of_squares",
    lambda arrays, attrs: (np.asarray((arrays[0] * arrays[0]).sum(axis=attrs.get("axis"))), None),
    lambda g, s, arrays, attrs: (2.0 * arrays[0] * _expand_grad(g, arrays[0].shape, attrs.get("axis")),),
    _axis_check("sum_of_squares"),
)


# -- structural ------------------------------------------------------------------

def _concat_check(arrays, attrs):
    axis = attrs["axis"]
    first = arrays[0]
    ax = axis % first.ndim
    for a in arrays[1:]:
        if a.ndim != first.ndim or any(a.shape[i] != first.shape[i] for i in range(a.ndim) if i != ax):
            raise DimensionError("concat", [x.shape for x in arrays], f"axis {axis}")


def _concat_fwd(arrays, attrs):
    return np.concatenate(arrays, axis=attrs["axis"]), None


def _concat_bwd(g, s, arrays, attrs):
    axis = attrs["axis"]
    cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


_register("concat", _concat_fwd, _concat_bwd, _concat_check)


def _slice_check(arrays, attrs):
    x = arrays[0]
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if not -x.ndim <= axis < x.ndim or not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError("slice", [x.shape], f"axis={axis} [{start}:{stop}]")


def _slicer(ndim, axis, start, stop):
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop)
    return tuple(idx)


def _slice_fwd(arrays, attrs):
    x = arrays[0]
    return x[_slicer(x.ndim, attrs["axis"], attrs["start"], attrs["stop"])].copy(), None


def _slice_bwd(g, s, arrays, attrs):
    x = arrays[0]
    out = np.zeros(x.shape, dtype=g.dtype)
    out[_slicer(x.ndim, attrs["axis"], attrs["start"], attrs["stop"])] = g
    return (out,)


_register("slice", _slice_fwd, _slice_bwd, _slice_check)


def _transpose_check(arrays, attrs):
    x = arrays[0]
    axes = attrs["axes"]
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError("transpose", [x.shape], f"axes {axes}")


_register(
    "transpose",
    lambda arrays, attrs: (np.ascontiguousarray(np.transpose(arrays[0], attrs["axes"])), None),
    lambda g, s, arrays, attrs: (np.transpose(g, np.argsort(attrs["axes"])),),
    _transpose_check,
)


def _reshape_check(arrays, attrs):
    x = arrays[0]
    if int(np.prod(attrs["shape"], dtype=np.int64)) != x.size:
        raise DimensionError("reshape", [x.shape, attrs["shape"]])


_register(
    "reshape",
    lambda arrays, attrs: (arrays[0].reshape(attrs["shape"]).copy(), None),
    lambda g, s, arrays, attrs: (g.reshape(arrays[0].shape),),
    _reshape_check,
)


# -- functional front end ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("matmul", (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("add", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("mul", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return primitive_forward("scale", (a,), c=float(c))


def softmax(a: Tensor) -> Tensor:
    return primitive_forward("softmax", (a,))


def log_softmax(a: Tensor) -> Tensor:
    return primitive_forward("log_softmax", (a,))


def l2_normalize(a: Tensor) -> Tensor:
    return primitive_forward("l2_normalize", (a,))


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    return primitive_forward("layer_norm", (a,), eps=float(eps))


def relu(a: Tensor) -> Tensor:
    return primitive_forward("relu", (a,))


def gelu(a: Tensor) -> Tensor:
    return primitive_forward("gelu", (a,))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return primitive_forward("mean", (a,), axis=axis)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    return primitive_forward("sum", (a,), axis=axis)


def sum_of_squares(a: Tensor, axis: int | None = None) -> Tensor:
    return primitive_forward("sum_of_squares", (a,), axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    return primitive_forward("concat", tensors, axis=axis)


def slice_(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    return primitive_forward("slice", (a,), axis=axis, start=int(start), stop=int(stop))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2:] = axes[-1:-3:-1]
    return primitive_forward("transpose", (a,), axes=tuple(int(x) for x in axes))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return primitive_forward("reshape", (a,), shape=tuple(int(s) for s in shape))


ACTIVATIONS = {"relu": relu, "gelu": gelu}
