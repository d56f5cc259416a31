"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine: operations record nodes on the active ``Tape``
while any input is gradient-tracked, and ``Tape.backward`` walks the
recording in reverse to accumulate adjoints into ``Tensor.grad``.
Everything is double precision; gradient checking at tight relative
tolerances is not reliable in float32.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

_STATE = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_STATE, "tape", None)


class Tensor:
    """Dense value plus an accumulated gradient of identical shape."""

    __slots__ = ("values", "grad", "requires_grad", "tape", "tape_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.tape: Optional[Tape] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; constants are wrapped untracked.
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

    def __getitem__(self, index):
        return take_slice(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeNode:
    """One recorded primitive: inputs, output and its vector-Jacobian rule."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications; use as a context manager.

    Nodes are appended in execution order, so every node's inputs precede
    it and a reverse sweep is a valid topological backward order.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(tensor) into ``.grad`` of every tracked tensor.

        ``root`` must be scalar-shaped (size 1). Repeated calls without
        zeroing the grads accumulate, each call adding one full gradient.
        """
        if root.tape is not self:
            raise ValueError("root was not produced on this tape")
        if root.values.size != 1:
            raise ValueError(f"backward root must be scalar-shaped, got {root.shape}")
        adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
        holder: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes):
            g_out = adjoint.get(id(node.output))
            if g_out is None:
                continue
            grads = node.vjp(g_out)
            for t, g in zip(node.inputs, grads):
                if g is None or not _tracked(t, self):
                    continue
                key = id(t)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + g
                else:
                    adjoint[key] = g
                    holder[key] = t
        for key, g in adjoint.items():
            t = holder[key]
            t.grad = t.grad + g.reshape(t.values.shape)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t.tape is tape


def _record(op: str, inputs: Sequence[Tensor], out_values: np.ndarray,
            vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor(out_values)
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out.tape = tape
        out.tape_id = len(tape.nodes)
        tape.nodes.append(TapeNode(op, inputs, out, vjp))
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values

    def vjp(g):
        return _sum_to_shape(g, a.values.shape), _sum_to_shape(g, b.values.shape)

    return _record("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values - b.values

    def vjp(g):
        return _sum_to_shape(g, a.values.shape), _sum_to_shape(-g, b.values.shape)

    return _record("sub", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values * b.values
    av, bv = a.values, b.values

    def vjp(g):
        return _sum_to_shape(g * bv, av.shape), _sum_to_shape(g * av, bv.shape)

    return _record("elementwise-mul", (a, b), out, vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.values, b.values)
    av, bv = a.values, b.values

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _sum_to_shape(ga, av.shape), _sum_to_shape(gb, bv.shape)

    return _record("matmul", (a, b), out, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.values, 0.0)
    mask = x.values > 0.0

    def vjp(g):
        return (g * mask,)

    return _record("relu", (x,), out, vjp)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    out = np.where(x.values > 0.0, x.values, slope * x.values)
    factor = np.where(x.values > 0.0, 1.0, slope)

    def vjp(g):
        return (g * factor,)

    return _record("leaky-relu", (x,), out, vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.values)
    pos = x.values >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x.values[pos]))
    ex = np.exp(x.values[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, vjp)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.values)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (x,), out, vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax-over-axis", (x,), out, vjp)


def dropout(x, keep_prob: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: eval is the identity, train scales survivors by 1/p."""
    x = as_tensor(x)
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not train or keep_prob == 1.0:
        out = x.values.copy()

        def vjp_id(g):
            return (g,)

        return _record("dropout", (x,), out, vjp_id)
    mask = (rng.random(x.values.shape) < keep_prob) / keep_prob
    out = x.values * mask

    def vjp(g):
        return (g * mask,)

    return _record("dropout", (x,), out, vjp)


def mean(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    out = x.values.mean(axis=axis, keepdims=keepdims)
    shape = x.values.shape
    count = x.values.size if axis is None else shape[axis]

    def vjp(g):
        return (_spread(g, shape, axis, keepdims) / count,)

    return _record("mean-over-axis", (x,), out, vjp)


def reduce_sum(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    out = x.values.sum(axis=axis, keepdims=keepdims)
    shape = x.values.shape

    def vjp(g):
        return (_spread(g, shape, axis, keepdims),)

    return _record("sum-over-axis", (x,), out, vjp)


def _spread(g: np.ndarray, shape: tuple, axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = _check_axis(axis, ts[0].ndim)
    out = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.values.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat-over-axis", tuple(ts), out, vjp)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.values, tuple(shape)).copy()
    src = x.values.shape

    def vjp(g):
        return (_sum_to_shape(g, src),)

    return _record("broadcast", (x,), out, vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.values.reshape(tuple(shape))
    src = x.values.shape

    def vjp(g):
        return (g.reshape(src),)

    return _record("reshape", (x,), out, vjp)


def transpose(x, axes=None) -> Tensor:
    """Axis permutation; default swaps the last two axes.

    Not in the minimal kind list but required to form E·Eᵀ style products.
    """
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    out = np.transpose(x.values, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", (x,), out, vjp)


def take_slice(x, index) -> Tensor:
    """Basic (non-fancy) indexing into a tensor."""
    x = as_tensor(x)
    out = x.values[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    shape = x.values.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("slice", (x,), out, vjp)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


# Uniform dispatch surface keyed by primitive kind name.
_PRIMITIVES = {
    "matmul": lambda ins, attrs: matmul(*ins),
    "add": lambda ins, attrs: add(*ins),
    "sub": lambda ins, attrs: sub(*ins),
    "elementwise-mul": lambda ins, attrs: mul(*ins),
    "relu": lambda ins, attrs: relu(*ins),
    "leaky-relu": lambda ins, attrs: leaky_relu(ins[0], attrs.get("slope", 0.01)),
    "sigmoid": lambda ins, attrs: sigmoid(*ins),
    "tanh": lambda ins, attrs: tanh(*ins),
    "softmax-over-axis": lambda ins, attrs: softmax(ins[0], attrs["axis"]),
    "dropout": lambda ins, attrs: dropout(ins[0], attrs["keep_prob"], attrs["rng"], attrs["train"]),
    "mean-over-axis": lambda ins, attrs: mean(ins[0], attrs.get("axis"), attrs.get("keepdims", False)),
    "sum-over-axis": lambda ins, attrs: reduce_sum(ins[0], attrs.get("axis"), attrs.get("keepdims", False)),
    "concat-over-axis": lambda ins, attrs: concat(ins, attrs["axis"]),
    "broadcast": lambda ins, attrs: broadcast_to(ins[0], attrs["shape"]),
    "reshape": lambda ins, attrs: reshape(ins[0], attrs["shape"]),
    "slice": lambda ins, attrs: take_slice(ins[0], attrs["index"]),
    "transpose": lambda ins, attrs: transpose(ins[0], attrs.get("axes")),
}


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a primitive by kind name; records on the active tape as usual."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind: {kind!r}") from None
    return fn([as_tensor(t) for t in inputs], attrs)


def absolute(x) -> Tensor:
    """|x| composed from relu pairs; subgradient 0 at the kink."""
    return add(relu(x), relu(mul(x, -1.0)))


def ordered_sum(tensors: Sequence) -> Tensor:
    """Element-wise sum of same-shaped tensors in ascending-value order.

    The per-element accumulation order depends only on the multiset of
    values, so permuting the inputs leaves the result bit-identical.
    """
    ts = [as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return add(ts[0], 0.0)
    stacked = np.sort(np.stack([t.values for t in ts]), axis=0)
    out = stacked[0]
    for i in range(1, len(ts)):
        out = out + stacked[i]

    def vjp(g):
        return tuple(g for _ in ts)

    return _record("ordered-sum", tuple(ts), out, vjp)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], wrt, step: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    ``fn`` takes no arguments and must recompute its scalar output from the
    current values of the ``wrt`` tensors (a Tensor or a sequence of them).
    Returns max over coordinates of |analytic - fd| / max(1, |fd|).
    """
    tensors = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    saved = [(t.requires_grad, t.grad.copy()) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.values)
    with Tape() as tape:
        out = fn()
        if out.values.size != 1:
            raise ValueError("grad_check requires a scalar-valued function")
    if out.tape is tape:
        tape.backward(out)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().values)
            flat[i] = orig - step
            f_minus = float(fn().values)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("non-finite function value during differencing")
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(a.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    for t, (req, g) in zip(tensors, saved):
        t.requires_grad = req
        t.grad = g
    return worst
