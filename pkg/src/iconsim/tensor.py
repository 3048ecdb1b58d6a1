"""Dense n-dimensional arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous row-major float array (float32 by
default, float64 for gradient-check work). Operations executed inside an
active :class:`Graph` context record adjoint rules onto a tape; calling
:func:`backward` on a scalar loss replays the tape in reverse and
accumulates gradients into every ``requires_grad`` tensor it reached.

There is no broadcasting except scalar * tensor (see :func:`scale`), no
views (reshapes copy), and no higher-order derivatives.
"""

import os
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError

# When set, every forward op asserts its output is finite. Costs a pass
# over the data, so it is opt-in.
DEBUG_CHECK_FINITE = os.environ.get("ICONSIM_DEBUG", "") == "1"

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A shaped float buffer, optionally participating in autodiff.

    Attributes:
        data: contiguous numpy array (float32 or float64).
        requires_grad: whether backward should populate ``grad``.
        grad: same-shape gradient buffer, or None before any backward.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)):
            # numpy inputs keep their float precision (f64 for grad checks)
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=np.float32)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ValueError(f"tensors hold float32/float64 data, got {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def max(self, axis=None):
        return reduce("max", self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


class _Op:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of recorded operations, in forward (topological) order.

    Use as a context manager around the forward pass; ops executed while a
    graph is active record their adjoint rules when any input requires a
    gradient. ``backward`` traverses the tape exactly once, in reverse.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _active.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every requires_grad tensor reachable from loss."""
        if loss.size != 1:
            raise ShapeError("backward requires a scalar loss", loss.shape)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for op in reversed(self.ops):
            g_out = grads.get(id(op.output))
            if g_out is None:
                continue
            input_grads = op.backward_fn(g_out)
            for inp, g in zip(op.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    tensors[key] = inp
        for key, tensor in tensors.items():
            if not tensor.requires_grad:
                continue
            g = grads[key].reshape(tensor.shape)
            if tensor.grad is None:
                tensor.grad = g.astype(tensor.dtype, copy=False).copy()
            else:
                tensor.grad = tensor.grad + g.astype(tensor.dtype, copy=False)


_active: list[Graph] = []


def backward(loss: Tensor, graph: Graph):
    """Run reverse-mode accumulation for ``loss`` over ``graph``."""
    graph.backward(loss)


def record_op(output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
    """Attach an adjoint rule to the active graph, if recording applies.

    ``backward_fn(g_out) -> tuple`` must return one gradient array (or
    None) per input, each matching that input's shape.
    """
    needs = any(t.requires_grad for t in inputs)
    output.requires_grad = needs
    if needs and _active:
        _active[-1].ops.append(_Op(tuple(inputs), output, backward_fn))
    return output


def _finish(out: Tensor) -> Tensor:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in forward result")
    return out


def _check_binary(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ShapeError(f"{name} requires equal shapes", a.shape, b.shape)
    if a.dtype != b.dtype:
        raise ShapeError(f"{name} requires matching dtypes ({a.dtype} vs {b.dtype})")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data)
    record_op(out, (a, b), lambda g: (g, g))
    return _finish(out)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data)
    record_op(out, (a, b), lambda g: (g, -g))
    return _finish(out)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    record_op(out, (a, b), lambda g: (g * bd, g * ad))
    return _finish(out)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar — the only sanctioned broadcast."""
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.dtype))
    record_op(out, (a,), lambda g: (g * s,))
    return _finish(out)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    record_op(out, (a,), lambda g: (g * mask,))
    return _finish(out)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    ad = a.data
    record_op(out, (a,), lambda g: (g * (2 * ad),))
    return _finish(out)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu, "square": square}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name (see _ELEMENTWISE for the set)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a) if b is None else fn(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul requires rank-2 tensors", a.shape, b.shape)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul inner dimensions differ", a.shape, b.shape)
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul requires matching dtypes ({a.dtype} vs {b.dtype})")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    record_op(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return _finish(out)


def reshape(a: Tensor, shape) -> Tensor:
    """Reshape by copy (no views in this library)."""
    out = Tensor(a.data.reshape(shape).copy())
    orig = a.shape
    record_op(out, (a,), lambda g: (g.reshape(orig),))
    return _finish(out)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Copy of rows [start, stop) along the first axis; adjoint scatters
    the gradient back into a zero tensor of the original shape."""
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"row slice [{start},{stop}) out of range", a.shape)
    out = Tensor(a.data[start:stop].copy())
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    record_op(out, (a,), bwd)
    return _finish(out)


def reduce(op_kind: str, a: Tensor, axis=None) -> Tensor:
    """Reduce over one axis or the whole tensor (sum, mean or max)."""
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"reduce axis {axis} out of range for rank {a.data.ndim}")
    if op_kind == "sum" or op_kind == "mean":
        out_data = a.data.sum(axis=axis)
        count = a.size if axis is None else a.shape[axis]
        if op_kind == "mean":
            out_data = out_data / count
        out = Tensor(out_data)
        shape = a.shape

        def bwd(g):
            if axis is None:
                full = np.broadcast_to(g, shape)
            else:
                full = np.broadcast_to(np.expand_dims(g, axis), shape)
            if op_kind == "mean":
                full = full / count
            return (np.ascontiguousarray(full),)

        record_op(out, (a,), bwd)
    elif op_kind == "max":
        out = Tensor(a.data.max(axis=axis))
        shape = a.shape
        if axis is None:
            # ties route to the lowest linear index, matching argmax
            arg = int(a.data.argmax())

            def bwd(g):
                full = np.zeros(shape, dtype=g.dtype)
                full.reshape(-1)[arg] = g
                return (full,)

        else:
            arg = a.data.argmax(axis=axis)

            def bwd(g):
                full = np.zeros(shape, dtype=g.dtype)
                np.put_along_axis(
                    full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis
                )
                return (full,)

        record_op(out, (a,), bwd)
    else:
        raise ValueError(f"unknown reduce op {op_kind!r}")
    return _finish(out)


def finite_difference_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function at x.

    ``f`` must be deterministic (disable dropout). Evaluates f twice per
    element, so keep x small; intended as the test oracle for backward().
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grad = np.zeros_like(x.data)
    flat = grad.reshape(-1)
    base = x.data.copy()
    for i in range(base.size):
        for sign in (1.0, -1.0):
            probe = base.copy()
            probe.reshape(-1)[i] += sign * h
            val = f(Tensor(probe, dtype=x.dtype))
            val = val.item() if isinstance(val, Tensor) else float(val)
            flat[i] += sign * val
        flat[i] /= 2 * h
    return grad
