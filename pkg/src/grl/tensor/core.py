"""Dense tensors and a tape-based reverse-mode engine.

Ops only record onto a :class:`Tape` while one is active (``with Tape() as
tape:``) and at least one input requires a gradient. Outside a tape every op
is a plain numpy evaluation, which is what finite-difference probes use.
"""

from __future__ import annotations

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

# NaN/Inf after an op is an error, not a state.
CHECK_FINITE = True


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def resolve_dtype(dtype):
    if dtype is None:
        return None
    if isinstance(dtype, str):
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dt}; use f32 or f64")
    return dt


class Tensor:
    """Row-major float32/float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        dt = resolve_dtype(dtype)
        arr = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=dt)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = object.__new__(Tensor)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        return _ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __neg__(self):
        return _ops().mul(self, -1.0)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, key):
        return _ops().getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)


def _ops():
    from . import ops

    return ops


class Parameter(Tensor):
    """Learnable tensor with a named path and a same-shaped gradient buffer."""

    __slots__ = ()

    def __init__(self, data, name, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Ordered op records; appended in execution order, so already topological."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    return Tape._stack[-1] if Tape._stack else None


class no_grad:
    """Suspend recording, even inside an active tape."""

    def __enter__(self):
        self._saved = Tape._stack[:]
        Tape._stack.clear()
        return self

    def __exit__(self, *exc):
        Tape._stack[:] = self._saved
        return False


def emit(data, parents, backward):
    """Wrap an op result and record it if any parent is tracked."""
    if CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericError("non-finite values produced by op")
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                tape.records.append((out, parents, backward))
                break
    return out


def backward(loss, tape, params=None):
    """Reverse-accumulate d(loss)/d(leaf) over ``tape``.

    Returns ``{name: gradient}`` for ``params`` (default: every Parameter the
    tape touched) and stores each gradient on the tensor's ``grad``. A
    parameter the loss does not depend on gets a zero gradient.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    seen = {}
    for out, parents, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgs = fn(g)
        for p, pg in zip(parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            if isinstance(p, Parameter):
                seen[id(p)] = p
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        params = list(seen.values())
    result = {}
    for i, p in enumerate(params):
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            g = g.reshape(p.shape)
        p.grad = g
        result[p.name if p.name is not None else i] = g
    return result
