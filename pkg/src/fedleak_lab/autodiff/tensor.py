"""Tensor values and the reverse-mode trace.

A :class:`Tensor` wraps an immutable float64 array. When tracing is enabled
and at least one input requires a gradient, every operator records a
:class:`Function` node linking the result to its inputs. Backward rules are
written with Tensor operators themselves, so running :func:`grad` with
``retain_trace=True`` produces gradients that are again traced and can be
differentiated a second time.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np


class TraceError(RuntimeError):
    """Raised for malformed differentiation requests."""


class DomainError(ValueError):
    """Raised when an operator is evaluated outside its domain."""


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


_state = threading.local()


def _tracing() -> bool:
    return getattr(_state, "tracing", True)


def _level() -> int:
    return getattr(_state, "level", 0)


@contextmanager
def tracing(enabled: bool):
    prev = _tracing()
    _state.tracing = enabled
    try:
        yield
    finally:
        _state.tracing = prev


def no_trace():
    return tracing(False)


@contextmanager
def _backward_level():
    prev = _level()
    _state.level = prev + 1
    try:
        yield
    finally:
        _state.level = prev


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Function:
    """A recorded operator application (one node of the trace).

    Subclasses implement ``forward`` on raw arrays and ``backward`` on
    Tensors. ``kind`` is the operator tag used by :func:`ops.apply`.
    """

    kind = "function"

    def __init__(self, **attrs):
        self.attrs = attrs
        self.inputs: tuple[Tensor, ...] = ()
        self.output: Tensor | None = None
        self.order = 0

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: "Tensor") -> Sequence["Tensor | None"]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **attrs) -> "Tensor":
        fn = cls(**attrs)
        out = fn.forward(*[t.data for t in inputs])
        out = np.asarray(out, dtype=np.float64)
        needs = _tracing() and any(t.requires_grad for t in inputs)
        result = Tensor._wrap(out, requires_grad=needs)
        if needs:
            fn.inputs = tuple(inputs)
            fn.output = result
            fn.order = _level()
            result._fn = fn
        return result

    def __repr__(self):
        return f"<{self.kind} order={self.order}>"


class Tensor:
    """Dense float64 array with an optional trace node.

    Leaves are created with ``requires_grad=True``; results of operators on
    such leaves carry ``_fn``, the node that produced them.
    """

    __slots__ = ("data", "requires_grad", "_fn", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self._fn: Function | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _freeze(arr)
        t.requires_grad = requires_grad
        t._fn = None
        t.name = None
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        tag = f", fn={self._fn.kind}" if self._fn is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=np.float64, copy=True))


def _topo_order(output: Tensor, targets: set[int]) -> tuple[list[Tensor], set[int]]:
    """Post-order of traced tensors reachable from ``output``.

    Also returns the ids of tensors from which at least one target is
    reachable; backward propagation skips everything else.
    """
    order: list[Tensor] = []
    reaches: set[int] = set()
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        t, expanded = stack.pop()
        tid = id(t)
        if expanded:
            hit = tid in targets
            if t._fn is not None:
                for p in t._fn.inputs:
                    if id(p) in reaches:
                        hit = True
            if hit:
                reaches.add(tid)
            order.append(t)
            continue
        if tid in visited:
            continue
        visited.add(tid)
        stack.append((t, True))
        if t._fn is not None:
            for p in t._fn.inputs:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    return order, reaches


def grad(output: Tensor, wrt: Sequence[Tensor] | Tensor, retain_trace: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``retain_trace`` the backward pass is itself recorded, so the
    returned tensors can be fed to another :func:`grad` call.
    """
    single = isinstance(wrt, Tensor)
    wrt_list: list[Tensor] = [wrt] if single else list(wrt)
    if output.size != 1:
        raise TraceError(f"grad() needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise TraceError("output was not produced under tracing")
    targets = {id(t) for t in wrt_list}
    order, reaches = _topo_order(output, targets)
    for t in wrt_list:
        if id(t) not in reaches:
            raise TraceError(f"tensor {t!r} is absent from the trace of the output")

    grads: dict[int, Tensor] = {id(output): Tensor._wrap(np.ones_like(output.data))}
    found: dict[int, Tensor] = {}
    with tracing(retain_trace), _backward_level():
        for t in reversed(order):
            tid = id(t)
            if tid not in reaches:
                continue
            g = grads.pop(tid, None)
            if g is None:
                continue
            if tid in targets:
                found[tid] = g
            fn = t._fn
            if fn is None:
                continue
            in_grads = fn.backward(g)
            for p, gp in zip(fn.inputs, in_grads):
                if gp is None or id(p) not in reaches:
                    continue
                pid = id(p)
                if pid in grads:
                    grads[pid] = grads[pid] + gp
                else:
                    grads[pid] = gp
    out = []
    for t in wrt_list:
        g = found.get(id(t))
        if g is None:
            g = Tensor._wrap(np.zeros_like(t.data))
        out.append(g)
    return out


def trace_nodes(output: Tensor) -> list[Function]:
    """Nodes reachable from ``output`` in topological (inputs first) order."""
    order, _ = _topo_order(output, set())
    return [t._fn for t in order if t._fn is not None]


def replay(output: Tensor) -> np.ndarray:
    """Recompute ``output`` from its leaves by re-running each node's forward."""
    values: dict[int, np.ndarray] = {}
    order, _ = _topo_order(output, set())
    for t in order:
        if t._fn is None:
            values[id(t)] = t.data
            continue
        args = []
        for p in t._fn.inputs:
            args.append(values.get(id(p), p.data))
        values[id(t)] = np.asarray(t._fn.forward(*args), dtype=np.float64)
    return values[id(output)]


def leaves(tensors: Iterable) -> list[Tensor]:
    return [Tensor(t, requires_grad=True) for t in tensors]
