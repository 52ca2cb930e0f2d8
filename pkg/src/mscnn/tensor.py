"""Dense tensors with a reverse-mode autodiff tape.

Every differentiable primitive records one node on the active :class:`Tape`
when at least one input requires a gradient. :func:`backward` replays the
tape in reverse and accumulates ``.grad`` on leaf tensors.

Image tensors use the (batch, channel, row, column) layout. Values are
64-bit floats unless a tensor is explicitly created with another float type.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


def _debug() -> bool:
    return getattr(_state, "debug", False)


def set_debug(enabled: bool) -> None:
    """Check every forward result for NaN/Inf (per thread)."""
    _state.debug = enabled


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        tape = self._tape() if self._tape is not None else None
        if tape is None:
            raise RuntimeError("tensor was not recorded on a live tape")
        backward(tape, self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive ops; confined to the thread that made it.

    Use as a context manager to make it the active tape::

        with Tape() as tape:
            loss = f(x)
        backward(tape, loss)
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._previous: list[Tape | None] = []

    def __enter__(self) -> "Tape":
        self._previous.append(getattr(_state, "tape", None))
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        node.output._tape = weakref.ref(self)


def current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; ops inside produce untracked tensors."""
    previous = getattr(_state, "tape", None)
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = previous


@contextmanager
def record_branches() -> Iterator[list]:
    """Collect the discrete choices (ReLU masks, pooling argmaxes) forward ops make."""
    previous = getattr(_state, "branches", None)
    _state.branches = log = []
    try:
        yield log
    finally:
        _state.branches = previous


def note_branch(choice: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(choice.tobytes())


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _debug() and not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value produced by forward op")
    tape = current_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked, dtype=out.dtype)
    if tracked:
        tape.record(Node(tuple(inputs), result, backward_fn))
    return result


def backward(tape: Tape, loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    The tape is emptied afterwards unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    if id(loss) not in produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
    if not retain_graph:
        tape.nodes.clear()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    return _make(
        a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),)
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# -- reductions and shape ---------------------------------------------------


def sum_(a: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all non-batch axes; channel-major for image tensors."""
    return reshape(a, (a.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat extent mismatch on axis {ax}: {ref} vs {p.shape}")
    offsets = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat`: slice ``a`` into consecutive pieces."""
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {a.shape[ax]}")
    pieces = []
    start = 0
    for n in sizes:
        pieces.append(take(a, slice(start, start + n), ax))
        start += n
    return pieces


def take(a: Tensor, index: slice, axis: int) -> Tensor:
    key = [slice(None)] * a.ndim
    key[axis] = index
    key = tuple(key)

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(a.data[key].copy(), (a,), bw)


# -- numeric checks ---------------------------------------------------------


def numerical_grad(f: Callable[[], float], x: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of scalar ``f`` with respect to ``x[index]`` (in place)."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    *,
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> int:
    """Compare tape gradients of ``f(*inputs).sum()`` against central differences.

    With ``skip_kinks`` an entry is skipped when the +-h probe flips a ReLU
    mask or pooling argmax, i.e. the function is not differentiable within
    the stencil. Returns the number of entries compared; raises
    AssertionError naming the first offending input and entry.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = sum_(f(*inputs))
    backward(tape, loss)

    def value() -> tuple[float, list]:
        with no_grad(), record_branches() as log:
            v = float(np.sum(f(*inputs).data))
        return v, log

    base = value()[1] if skip_kinks else None
    compared = 0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        indices = list(np.ndindex(*t.shape))
        if max_entries is not None and len(indices) > max_entries:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in sorted(pick)]
        for idx in indices:
            old = t.data[idx]
            t.data[idx] = old + h
            fp, bp = value()
            t.data[idx] = old - h
            fm, bm = value()
            t.data[idx] = old
            if skip_kinks and (bp != base or bm != base):
                continue
            num = (fp - fm) / (2 * h)
            ana = analytic[idx]
            compared += 1
            if abs(ana - num) > atol + rtol * abs(num):
                label = t.name or f"input {k}"
                raise AssertionError(
                    f"gradient mismatch for {label}{list(idx)}: analytic {ana!r} vs numeric {num!r}"
                )
    return compared
