"""Tensor value type and a reverse-mode differentiation tape.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape everything runs as
plain numpy, which is what inference uses.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y, wrt=[x])[0]
    array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical streams for identical seeds on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- arithmetic ------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    inputs: tuple
    out: Tensor
    backward: Callable


class Tape:
    """Records nodes in execution order; backward walks them in reverse.

    A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._ids: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, node: Node):
        self.nodes.append(node)
        self._ids.add(id(node.out))

    def op_counts(self) -> dict:
        counts: dict = {}
        for n in self.nodes:
            counts[n.op] = counts.get(n.op, 0) + 1
        return counts

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        """Accumulate dloss/dleaf into ``leaf.grad`` for every leaf on the tape.

        Returns the gradients of ``wrt`` in order (zeros for leaves the loss
        does not depend on), or a dict keyed by leaf when ``wrt`` is None.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._ids:
            raise ValueError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            for t in node.inputs:
                if t.requires_grad and t._node is None:
                    leaves[id(t)] = t
            if g is None:
                continue
            parent_grads = node.backward(g)
            for t, pg in zip(node.inputs, parent_grads):
                if pg is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, leaf in leaves.items():
            leaf.grad = grads.get(key, np.zeros_like(leaf.data))
        if wrt is None:
            return {leaf: leaf.grad for leaf in leaves.values()}
        out = []
        for t in wrt:
            g = grads.get(id(t)) if id(t) in leaves else None
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            out.append(g)
        return out


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] | None = None):
    return tape.backward(loss, wrt)


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def record(op: str, out_data: np.ndarray, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` and register its backward rule on the active tape."""
    inputs = tuple(inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    out.requires_grad = False
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, out, backward_fn)
        out._node = node
        tape.record(node)
    return out


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def _pair(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.shape != b.shape and a.ndim and b.ndim:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    """Elementwise sum of equal-shaped tensors (0-d scalars broadcast)."""
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * out / bd, bd.shape))
    return record("div", out, (a, b), back)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return record("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        gshape = [1 if i in axes else s for i, s in enumerate(shape)]
        return (np.broadcast_to(g.reshape(gshape), shape).copy(),)
    return record("sum", out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join two NCHW tensors along channels, ``a`` first."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(f"concat_channels needs NCHW tensors, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ValueError(f"batch/spatial mismatch in concat: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)
    return record("slice", np.ascontiguousarray(a.data[:, start:stop]), (a,), back)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``x`` is perturbed in place, so ``f`` may close over it (for example a
    model parameter). ``coords`` limits the check to a random subset.
    """
    if not 1e-7 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-7, 1e-2], got {eps}")
    if x.dtype != np.float64:
        raise ValueError("grad_check needs a float64 tensor")
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
        if y.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {y.shape}")
        (analytic,) = tape.backward(y, wrt=[x])
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = make_rng(seed).choice(flat.size, size=coords, replace=False)
        worst = 0.0
        ag = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data.sum())
            flat[i] = orig - eps
            fm = float(f(x).data.sum())
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            worst = max(worst, abs(ag[i] - fd) / max(1.0, abs(fd)))
        return worst
    finally:
        x.requires_grad = was
