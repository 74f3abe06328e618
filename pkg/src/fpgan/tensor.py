"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every op in :mod:`fpgan.ops` that
receives at least one tracked input returns a tensor that remembers its
parents and a local gradient rule; :func:`backward` replays those rules in
reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .rng import Rng

DTYPES = {"float32": np.float32, "float64": np.float64}

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ContractError(f"unsupported dtype {dtype!r}")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "tracked", "grad_fn", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=_as_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"extents must be >= 1, got {list(arr.shape)}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.tracked: tuple[bool, ...] = ()
        self.grad_fn: GradFn | None = None
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype.name}{flag})"

    # operator sugar; the op functions carry the gradient rules
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.shift(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.shift(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def make_result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    """Wrap an op output, attaching the gradient rule only when needed."""
    out = Tensor(data)
    tracked = tuple(p.requires_grad for p in parents)
    if any(tracked):
        out.requires_grad = True
        out.parents = tuple(parents)
        # tracking is decided now, so freezing a parameter later has no effect
        out.tracked = tracked
        out.grad_fn = grad_fn
    return out


def new_tensor(dims: Sequence[int], fill="zeros", dtype="float32", rng: Rng | None = None,
               value: float = 0.0, requires_grad: bool = False) -> Tensor:
    """Create a tensor filled with zeros, ones, a constant, or N(0, 1) draws.

    ``fill`` may be ``"zeros"``, ``"ones"``, ``"constant"`` (uses ``value``),
    ``"randn"`` (needs ``rng``), or a ``("constant", c)`` tuple.
    """
    dims = list(dims)
    if not dims or any(int(d) < 1 for d in dims):
        raise ShapeError(f"dims must be non-empty with extents >= 1, got {dims}")
    dt = _as_dtype(dtype)
    if isinstance(fill, tuple):
        fill, value = fill
    n = int(np.prod(dims))
    if fill == "zeros":
        data = np.zeros(dims, dtype=dt)
    elif fill == "ones":
        data = np.ones(dims, dtype=dt)
    elif fill == "constant":
        data = np.full(dims, value, dtype=dt)
    elif fill == "randn":
        if rng is None:
            raise ContractError("randn fill needs an Rng")
        data = rng.normal(n).reshape(dims).astype(dt)
    else:
        raise ContractError(f"unknown fill {fill!r}")
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Operations reachable from a loss, in topological order.

    Built by walking parent links from the loss; each interior node appears
    exactly once and after all of the nodes that produced its inputs.
    """

    def __init__(self, nodes: list[Tensor], leaves: list[Tensor]):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def record(cls, loss: Tensor) -> "Tape":
        nodes: list[Tensor] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)] if loss.requires_grad else []
        while stack:
            t, expanded = stack.pop()
            if expanded:
                nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.is_leaf:
                leaves.append(t)
                continue
            stack.append((t, True))
            for p, tr in zip(reversed(t.parents), reversed(t.tracked)):
                if tr and id(p) not in seen:
                    stack.append((p, False))
        return cls(nodes, leaves)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    if tape is None:
        tape = Tape.record(loss)
    if not loss.requires_grad:
        return tape
    if loss.is_leaf:
        _accumulate(loss, np.ones_like(loss.data))
        return tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, tr, pg in zip(node.parents, node.tracked, node.grad_fn(g)):
            if pg is None or not tr:
                continue
            if parent.is_leaf:
                _accumulate(parent, pg)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    return tape


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad += g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (test oracle)."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = x.data
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xp.reshape(-1)[i] += eps
        xm = base.copy()
        xm.reshape(-1)[i] -= eps
        fp = f(Tensor(xp)).item()
        fm = f(Tensor(xm)).item()
        flat[i] = (fp - fm) / (2.0 * eps)
    return grad


class frozen:
    """Context manager that temporarily stops tracking gradients for ``params``."""

    def __init__(self, params: Iterable[Tensor]):
        self.params = [p for p in params if p.requires_grad]

    def __enter__(self):
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad = True
        return False
