"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every operation is a pair (forward, vjp) registered in ``OPS``. When a
:class:`Tape` is active, applying an operation appends a node holding the
input ids, the output id and the keyword arguments, so the tape can be both
replayed forward and walked backward.

    >>> with Tape() as tape:
    ...     x = tape.watch(Tensor([3.0]))
    ...     y = tsum(mul(x, x))
    >>> tape.backward(AdjointSeed(y.node_id, Tensor(1.0)))[x.node_id].data
    array([6.])
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, Sequence, float, int]

_ids = itertools.count(1)
_local = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptySetError(ValueError):
    """A set operation received zero elements."""


class Tensor:
    """Immutable dense array of 64-bit floats with a unique node id."""

    __slots__ = ("data", "node_id")

    def __init__(self, data: ArrayLike, node_id: Optional[int] = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.node_id = next(_ids) if node_id is None else node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> List[float]:
        """Values in row-major order."""
        return self.data.ravel(order="C").tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, id={self.node_id})"


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class AdjointSeed:
    """Cotangent injected at ``target`` when running the tape backward."""

    target: int
    cotangent: Tensor


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    output: int
    kwargs: Dict = field(default_factory=dict)


class Tape:
    """Ordered record of operations, usable as a context manager.

    Leaves (watched tensors and constants first seen as op inputs) are stored
    by id; nodes are appended in execution order, so inputs always precede
    the node that consumes them.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.leaves: Dict[int, np.ndarray] = {}
        self.values: Dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def watch(self, t: Tensor) -> Tensor:
        if t.node_id not in self.values:
            self.leaves[t.node_id] = t.data
            self.values[t.node_id] = t.data
        return t

    def __contains__(self, node_id: int) -> bool:
        return node_id in self.values

    def _record(self, op: str, inputs: Sequence[Tensor], out: Tensor, kwargs: Dict) -> None:
        for t in inputs:
            self.watch(t)
        self.nodes.append(Node(op, tuple(t.node_id for t in inputs), out.node_id, kwargs))
        self.values[out.node_id] = out.data

    def replay(self, leaves: Optional[Mapping[int, ArrayLike]] = None) -> Dict[int, np.ndarray]:
        """Recompute every node forward, optionally substituting leaf values."""
        vals: Dict[int, np.ndarray] = dict(self.leaves)
        if leaves:
            for k, v in leaves.items():
                if k not in self.leaves:
                    raise KeyError(f"node {k} is not a leaf of this tape")
                vals[k] = np.asarray(v, dtype=np.float64)
        for node in self.nodes:
            fwd = OPS[node.op][0]
            vals[node.output] = fwd(*(vals[i] for i in node.inputs), **node.kwargs)
        return vals

    def backward(
        self,
        seeds: Union[AdjointSeed, Iterable[AdjointSeed]],
        wrt: Optional[Iterable[int]] = None,
    ) -> Dict[int, Tensor]:
        """Vector-Jacobian products for the given adjoint seeds.

        Returns cotangents for ``wrt`` ids (all nodes reached when ``None``);
        requested ids that receive no cotangent get zeros.
        """
        if isinstance(seeds, AdjointSeed):
            seeds = [seeds]
        cot: Dict[int, np.ndarray] = {}
        for s in seeds:
            if s.target not in self.values:
                raise KeyError(f"seed target node {s.target} is not on this tape")
            target_shape = self.values[s.target].shape
            if s.cotangent.shape != target_shape:
                raise DimensionError(
                    f"seed cotangent shape {list(s.cotangent.shape)} != target shape {list(target_shape)}"
                )
            _accumulate(cot, s.target, s.cotangent.data)

        for node in reversed(self.nodes):
            g = cot.get(node.output)
            if g is None:
                continue
            vjp = OPS[node.op][1]
            ins = [self.values[i] for i in node.inputs]
            grads = vjp(g, self.values[node.output], *ins, **node.kwargs)
            for i, gi in zip(node.inputs, grads):
                if gi is not None:
                    _accumulate(cot, i, gi)

        if wrt is None:
            return {k: Tensor(v) for k, v in cot.items()}
        out = {}
        for k in wrt:
            if k not in self.values:
                raise KeyError(f"node {k} is not on this tape")
            v = cot.get(k)
            out[k] = Tensor(v if v is not None else np.zeros_like(self.values[k]))
        return out


def _accumulate(cot: Dict[int, np.ndarray], key: int, g: np.ndarray) -> None:
    prev = cot.get(key)
    cot[key] = g if prev is None else prev + g


def _stack() -> List[Tape]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> Optional[Tape]:
    st = _stack()
    return st[-1] if st else None


def backward(tape: Tape, seed: Union[AdjointSeed, Iterable[AdjointSeed]], wrt: Optional[Iterable[int]] = None) -> Dict[int, Tensor]:
    return tape.backward(seed, wrt)


def grad(tape: Tape, output: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradient of a scalar ``output`` with respect to each tensor in ``wrt``."""
    if output.shape != ():
        raise DimensionError(f"grad needs a scalar output, got shape {list(output.shape)}")
    res = tape.backward(AdjointSeed(output.node_id, Tensor(1.0)), [t.node_id for t in wrt])
    return [res[t.node_id].data for t in wrt]


# ---------------------------------------------------------------------------
# operation registry

OPS: Dict[str, Tuple[Callable, Callable]] = {}


def _apply(op: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    fwd = OPS[op][0]
    out = Tensor(fwd(*(t.data for t in inputs), **kwargs))
    tape = active_tape()
    if tape is not None:
        tape._record(op, inputs, out, kwargs)
    return out


def _register(name: str, fwd: Callable, vjp: Callable) -> None:
    OPS[name] = (fwd, vjp)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shape {list(a.shape)} vs {list(b.shape)}")


_register("matmul", lambda a, b: a @ b, lambda g, out, a, b: (g @ b.T, a.T @ g))
_register("add", lambda a, b: a + b, lambda g, out, a, b: (g, g))
_register("sub", lambda a, b: a - b, lambda g, out, a, b: (g, -g))
_register("mul", lambda a, b: a * b, lambda g, out, a, b: (g * b, g * a))
_register("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0),))
_register("scale", lambda a, c: a * c, lambda g, out, a, c: (g * c,))
_register("add_row", lambda x, b: x + b, lambda g, out, x, b: (g, g.sum(axis=0)))
_register("sum", lambda a: np.asarray(a.sum()), lambda g, out, a: (np.full(a.shape, float(g)),))
_register("reshape", lambda a, shape: a.reshape(shape), lambda g, out, a, shape: (g.reshape(a.shape),))
_register(
    "columns",
    lambda a, start, stop: a[:, start:stop].copy(),
    lambda g, out, a, start, stop: (_pad_columns(g, a.shape, start, stop),),
)


def _pad_columns(g: np.ndarray, shape, start: int, stop: int) -> np.ndarray:
    full = np.zeros(shape)
    full[:, start:stop] = g
    return full


def _concat_fwd(*parts):
    return np.concatenate(parts)


def _concat_vjp(g, out, *parts):
    res, pos = [], 0
    for p in parts:
        res.append(g[pos : pos + p.shape[0]])
        pos += p.shape[0]
    return tuple(res)


_register("concat", _concat_fwd, _concat_vjp)


def _pool_fwd(x, kind):
    if kind == "mean":
        return x.sum(axis=0) / x.shape[0]
    return x.max(axis=0)


def _pool_vjp(g, out, x, kind):
    if kind == "mean":
        return (np.broadcast_to(g / x.shape[0], x.shape).copy(),)
    # ties go to the lowest row index, which is what argmax returns
    idx = np.argmax(x, axis=0)
    res = np.zeros_like(x)
    res[idx, np.arange(x.shape[1])] = g
    return (res,)


_register("set_pool", _pool_fwd, _pool_vjp)


def _norm_rows_fwd(x, eps):
    n = np.sqrt((x * x).sum(axis=1, keepdims=True) + eps)
    return x / n


def _norm_rows_vjp(g, out, x, eps):
    n = np.sqrt((x * x).sum(axis=1, keepdims=True) + eps)
    return ((g - out * (g * out).sum(axis=1, keepdims=True)) / n,)


_register("normalize_rows", _norm_rows_fwd, _norm_rows_vjp)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _xent_fwd(logits, labels):
    lp = _log_softmax(logits)
    return np.asarray(-lp[np.arange(len(labels)), labels].mean())


def _xent_vjp(g, out, logits, labels):
    p = np.exp(_log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1.0
    return (p * (float(g) / len(labels)),)


_register("softmax_cross_entropy", _xent_fwd, _xent_vjp)


# ---------------------------------------------------------------------------
# public operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    return _apply("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _apply("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _apply("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    return _apply("mul", [a, b])


def relu(a: Tensor) -> Tensor:
    return _apply("relu", [_as_tensor(a)])


def scale(a: Tensor, c: float) -> Tensor:
    return _apply("scale", [_as_tensor(a)], c=float(c))


def elementwise(kind: str, *operands, **kw) -> Tensor:
    """Dispatch by name: add, sub, mul, relu or scale."""
    fns = {"add": add, "sub": sub, "mul": mul, "relu": relu, "scale": scale}
    if kind not in fns:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return fns[kind](*operands, **kw)


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of matrix ``x`` (bias add)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_row: {list(x.shape)} and {list(b.shape)}")
    return _apply("add_row", [x, b])


def tsum(a: Tensor) -> Tensor:
    return _apply("sum", [_as_tensor(a)])


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: {list(a.shape)} to {list(shape)}")
    return _apply("reshape", [a], shape=shape)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"columns: [{start}:{stop}] of {list(a.shape)}")
    return _apply("columns", [a], start=int(start), stop=int(stop))


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if any(p.data.ndim != 1 for p in parts):
        raise DimensionError("concat: only 1-D tensors")
    return _apply("concat", parts)


def set_pool(x: Tensor, kind: str = "mean") -> Tensor:
    """Per-column mean or max over the rows (set elements) of ``x``."""
    x = _as_tensor(x)
    if kind not in ("mean", "max"):
        raise ValueError(f"unknown pooling {kind!r}")
    if x.data.ndim != 2:
        raise DimensionError(f"set_pool: expected a matrix, got {list(x.shape)}")
    if x.shape[0] == 0:
        raise EmptySetError("empty client dataset")
    return _apply("set_pool", [x], kind=kind)


def normalize_rows(x: Tensor, eps: float = 0.0) -> Tensor:
    """Scale every row to unit L2 norm."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"normalize_rows: expected a matrix, got {list(x.shape)}")
    return _apply("normalize_rows", [x], eps=float(eps))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {list(logits.shape)}, labels {list(labels.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"label out of range [0, {logits.shape[1]})")
    labels.flags.writeable = False
    return _apply("softmax_cross_entropy", [logits], labels=labels)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[Mapping[str, np.ndarray]] = None,
    weight_decay: float = 0.0,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """One heavy-ball step: ``v = momentum*v + g; p = p - lr*v``.

    Returns the new parameters and the new velocity; inputs are not modified.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    missing = sorted(set(params) ^ set(grads))
    if missing:
        raise KeyError(f"params and grads keys differ: {missing}")
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if weight_decay:
            g = g + weight_decay * p
        v = g if velocity is None or momentum == 0.0 else momentum * velocity[k] + g
        new_v[k] = v
        new_p[k] = p - lr * v
    return new_p, new_v
