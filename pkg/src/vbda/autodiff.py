"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op appends a node to the active :class:`Graph`; node ids are the
insertion order, so a reverse sweep over ids is a valid topological order.
Tensors that do not require gradients never enter a graph, which keeps
evaluation passes cheap.

Broadcasting is deliberately narrow: binary ops accept identical shapes or a
0-d operand. Anything wider goes through a dedicated op (``linear`` adds a
bias row, ``pick`` gathers per-row entries).
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._kernels import kernels
from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Graph",
    "RngStream",
    "GradCheckReport",
    "backward",
    "current_graph",
    "finite_difference_check",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "exp",
    "log",
    "tanh",
    "relu",
    "sigmoid",
    "clamp",
    "sum",
    "mean",
    "sum_rows",
    "pick",
    "softmax_rows",
    "gradient_reversal",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_graph", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None
        self._id = -1

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._graph = None
        t._id = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Graph:
    """Append-only tape. Usable as a context manager to scope one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self
        return False

    def node_id(self, t: Tensor) -> int:
        if t._graph is not None:
            if t._graph is not self:
                raise ContractError("tensor was produced on a different graph")
            return t._id
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), t, None))
            self._leaf_ids[key] = nid
        return nid

    def record(self, kind: str, inputs: Sequence[Tensor], data: np.ndarray, vjp) -> Tensor:
        requires_grad = any(t.requires_grad for t in inputs)
        out = Tensor._wrap(data, requires_grad)
        if not requires_grad:
            return out
        ids = tuple(self.node_id(t) for t in inputs)
        nid = len(self.nodes)
        if any(i >= nid for i in ids):
            raise ContractError("graph would become cyclic")
        self.nodes.append(Node(kind, ids, out, vjp))
        out._graph = self
        out._id = nid
        return out


_local = threading.local()


def _stack() -> list[Graph]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Graph()]
    return stack


def current_graph() -> Graph:
    """Innermost active graph. Outside any ``with Graph():`` block this is a
    per-thread default graph that grows until :func:`reset_default_graph`."""
    return _stack()[-1]


def reset_default_graph() -> None:
    _stack()[0] = Graph()


def _graph_for(inputs: Sequence[Tensor]) -> Graph:
    for t in inputs:
        if t._graph is not None:
            return t._graph
    return current_graph()


def _record(kind, inputs, data, vjp) -> Tensor:
    return _graph_for(inputs).record(kind, inputs, data, vjp)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    seed = np.ones_like(root.data)
    if root._graph is None:
        root.grad = seed if root.grad is None else root.grad + seed
        return
    nodes = root._graph.nodes
    pending: dict[int, np.ndarray] = {root._id: seed}
    for nid in range(root._id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        if node.vjp is None:
            t = node.output
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parts = node.vjp(g)
        for i, part in zip(node.inputs, parts):
            if part is None or not nodes[i].output.requires_grad:
                continue
            prev = pending.get(i)
            pending[i] = part if prev is None else prev + part


# ---------------------------------------------------------------------------
# ops


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def _check_binary(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(part: np.ndarray, like: Tensor) -> np.ndarray:
    if part.shape == like.shape:
        return part
    return np.asarray(part.sum()).reshape(like.shape)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _record("matmul", (a, b), A @ B, vjp)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` a bias vector added to every row."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    X, W = x.data, w.data

    def vjp(g):
        return g @ W.T, X.T @ g, g.sum(axis=0)

    return _record("linear", (x, w, b), X @ W + b.data, vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)

    def vjp(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _record("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)

    def vjp(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _record("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)
    A, B = a.data, b.data

    def vjp(g):
        return _reduce_to(g * B, a), _reduce_to(g * A, b)

    return _record("mul", (a, b), A * B, vjp)


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _record("neg", (x,), -x.data, lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _record("scale", (x,), c * x.data, lambda g: (c * g,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    if not np.isfinite(y).all():
        raise DomainError("exp overflowed to a non-finite value")
    return _record("exp", (x,), y, lambda g: (g * y,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    if (X <= 0).any():
        raise DomainError(f"log of non-positive entry (min {X.min()!r})")
    return _record("log", (x,), np.log(X), lambda g: (g / X,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = kernels.sigmoid(x.data)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; the gradient is zero where clipping is active."""
    x = _as_tensor(x)
    X = x.data
    inside = (X >= lo) & (X <= hi)
    return _record("clamp", (x,), np.clip(X, lo, hi), lambda g: (g * inside,))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    shape = x.shape
    return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, g.item()),))


def mean(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.size
    return _record("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(shape, g.item() / n),))


def sum_rows(x) -> Tensor:
    """Sum each row of a matrix, giving a vector."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"sum_rows needs a matrix, got shape {x.shape}")
    k = x.shape[1]
    return _record("sum_rows", (x,), x.data.sum(axis=1), lambda g: (np.repeat(g[:, None], k, axis=1),))


def pick(x, labels) -> Tensor:
    """Entry ``x[i, labels[i]]`` of every row."""
    x = _as_tensor(x)
    labels = np.asarray(labels, dtype=np.int64)
    if x.data.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionError(f"pick: labels of shape {labels.shape} for matrix {x.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[1]):
        raise ContractError(f"labels must lie in [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, labels] = g
        return (out,)

    return _record("pick", (x,), x.data[rows, labels], vjp)


def softmax_rows(logits) -> Tensor:
    x = _as_tensor(logits)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise DomainError("softmax_rows received non-finite logits")
    y = kernels.softmax_rows(x.data)
    return _record("softmax_rows", (x,), y, lambda g: (kernels.softmax_rows_backward(y, g),))


def gradient_reversal(x, lambda_d: float) -> Tensor:
    """Identity forward; the backward pass multiplies the gradient by ``-lambda_d``."""
    x = _as_tensor(x)
    if lambda_d < 0:
        raise ContractError(f"lambda_d must be non-negative, got {lambda_d}")
    c = -float(lambda_d)
    return _record("gradient_reversal", (x,), x.data.copy(), lambda g: (c * g,))


# ---------------------------------------------------------------------------
# randomness


def _derive_seed(seed: int, key: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Counter-based (Philox) random stream keyed by a 64-bit seed.

    ``spawn`` derives an independent child stream from a string key, so a run
    can hand separate streams to initialization, batching and sampling
    without their draws interfering.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) % (1 << 64)
        self._bitgen = np.random.Philox(key=self.seed, counter=counter)
        self.gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        return int(self._bitgen.state["state"]["counter"][0])

    def spawn(self, key: str) -> "RngStream":
        return RngStream(_derive_seed(self.seed, key))

    def normal(self, shape, loc=0.0, scale=1.0) -> np.ndarray:
        return self.gen.normal(loc, scale, size=shape)

    def uniform(self, low, high, shape) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape)

    def integers(self, low, high, size) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def random(self, size) -> np.ndarray:
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_coords: int
    worst: tuple[int, int] | None = None  # (parameter index, flat coordinate)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` takes no arguments and must rebuild its scalar output from the
    current contents of ``params``; any randomness inside it has to be frozen.
    The ``.grad`` of every parameter is overwritten with the analytic gradient.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")

    def value() -> float:
        with Graph():
            return f().item()

    first, second = value(), value()
    if first != second:
        raise ContractError("f is not deterministic; freeze its random draws")

    for p in params:
        p.grad = None
    with Graph():
        backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_err, worst, count = 0.0, None, 0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        grad = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = value()
            flat[i] = orig - epsilon
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = grad[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            count += 1
            if err > max_err or worst is None:
                max_err, worst = max(err, max_err), (k, i)
    return GradCheckReport(max_rel_err=max_err, passed=max_err <= tolerance, n_coords=count, worst=worst)
