# services/autograd.py

"""
Dense tensors with reverse-mode automatic differentiation.

Every operation that consumes a tensor with `requires_grad=True` appends a
node to the active tape. Nodes are appended in creation order, so the tape is
topologically ordered by construction; `backward` walks it in reverse,
starting at the loss node, and visits each node exactly once.

A tape is confined to the thread that created it. Use `new_tape()` to give
each forward pass its own tape and `no_grad()` for inference.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.mac_counter import record_macs
from utils.error_handler import ContractError, DimensionError, IndexOutOfRangeError

# Reductions over more terms than this accumulate in float64.
WIDE_REDUCTION_THRESHOLD = 4096

_dtype_state = {"dtype": np.float32}
_state = threading.local()


def get_default_dtype():
    return _dtype_state["dtype"]


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the storage dtype of newly created tensors (used by gradient checks)."""
    previous = _dtype_state["dtype"]
    _dtype_state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype_state["dtype"] = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node:
    __slots__ = ("out", "parents", "backward_fn", "op", "tape", "index", "consumed")

    def __init__(self, out: "Tensor", parents: Tuple["Tensor", ...], backward_fn: Callable, op: str):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.tape: Optional["Tape"] = None
        self.index = -1
        self.consumed = False


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        node.tape = self
        node.index = len(self.nodes)
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.tape = None
            node.out._node = None
        self.nodes = []

    def backward(self, loss: "Tensor") -> None:
        backward(loss)


def current_tape() -> Tape:
    if getattr(_state, "tape", None) is None:
        _state.tape = Tape()
    return _state.tape


@contextmanager
def new_tape() -> Iterator[Tape]:
    previous = getattr(_state, "tape", None)
    tape = Tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = previous


class Tensor:
    """Row-major dense array plus an optional gradient of identical shape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward_fn: Callable,
        op: str,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data).astype(get_default_dtype(), copy=False)
        out.grad = None
        out.name = None
        out._node = None
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            node = Node(out, tuple(parents), backward_fn, op)
            current_tape().record(node)
            out._node = node
        return out

    # ---- properties ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def op(self) -> Optional[str]:
        return self._node.op if self._node is not None else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # ---- operators ----
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

    def __repr__(self):
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{grad_flag}{label})"


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def wide_sum(arr: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Sum that switches to float64 accumulation for wide reductions."""
    if axis is None:
        count = arr.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([arr.shape[a] for a in axes])) if axes else 1
    if count > WIDE_REDUCTION_THRESHOLD:
        return np.sum(arr, axis=axis, keepdims=keepdims, dtype=np.float64).astype(arr.dtype)
    return np.sum(arr, axis=axis, keepdims=keepdims)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad.reshape(shape)


# ---- backward ----

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable tensor that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    node = loss._node
    if node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise ContractError("backward() called on a tensor that is not recorded on any tape")
    tape = node.tape
    if tape is None or node.consumed:
        raise ContractError(
            "backward() already ran through this graph; reset the tape and run a new forward pass",
            error_code="TAPE_CONSUMED",
        )

    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    visited: List[Node] = []

    for current in reversed(tape.nodes[: node.index + 1]):
        key = id(current.out)
        g = grads.pop(key, None)
        holders.pop(key, None)
        if g is None:
            continue
        if current.consumed:
            raise ContractError(
                "backward() reached a node consumed by an earlier backward pass",
                error_code="TAPE_CONSUMED",
            )
        current.out.grad = g
        parent_grads = current.backward_fn(g)
        for parent, parent_grad in zip(current.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.data.shape:
                raise DimensionError(
                    f"gradient shape mismatch in '{current.op}'",
                    shapes=(parent_grad.shape, parent.data.shape),
                )
            pkey = id(parent)
            if pkey in grads:
                grads[pkey] = grads[pkey] + parent_grad
            else:
                grads[pkey] = parent_grad
                holders[pkey] = parent
        current.consumed = True
        visited.append(current)

    # Whatever is left belongs to leaves (or tensors recorded elsewhere).
    for pkey, tensor in holders.items():
        g = grads[pkey].astype(tensor.data.dtype, copy=False)
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g

    for current in visited:
        for parent in current.parents:
            if parent.requires_grad and parent.grad is None:
                parent.grad = np.zeros_like(parent.data)


# ---- elementwise ----

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), _backward, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), _backward, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), _backward, "mul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def _backward(g):
        return (g * out,)

    return Tensor._from_op(out, (x,), _backward, "exp")


def _stable_sigmoid(values: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * values))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)

    def _backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), _backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out = x.data * s

    def _backward(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return Tensor._from_op(out, (x,), _backward, "silu")


# softplus is strictly positive; float32 underflow is floored here
SOFTPLUS_FLOOR = float(np.finfo(np.float32).tiny)


def softplus(x: Tensor) -> Tensor:
    out = np.maximum(np.logaddexp(0.0, x.data), SOFTPLUS_FLOOR)

    def _backward(g):
        return (g * _stable_sigmoid(x.data),)

    return Tensor._from_op(out, (x,), _backward, "softplus")


# ---- reductions and movement ----

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = wide_sum(x.data, axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return Tensor._from_op(out, (x,), _backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = wide_sum(x.data, axis=axis, keepdims=keepdims) / count

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.data.dtype),)

    return Tensor._from_op(out, (x,), _backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError("cannot reshape", shapes=(x.shape, shape)) from e

    def _backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), _backward, "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def _backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(out, (x,), _backward, "transpose")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise DimensionError(f"invalid column slice [{start}:{stop}]", shapes=(x.shape,))
    out = x.data[:, start:stop]

    def _backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(out, (x,), _backward, "slice_cols")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    widths = {t.shape[1:] for t in tensors}
    if len(widths) != 1:
        raise DimensionError("concat_rows needs equal trailing extents", shapes=[t.shape for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def _backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._from_op(out, tuple(tensors), _backward, "concat_rows")


# ---- linear algebra ----

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul inner extents disagree", shapes=(a.shape, b.shape))
    m, k = a.shape
    n = b.shape[1]
    if k > WIDE_REDUCTION_THRESHOLD:
        out = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(a.data.dtype)
    else:
        out = a.data @ b.data
    record_macs(m * k * n)

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), _backward, "matmul")


# ---- indexing ----

def _check_rows(idx, n_rows: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size:
        bad = idx[(idx < 0) | (idx >= n_rows)]
        if bad.size:
            raise IndexOutOfRangeError(
                f"row index {int(bad[0])} out of range for {n_rows} rows",
                index=int(bad[0]),
                size=n_rows,
            )
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows of `x` in the order given by `idx`."""
    if x.ndim != 2:
        raise DimensionError("gather_rows needs a matrix", shapes=(x.shape,))
    idx = _check_rows(idx, x.shape[0])
    out = x.data[idx]

    def _backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(out, (x,), _backward, "gather_rows")


def scatter_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of `base` with `rows[i]` written at row `idx[i]`; the adjoint of gather_rows."""
    if base.ndim != 2 or rows.ndim != 2 or base.shape[1] != rows.shape[1]:
        raise DimensionError("scatter_rows width mismatch", shapes=(base.shape, rows.shape))
    idx = _check_rows(idx, base.shape[0])
    if idx.size != rows.shape[0]:
        raise DimensionError("scatter_rows needs one row per index", shapes=((idx.size,), rows.shape))
    if np.unique(idx).size != idx.size:
        raise ContractError("scatter_rows indices must be distinct")
    out = base.data.copy()
    out[idx] = rows.data

    def _backward(g):
        g_base = g.copy()
        g_base[idx] = 0.0
        return g_base, g[idx]

    return Tensor._from_op(out, (base, rows), _backward, "scatter_rows")


def argsort(values: TensorLike) -> np.ndarray:
    """Stable ascending argsort; ties keep their original order."""
    data = values.data if isinstance(values, Tensor) else np.asarray(values)
    return np.argsort(data.reshape(-1), kind="stable")
