"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure propagating the upstream gradient into them. Calling
:func:`backward` on a scalar orders the recorded graph topologically (a
:class:`Tape`) and runs the closures in reverse.

Only scalar-to-tensor broadcasting is supported. Adding a bias row to a batch
goes through the explicit :func:`add_row` operation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateVectorError, DimensionError, NumericalError

EPS_NORM = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[], None] | None = None
        self.op = _op

    # -- introspection -------------------------------------------------
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
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # -- operators -----------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n))


def _result(data, parents, op) -> Tensor:
    # op outputs are freshly allocated, so skip the defensive copy of __init__
    parents = tuple(p for p in parents if p.requires_grad)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = bool(parents)
    out.grad = None
    out._parents = parents
    out._backward = None
    out.op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = _result(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        out._backward = _backward
    return out


def outer(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"outer: expected equal-length vectors, got {u.shape} and {v.shape}")
    out = _result(np.outer(u.data, v.data), (u, v), "outer")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accumulate(u, g @ v.data)
            _accumulate(v, g.T @ u.data)
        out._backward = _backward
    return out


def normalize(u) -> Tensor:
    """Scale a vector to unit Euclidean length.

    The backward pass projects the upstream gradient onto the tangent space of
    the sphere at the output and divides by the input norm.
    """
    u = as_tensor(u)
    if u.ndim != 1:
        raise DimensionError(f"normalize: expected a vector, got shape {u.shape}")
    norm = float(np.linalg.norm(u.data))
    if not norm > EPS_NORM:
        raise DegenerateVectorError(f"normalize: vector norm {norm:.3e} is below {EPS_NORM:g}")
    unit = u.data / norm
    out = _result(unit, (u,), "normalize")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accumulate(u, (g - unit * (unit @ g)) / norm)
        out._backward = _backward
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    out = _result(a.data.T.copy(), (a,), "transpose")
    if out.requires_grad:
        def _backward():
            _accumulate(a, out.grad.T)
        out._backward = _backward
    return out


def solve(a, b) -> Tensor:
    """Return X with a @ X = b."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise DimensionError(f"solve: incompatible shapes {a.shape} and {b.shape}")
    try:
        x = np.linalg.solve(a.data, b.data)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"solve: singular system of size {a.shape[0]}") from exc
    out = _result(x, (a, b), "solve")
    if out.requires_grad:
        def _backward():
            gb = np.linalg.solve(a.data.T, out.grad)
            _accumulate(b, gb)
            _accumulate(a, -gb @ x.T)
        out._backward = _backward
    return out


# -- elementwise -------------------------------------------------------------
def _binary_operands(a, b, name):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ (only scalar broadcast is supported)")
    return a, b


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accumulate(a, _reduce_to(g, a.shape))
            _accumulate(b, _reduce_to(g, b.shape))
        out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accumulate(a, _reduce_to(g, a.shape))
            _accumulate(b, -_reduce_to(g, b.shape))
        out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accumulate(a, _reduce_to(g * b.data, a.shape))
            _accumulate(b, _reduce_to(g * a.data, b.shape))
        out._backward = _backward
    return out


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = _result(a.data * c, (a,), "scale")
    if out.requires_grad:
        def _backward():
            _accumulate(a, out.grad * c)
        out._backward = _backward
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = _result(np.where(mask, a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        def _backward():
            _accumulate(a, out.grad * mask)
        out._backward = _backward
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = _result(y, (a,), "tanh")
    if out.requires_grad:
        def _backward():
            _accumulate(a, out.grad * (1.0 - y * y))
        out._backward = _backward
    return out


def add_row(x, row) -> Tensor:
    """Add a length-f vector to every row of a (batch, f) matrix."""
    x, row = as_tensor(x), as_tensor(row)
    if x.ndim != 2 or row.ndim != 1 or x.shape[1] != row.shape[0]:
        raise DimensionError(f"add_row: cannot add {row.shape} to the rows of {x.shape}")
    out = _result(x.data + row.data, (x, row), "add_row")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accumulate(x, g)
            _accumulate(row, g.sum(axis=0))
        out._backward = _backward
    return out


# -- reductions --------------------------------------------------------------
def sum(a) -> Tensor:  # noqa: A001 - mirrors the numpy name
    a = as_tensor(a)
    out = _result(np.asarray(a.data.sum()), (a,), "sum")
    if out.requires_grad:
        def _backward():
            _accumulate(a, np.full(a.shape, float(out.grad)))
        out._backward = _backward
    return out


def loss_mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss_mse: prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = _result(np.asarray((diff * diff).sum() / n), (pred, target), "mse")
    if out.requires_grad:
        def _backward():
            g = float(out.grad) * 2.0 / n * diff
            _accumulate(pred, g)
            _accumulate(target, -g)
        out._backward = _backward
    return out


# -- structure ---------------------------------------------------------------
def take(a, start: int, stop: int, axis: int) -> Tensor:
    """Slice ``a[start:stop]`` along ``axis`` of a matrix."""
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[axis]:
        raise DimensionError(f"take: slice [{start}:{stop}] on axis {axis} invalid for {a.shape}")
    index = (slice(start, stop), slice(None)) if axis == 0 else (slice(None), slice(start, stop))
    out = _result(a.data[index].copy(), (a,), "take")
    if out.requires_grad:
        def _backward():
            g = np.zeros_like(a.data)
            g[index] = out.grad
            _accumulate(a, g)
        out._backward = _backward
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    out = _result(data, parts, "concat")
    if out.requires_grad:
        bounds = np.cumsum([0] + [p.shape[axis] for p in parts])
        def _backward():
            pieces = np.split(out.grad, bounds[1:-1], axis=axis)
            for p, g in zip(parts, pieces):
                _accumulate(p, g)
        out._backward = _backward
    return out


def block_diag(blocks: Sequence[Tensor]) -> Tensor:
    """Dense block-diagonal matrix with the given square blocks on the diagonal."""
    blocks = [as_tensor(b) for b in blocks]
    sizes = [b.shape[0] for b in blocks]
    if any(b.ndim != 2 or b.shape[0] != b.shape[1] for b in blocks):
        raise DimensionError(f"block_diag: blocks must be square, got {[b.shape for b in blocks]}")
    total = int(np.sum(sizes))
    data = np.zeros((total, total))
    offsets = np.cumsum([0] + sizes)
    for b, lo, hi in zip(blocks, offsets[:-1], offsets[1:]):
        data[lo:hi, lo:hi] = b.data
    out = _result(data, blocks, "block_diag")
    if out.requires_grad:
        def _backward():
            for b, lo, hi in zip(blocks, offsets[:-1], offsets[1:]):
                _accumulate(b, out.grad[lo:hi, lo:hi])
        out._backward = _backward
    return out


# -- differentiation ---------------------------------------------------------
class Tape:
    """Recorded operations reachable from a root, parents before children."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents and n.requires_grad]

    def run_backward(self, root: Tensor) -> None:
        for node in self.nodes:
            if node._parents:
                node.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward()


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Tensors listed in ``inputs`` that the loss does not depend on receive a
    zero gradient instead of keeping ``grad = None``.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    if loss.requires_grad:
        tape.run_backward(loss)
    for t in inputs:
        if t.grad is None:
            t.zero_grad()
    return tape


# -- finite differences ------------------------------------------------------
def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` with respect to ``param``.

    ``param.data`` is perturbed in place and restored afterwards. Only forward
    values are used.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn().item()
        flat[i] = orig - step
        minus = fn().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative difference, with an absolute floor for tiny gradients."""
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6) -> list[float]:
    """Relative error between tape and central-difference gradients per parameter."""
    for p in params:
        p.grad = None
    backward(fn(), params)
    analytic = [p.grad.copy() for p in params]
    return [relative_error(g, numerical_gradient(fn, p, step)) for g, p in zip(analytic, params)]
