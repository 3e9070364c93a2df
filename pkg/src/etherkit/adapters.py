"""Multiplicative and additive weight adapters for a frozen linear layer.

A linear layer stores ``W`` with shape (d, f) and computes ``x @ W + b`` for a
batch ``x`` of shape (batch, d), i.e. ``W.T x + b`` per sample. Multiplicative
adapters replace ``W`` by ``T @ W`` (and ``T @ W @ T_right`` for the two-sided
ETHER+), where ``T`` is block-diagonal with ``n`` square blocks. LoRA adds a
rank-``r`` product instead.

Plane vectors are stored unnormalized and normalized on every evaluation, so
the optimizer works on an unconstrained parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, normalize

METHODS = ("ether", "ether_plus", "oft", "naive", "lora")


# -- building blocks ---------------------------------------------------------
def householder(u_raw: Tensor) -> Tensor:
    """Reflection ``I - 2 u u^T`` across the hyperplane with normal ``u_raw/|u_raw|``."""
    u = normalize(u_raw)
    return T.eye(u.shape[0]) - T.scale(T.outer(u, u), 2.0)


def ether_plus_factor(u_raw: Tensor, v_raw: Tensor) -> Tensor:
    """Relaxed reflection ``I - u u^T + v v^T`` with both vectors normalized."""
    u = normalize(u_raw)
    v = normalize(v_raw)
    return T.eye(u.shape[0]) - T.outer(u, u) + T.outer(v, v)


def cayley(R: Tensor) -> Tensor:
    """Orthogonal ``(I + S)(I - S)^-1`` with ``S = (R - R^T) / 2``.

    ``I + S`` and ``(I - S)^-1`` commute, so the product is evaluated as a
    single solve ``(I - S)^-1 (I + S)``.
    """
    R = T.as_tensor(R)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise DimensionError(f"cayley: expected a square matrix, got {R.shape}")
    S = T.scale(R - R.T, 0.5)
    eye = T.eye(R.shape[0])
    return T.solve(eye - S, eye + S)


def _check_blocks(blocks: Sequence[Tensor]) -> int:
    if not blocks:
        raise ConfigurationError("at least one block is required")
    size = blocks[0].shape[0]
    for b in blocks:
        if b.ndim != 2 or b.shape != (size, size):
            raise ConfigurationError(
                f"blocks must be square and equally sized, got {[tuple(b.shape) for b in blocks]}"
            )
    return size


def build_block_diagonal(blocks: Sequence[Tensor]) -> Tensor:
    _check_blocks(blocks)
    return T.block_diag(blocks)


def block_parallel_apply(blocks: Sequence[Tensor], W: Tensor, side: str = "left") -> Tensor:
    """Multiply ``W`` by ``diag(blocks)`` without forming the dense matrix.

    ``side="left"`` computes ``diag(blocks) @ W`` by transforming each row slab
    of ``W`` with its own block; ``side="right"`` computes ``W @ diag(blocks)``
    slab-by-slab over columns. The per-block products touch disjoint slabs and
    can be evaluated in any order.
    """
    size = _check_blocks(blocks)
    n = len(blocks)
    if side not in ("left", "right"):
        raise ConfigurationError(f"side must be 'left' or 'right', got {side!r}")
    axis = 0 if side == "left" else 1
    if W.ndim != 2 or W.shape[axis] != n * size:
        raise ConfigurationError(
            f"{n} blocks of size {size} do not tile axis {axis} of a {W.shape} weight"
        )
    if n == 1:
        return blocks[0] @ W if side == "left" else W @ blocks[0]
    parts = []
    for i, block in enumerate(blocks):
        slab = T.take(W, i * size, (i + 1) * size, axis)
        parts.append(block @ slab if side == "left" else slab @ block)
    return T.concat(parts, axis)


def _split(d: int, n: int, what: str) -> int:
    if n < 1 or d % n:
        raise ConfigurationError(f"block count n={n} must divide {what}={d}")
    return d // n


# -- adapters ----------------------------------------------------------------
class Adapter:
    """Common surface of every adapter variant."""

    method = ""
    multiplicative = True

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def left_blocks(self) -> list[Tensor]:
        return []

    def right_blocks(self) -> list[Tensor]:
        return []

    def adapt(self, W: Tensor) -> Tensor:
        """Transformed weight via block-parallel application."""
        out = W
        left = self.left_blocks()
        if left:
            out = block_parallel_apply(left, out, "left")
        right = self.right_blocks()
        if right:
            out = block_parallel_apply(right, out, "right")
        return out

    def factors(self) -> list[tuple[str, np.ndarray]]:
        """Dense transformation matrices, tagged with the side they act on."""
        out = []
        left, right = self.left_blocks(), self.right_blocks()
        if left:
            out.append(("left", build_block_diagonal(left).data))
        if right:
            out.append(("right", build_block_diagonal(right).data))
        return out

    def block_factors(self) -> list[np.ndarray]:
        return [b.data for b in self.left_blocks() + self.right_blocks()]

    def state(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.state()
        if set(own) != set(state):
            raise ConfigurationError(f"state keys {sorted(state)} do not match {sorted(own)}")
        for name, tensor in self._named():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != {tensor.shape}")
            tensor.data[...] = value

    def _named(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError


def _named_list(prefix: str, items: Sequence[Tensor]) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{i}", t) for i, t in enumerate(items)]


@dataclass
class EtherAdapter(Adapter):
    """Block-diagonal Householder reflection applied on the left of ``W``."""

    raw_planes: list[Tensor]
    method = "ether"

    @property
    def n(self) -> int:
        return len(self.raw_planes)

    def parameters(self):
        return list(self.raw_planes)

    def left_blocks(self):
        return [householder(u) for u in self.raw_planes]

    def _named(self):
        return _named_list("u", self.raw_planes)

    def state(self):
        return {k: t.data.copy() for k, t in self._named()}


@dataclass
class EtherPlusAdapter(Adapter):
    """Relaxed reflections ``I - uu^T + vv^T`` on the left and optionally the right."""

    left: list[tuple[Tensor, Tensor]]
    right: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    method = "ether_plus"

    @property
    def n(self) -> int:
        return len(self.left)

    @property
    def two_sided(self) -> bool:
        return bool(self.right)

    def parameters(self):
        return [t for pair in self.left + self.right for t in pair]

    def left_blocks(self):
        return [ether_plus_factor(u, v) for u, v in self.left]

    def right_blocks(self):
        return [ether_plus_factor(u, v) for u, v in self.right]

    def _named(self):
        named = []
        for side, pairs in (("left", self.left), ("right", self.right)):
            for i, (u, v) in enumerate(pairs):
                named += [(f"{side}.u.{i}", u), (f"{side}.v.{i}", v)]
        return named

    def state(self):
        return {k: t.data.copy() for k, t in self._named()}


@dataclass
class OftAdapter(Adapter):
    """Block-diagonal Cayley rotations; starts at the identity with ``R = 0``."""

    R_blocks: list[Tensor]
    method = "oft"

    @property
    def n(self) -> int:
        return len(self.R_blocks)

    def parameters(self):
        return list(self.R_blocks)

    def left_blocks(self):
        return [cayley(R) for R in self.R_blocks]

    def skew_blocks(self) -> list[np.ndarray]:
        return [0.5 * (R.data - R.data.T) for R in self.R_blocks]

    def _named(self):
        return _named_list("R", self.R_blocks)

    def state(self):
        return {k: t.data.copy() for k, t in self._named()}


@dataclass
class NaiveAdapter(Adapter):
    """Unconstrained block-diagonal matrix, trained directly from the identity."""

    N_blocks: list[Tensor]
    method = "naive"

    @property
    def n(self) -> int:
        return len(self.N_blocks)

    def parameters(self):
        return list(self.N_blocks)

    def left_blocks(self):
        return list(self.N_blocks)

    def _named(self):
        return _named_list("N", self.N_blocks)

    def state(self):
        return {k: t.data.copy() for k, t in self._named()}


@dataclass
class LoraAdapter(Adapter):
    """Additive ``W + (alpha / r) A @ B`` with ``A`` (d, r) and ``B_mat`` (r, f)."""

    A: Tensor
    B_mat: Tensor
    alpha: float
    method = "lora"
    multiplicative = False

    @property
    def r(self) -> int:
        return self.A.shape[1]

    @property
    def n(self) -> int:
        return 1

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def parameters(self):
        return [self.A, self.B_mat]

    def delta(self) -> Tensor:
        return T.scale(self.A @ self.B_mat, self.scaling)

    def adapt(self, W):
        return W + self.delta()

    def factors(self):
        return []

    def _named(self):
        return [("A", self.A), ("B", self.B_mat)]

    def state(self):
        return {k: t.data.copy() for k, t in self._named()}


@dataclass
class IdentityAdapter(Adapter):
    """No trainable parameters; the layer behaves like its frozen base."""

    method = "none"
    multiplicative = False

    def parameters(self):
        return []

    def adapt(self, W):
        return W

    def factors(self):
        return []

    def _named(self):
        return []

    def state(self):
        return {}


# -- layer -------------------------------------------------------------------
@dataclass
class AdaptedLinear:
    """Frozen ``W`` (d, f) and ``b`` (f,) with an attached adapter."""

    W: Tensor
    b: Tensor
    adapter: Adapter = field(default_factory=IdentityAdapter)

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise DimensionError(f"weight {self.W.shape} and bias {self.b.shape} are incompatible")
        if self.W.requires_grad or self.b.requires_grad:
            raise ConfigurationError("base weight and bias must be frozen")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def f(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[Tensor]:
        return self.adapter.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return adapter_forward(self, x)


def adapter_forward(layer: AdaptedLinear, x: Tensor) -> Tensor:
    """``x @ T(W) + b`` for a batch ``x`` of shape (batch, d)."""
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.d:
        raise DimensionError(f"input {x.shape} does not match layer input dimension {layer.d}")
    adapter = layer.adapter
    if isinstance(adapter, LoraAdapter):
        # low-rank path keeps the dense delta out of the forward pass
        y = x @ layer.W + T.scale((x @ adapter.A) @ adapter.B_mat, adapter.scaling)
    else:
        y = x @ adapter.adapt(layer.W)
    return T.add_row(y, layer.b)


def merge(layer: AdaptedLinear) -> np.ndarray:
    """Fold the adapter into a plain weight using dense transformation matrices."""
    adapter = layer.adapter
    W = layer.W.data
    if isinstance(adapter, LoraAdapter):
        return W + adapter.scaling * (adapter.A.data @ adapter.B_mat.data)
    out = W
    for side, M in adapter.factors():
        out = M @ out if side == "left" else out @ M
    return out.copy()


# -- construction ------------------------------------------------------------
def _unit_gaussian(rng: np.random.Generator, size: int) -> Tensor:
    v = rng.standard_normal(size)
    return Tensor(v / np.linalg.norm(v), requires_grad=True)


def init_adapter(method: str, d: int, f: int, n: int = 1, r: int = 1, seed: int = 0,
                 two_sided: bool = True, alpha: float | None = None,
                 rng: np.random.Generator | None = None) -> Adapter:
    """Create an adapter for a (d, f) weight.

    OFT and Naive start at the identity, LoRA at a zero delta and ETHER+ with
    ``v = u`` (identity). ETHER cannot start at the identity; its normals are
    drawn from an isotropic Gaussian.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if method == "ether":
        m = _split(d, n, "d")
        return EtherAdapter([_unit_gaussian(rng, m) for _ in range(n)])
    if method == "ether_plus":
        m = _split(d, n, "d")
        left = []
        for _ in range(n):
            u = _unit_gaussian(rng, m)
            left.append((u, Tensor(u.data, requires_grad=True)))
        right = []
        if two_sided:
            k = _split(f, n, "f")
            for _ in range(n):
                u = _unit_gaussian(rng, k)
                right.append((u, Tensor(u.data, requires_grad=True)))
        return EtherPlusAdapter(left, right)
    if method == "oft":
        m = _split(d, n, "d")
        return OftAdapter([Tensor(np.zeros((m, m)), requires_grad=True) for _ in range(n)])
    if method == "naive":
        m = _split(d, n, "d")
        return NaiveAdapter([Tensor(np.eye(m), requires_grad=True) for _ in range(n)])
    if method == "lora":
        if r < 1:
            raise ConfigurationError(f"LoRA rank must be at least 1, got {r}")
        A = Tensor(rng.standard_normal((d, r)) / np.sqrt(d), requires_grad=True)
        B = Tensor(np.zeros((r, f)), requires_grad=True)
        return LoraAdapter(A, B, float(r if alpha is None else alpha))
    if method == "none":
        return IdentityAdapter()
    raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")
