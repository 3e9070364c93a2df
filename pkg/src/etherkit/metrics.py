"""Distances, orthogonality diagnostics, hyperspherical energy and cost counting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .adapters import Adapter
from .errors import ConfigurationError, DegenerateVectorError, DimensionError

EPS_HE = 1e-9
HE_POWER = 1.0


@dataclass
class MetricsRecord:
    method: str
    n: int
    transform_distance: float
    weights_distance: float
    delta_he: float
    param_count: int
    op_count: tuple[int, int]
    per_layer_transform: list[float] = field(default_factory=list)
    per_layer_weights: list[float] = field(default_factory=list)
    max_block_distance: float = 0.0
    additive: bool = False

    def __post_init__(self):
        if not self.transform_distance >= 0:
            raise ValueError(f"transform_distance must be non-negative, got {self.transform_distance}")


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def transformation_distance(adapter: Adapter, d: int | None = None, f: int | None = None) -> float:
    """``|T - I|_F`` of the adapter's transformation.

    Two-sided adapters report the sum over both factors. LoRA has no
    multiplicative factor; its additive ``|dW|_F`` is returned instead and is
    not comparable with the multiplicative distances.
    """
    if not adapter.multiplicative:
        delta = getattr(adapter, "delta", None)
        return 0.0 if delta is None else float(np.linalg.norm(delta().data))
    total = 0.0
    for _, M in adapter.factors():
        total += float(np.linalg.norm(M - np.eye(M.shape[0])))
    return total


def block_distances(adapter: Adapter) -> list[float]:
    """``|H_i - I|_F`` for every individual diagonal block (both sides)."""
    return [float(np.linalg.norm(B - np.eye(B.shape[0]))) for B in adapter.block_factors()]


def weights_distance(W, W_prime) -> float:
    W, W_prime = _as_array(W), _as_array(W_prime)
    if W.shape != W_prime.shape:
        raise DimensionError(f"weights_distance: shapes {W.shape} and {W_prime.shape} differ")
    return float(np.linalg.norm(W_prime - W))


def hyperspherical_energy_stats(W, power: float = HE_POWER, eps: float = EPS_HE) -> tuple[float, int]:
    """Riesz energy of the unit-normalized columns of ``W`` and the number of clamped pairs.

    Columns are the neurons that a left transformation acts on. Pairwise
    separations below ``eps`` are clamped to ``eps``.
    """
    W = _as_array(W)
    if W.ndim != 2:
        raise DimensionError(f"hyperspherical_energy: expected a matrix, got {W.shape}")
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms <= 0.0):
        raise DegenerateVectorError(f"hyperspherical_energy: column {int(np.argmin(norms))} is zero")
    if W.shape[1] < 2:
        return 0.0, 0
    dist = pdist((W / norms).T)
    clamped = int(np.count_nonzero(dist < eps))
    dist = np.maximum(dist, eps)
    return float(np.sum(dist ** -power)), clamped


def hyperspherical_energy(W, power: float = HE_POWER, eps: float = EPS_HE) -> float:
    return hyperspherical_energy_stats(W, power, eps)[0]


def orthogonality_residual(M) -> float:
    M = _as_array(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"orthogonality_residual: expected a square matrix, got {M.shape}")
    return float(np.linalg.norm(M @ M.T - np.eye(M.shape[0])))


def param_count(method: str, d: int, f: int, n: int = 1, r: int = 1, two_sided: bool = True) -> int:
    """Trainable parameters of one adapted (d, f) layer.

    OFT is counted by its true trainable entries ``d^2/n``, not the halved
    storage count sometimes quoted for skew-symmetric blocks.
    """
    if d < 1 or f < 1:
        raise ConfigurationError(f"invalid layer shape ({d}, {f})")
    if method == "lora":
        if r < 1:
            raise ConfigurationError(f"LoRA rank must be at least 1, got {r}")
        return r * (d + f)
    if n < 1 or d % n:
        raise ConfigurationError(f"block count n={n} must divide d={d}")
    if method == "ether":
        return d
    if method == "ether_plus":
        if two_sided:
            if f % n:
                raise ConfigurationError(f"block count n={n} must divide f={f}")
            return 2 * d + 2 * f
        return 2 * d
    if method in ("oft", "naive"):
        return d * d // n
    raise ConfigurationError(f"unknown method {method!r}")


def op_count(d: int, f: int, n: int = 1) -> tuple[int, int]:
    """(multiplications, additions) for multiplying a block-diagonal (d, d) by a (d, f) matrix.

    Each of the ``n`` blocks costs ``(d/n)((d/n) f)`` multiplications and
    ``((d-1)/n)((d/n) f)`` additions; ``n = 1`` is the dense product.
    """
    if n < 1 or d % n:
        raise ConfigurationError(f"block count n={n} must divide d={d}")
    mults = d * d * f // n
    adds = (d - 1) * d * f // n
    return mults, adds
