"""Desk-scale finetuning experiments on a two-layer toy regression model.

A teacher network generates the pretraining data; a student with the same
architecture is pretrained on it and then frozen. The finetuning task feeds
the teacher a rotated input and adds an output offset, so the frozen student
has a measurable loss that adapters can reduce.

Random streams come from numpy's PCG64 bit generator seeded through
``SeedSequence([master_seed, *stream_ids])``; both algorithms are fixed by
numpy's documented specification, so a run is a pure function of its seeds.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm

from . import tensor as T
from .adapters import AdaptedLinear, IdentityAdapter, init_adapter, merge
from .errors import ConfigurationError, SetupError
from .metrics import (
    HE_POWER,
    block_distances,
    hyperspherical_energy,
    op_count,
    param_count,
    transformation_distance,
    weights_distance,
)
from .tensor import Tensor

DIVERGENCE_FACTOR = 10.0

# stream ids passed to SeedSequence next to the master seed
_STREAM_TEACHER = 1
_STREAM_DATA = 2
_STREAM_SHIFT = 3
_STREAM_STUDENT = 4
_STREAM_FINETUNE = 5
_STREAM_PERTURB = 6


def make_rng(master_seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), *map(int, stream)])))


# -- task --------------------------------------------------------------------
@dataclass(frozen=True)
class TaskSpec:
    kind: str = "regression"
    input_dim: int = 32
    hidden_dim: int = 64
    output_dim: int = 16
    n_pretrain: int = 4096
    n_finetune: int = 1024
    pretrain_seed: int = 0
    shift_seed: int = 1
    shift_magnitude: float = 0.15
    bias_offset: float = 0.1
    input_floor: float = 0.03

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ConfigurationError(f"task kind must be regression or classification, got {self.kind!r}")
        if min(self.input_dim, self.hidden_dim, self.output_dim, self.n_pretrain, self.n_finetune) < 1:
            raise ConfigurationError("task dimensions and sample counts must be positive")


@dataclass(frozen=True)
class TaskData:
    x_pretrain: np.ndarray
    y_pretrain: np.ndarray
    x_finetune: np.ndarray
    y_finetune: np.ndarray
    probes: np.ndarray


def _teacher_forward(params, x):
    W1, b1, W2, b2 = params
    return np.tanh(x @ W1 + b1) @ W2 + b2


def _classify(y: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    out[np.arange(len(y)), np.argmax(y, axis=1)] = 1.0
    return out


@functools.lru_cache(maxsize=16)
def make_task_data(task: TaskSpec) -> TaskData:
    """Sample pretraining and finetuning sets.

    Inputs are Gaussian with singular values decaying geometrically from 1 to
    ``input_floor`` in a random basis. The finetune targets are
    ``teacher(R x) + shift_magnitude * bias_offset * c`` where ``R`` is a
    rotation by angles of at most ``shift_magnitude`` radians and ``c`` a
    random unit-RMS offset; ``shift_magnitude = 0`` gives the pretraining map.
    """
    D, H, O = task.input_dim, task.hidden_dim, task.output_dim
    rng = make_rng(task.pretrain_seed, _STREAM_TEACHER)
    basis, _ = np.linalg.qr(rng.standard_normal((D, D)))
    spectrum = task.input_floor ** (np.arange(D) / max(D - 1, 1))
    mixing = spectrum[:, None] * basis
    W1 = rng.standard_normal((D, H)) * 1.5 / np.sqrt(np.mean(spectrum ** 2) * D)
    b1 = 0.1 * rng.standard_normal(H)
    W2 = rng.standard_normal((H, O)) / np.sqrt(H)
    b2 = np.zeros(O)

    data_rng = make_rng(task.pretrain_seed, _STREAM_DATA)
    x_pre = data_rng.standard_normal((task.n_pretrain, D)) @ mixing
    x_ft = data_rng.standard_normal((task.n_finetune, D)) @ mixing
    probes = data_rng.standard_normal((64, D)) @ mixing

    raw = _teacher_forward((W1, b1, W2, b2), x_pre)
    mean, std = raw.mean(axis=0), raw.std(axis=0)
    teacher = (W1, b1, W2 / std, (b2 - mean) / std)

    shift_rng = make_rng(task.shift_seed, _STREAM_SHIFT)
    G = shift_rng.standard_normal((D, D))
    K = G - G.T
    K /= np.linalg.norm(K, 2)
    rotation = expm(task.shift_magnitude * K)
    offset = shift_rng.standard_normal(O)
    offset *= task.shift_magnitude * task.bias_offset / np.sqrt(np.mean(offset ** 2))

    y_pre = _teacher_forward(teacher, x_pre)
    y_ft = _teacher_forward(teacher, x_ft @ rotation.T) + offset
    if task.kind == "classification":
        y_pre, y_ft = _classify(y_pre), _classify(y_ft)
    return TaskData(x_pre, y_pre, x_ft, y_ft, probes)


# -- model -------------------------------------------------------------------
@dataclass
class ToyModel:
    """Adapted linear layers with tanh between them."""

    layers: list[AdaptedLinear]

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].d] + [layer.f for layer in self.layers]

    def __call__(self, x) -> Tensor:
        h = T.as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i + 1 < len(self.layers):
                h = T.tanh(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def merged_forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            h = h @ merge(layer) + layer.b.data
            if i + 1 < len(self.layers):
                h = np.tanh(h)
        return h

    def base_weights(self) -> list[np.ndarray]:
        return [layer.W.data for layer in self.layers]

    def with_adapters(self, config: AdapterConfig, seed: int) -> ToyModel:
        """Copy sharing the frozen base tensors, with freshly initialized adapters."""
        rng = make_rng(seed, _STREAM_FINETUNE, 0)
        layers = []
        for layer in self.layers:
            adapter = init_adapter(config.method, layer.d, layer.f, n=config.n, r=config.r,
                                   two_sided=config.two_sided, rng=rng)
            layers.append(AdaptedLinear(layer.W, layer.b, adapter))
        return ToyModel(layers)

    def frozen(self) -> ToyModel:
        return ToyModel([AdaptedLinear(layer.W, layer.b, IdentityAdapter()) for layer in self.layers])


@dataclass(frozen=True)
class AdapterConfig:
    method: str
    n: int = 1
    r: int = 4
    two_sided: bool = True


def mse(model: ToyModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((model(x).data - y) ** 2))


# -- optimizers --------------------------------------------------------------
class SGD:
    """Momentum-free gradient descent with an optional cosine-annealed rate."""

    def __init__(self, params, lr, total_steps=1, cosine=False, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.total_steps = max(int(total_steps), 1)
        self.cosine = cosine
        self.weight_decay = weight_decay
        self.t = 0

    def current_lr(self) -> float:
        if not self.cosine:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(self.t, self.total_steps) / self.total_steps))

    def step(self):
        lr = self.current_lr()
        for p in self.params:
            g = p.grad if p.grad is not None else 0.0
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data -= lr * g
        self.t += 1

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam(SGD):
    def __init__(self, params, lr, total_steps=1, cosine=False, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr, total_steps, cosine, weight_decay)
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        lr = self.current_lr()
        b1, b2 = self.betas
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


# -- pretraining -------------------------------------------------------------
@dataclass
class PretrainReport:
    loss: float
    threshold: float
    epochs: int


@functools.lru_cache(maxsize=8)
def _pretrain_cached(task: TaskSpec, seed: int, epochs: int, batch_size: int, lr: float, threshold: float):
    data = make_task_data(task)
    rng = make_rng(seed, _STREAM_STUDENT)
    dims = [task.input_dim, task.hidden_dim, task.output_dim]
    params = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        params.append(Tensor(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in), requires_grad=True))
        params.append(Tensor(np.zeros(d_out), requires_grad=True))
    x_all, y_all = data.x_pretrain, data.y_pretrain

    def forward(x):
        h = T.tanh(T.add_row(T.as_tensor(x) @ params[0], params[1]))
        return T.add_row(h @ params[2], params[3])

    opt = Adam(params, lr, total_steps=epochs * math.ceil(len(x_all) / batch_size), cosine=True)
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        for start in range(0, len(x_all), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            T.backward(T.loss_mse(forward(x_all[idx]), y_all[idx]))
            opt.step()
    loss = float(np.mean((forward(x_all).data - y_all) ** 2))
    if not loss < threshold:
        raise SetupError(
            f"pretraining stalled at loss {loss:.4g} after {epochs} epochs (threshold {threshold:g}); "
            f"task={task}"
        )
    weights = tuple(p.data.copy() for p in params)
    for w in weights:
        w.setflags(write=False)
    return weights, PretrainReport(loss, threshold, epochs)


def make_pretrained(task: TaskSpec, arch: Sequence[int] | None = None, seed: int = 0, *,
                    epochs: int = 100, batch_size: int = 128, lr: float = 1e-2,
                    threshold: float = 0.02) -> ToyModel:
    """Train the base student on the pretraining set and return it frozen.

    The returned weights are read-only arrays shared by every model derived
    from this snapshot. The achieved loss is available as ``model.report``.
    """
    if arch is not None and list(arch) != [task.input_dim, task.hidden_dim, task.output_dim]:
        raise ConfigurationError(f"architecture {list(arch)} does not match task dimensions")
    weights, report = _pretrain_cached(task, seed, epochs, batch_size, lr, threshold)
    layers = []
    for W, b in zip(weights[0::2], weights[1::2]):
        layers.append(AdaptedLinear(Tensor(W), Tensor(b)))
    model = ToyModel(layers)
    _freeze_arrays(model)
    model.report = report
    return model


def _freeze_arrays(model: ToyModel) -> None:
    for layer in model.layers:
        layer.W.data.setflags(write=False)
        layer.b.data.setflags(write=False)


# -- finetuning --------------------------------------------------------------
@dataclass
class EpochRecord:
    method: str
    n: int
    lr: float
    seed: int
    epoch: int
    loss: float
    transform_distance: float
    weights_distance: float
    delta_he: float
    diverged: bool
    max_block_distance: float = 0.0
    per_layer_transform: list[float] = field(default_factory=list)
    per_layer_weights: list[float] = field(default_factory=list)
    per_layer_delta_he: list[float] = field(default_factory=list)


@dataclass
class FinetuneRun:
    config: AdapterConfig
    lr: float
    seed: int
    base_loss: float
    initial_loss: float
    epochs: list[EpochRecord]
    model: ToyModel | None = None

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].loss if self.epochs else self.initial_loss


def measure(model: ToyModel, base_he: Sequence[float], he_power: float = HE_POWER) -> dict:
    transform, weights, dhe, blocks = [], [], [], [0.0]
    for layer, he0 in zip(model.layers, base_he):
        adapter = layer.adapter
        W_prime = merge(layer)
        transform.append(transformation_distance(adapter))
        weights.append(weights_distance(layer.W, W_prime))
        dhe.append(hyperspherical_energy(W_prime, he_power) - he0)
        blocks.extend(block_distances(adapter))
    return dict(
        transform_distance=float(np.sum(transform)),
        weights_distance=float(np.sum(weights)),
        delta_he=float(np.sum(dhe)),
        max_block_distance=max(blocks),
        per_layer_transform=transform,
        per_layer_weights=weights,
        per_layer_delta_he=dhe,
    )


def finetune(model: ToyModel, config: AdapterConfig, task: TaskSpec, lr: float, epochs: int,
             seed: int, *, batch_size: int = 64, optimizer: str = "sgd", cosine: bool = False,
             weight_decay: float = 0.0, he_power: float = HE_POWER,
             keep_model: bool = False) -> FinetuneRun:
    """Train fresh adapters on the finetuning set and record metrics after each epoch.

    An epoch is flagged diverged when its full-data loss is non-finite or
    exceeds ``DIVERGENCE_FACTOR`` times the frozen-base loss. Training only
    stops when a step produces non-finite values; the parameters are then
    restored to the last finite state and later epochs report an infinite loss.
    """
    data = make_task_data(task)
    base_loss = mse(model.frozen(), data.x_finetune, data.y_finetune)
    base_he = [hyperspherical_energy(W, he_power) for W in model.base_weights()]
    adapted = model.with_adapters(config, seed)
    params = adapted.parameters()
    if optimizer not in OPTIMIZERS:
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")
    steps_per_epoch = math.ceil(len(data.x_finetune) / batch_size)
    opt = OPTIMIZERS[optimizer](params, lr, total_steps=epochs * steps_per_epoch, cosine=cosine,
                                weight_decay=weight_decay)
    rng = make_rng(seed, _STREAM_FINETUNE, 1)
    initial_loss = mse(adapted, data.x_finetune, data.y_finetune)
    threshold = DIVERGENCE_FACTOR * base_loss

    records = []
    blown_up = False
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(data.x_finetune))
        for start in range(0, len(order), batch_size):
            if blown_up:
                break
            idx = order[start:start + batch_size]
            snapshot = [p.data.copy() for p in params]
            opt.zero_grad()
            with np.errstate(all="ignore"):
                loss = T.loss_mse(adapted(data.x_finetune[idx]), data.y_finetune[idx])
                T.backward(loss, params)
                opt.step()
            if not np.isfinite(loss.item()) or not all(np.all(np.isfinite(p.data)) for p in params):
                for p, s in zip(params, snapshot):
                    p.data[...] = s
                blown_up = True
        with np.errstate(all="ignore"):
            full = math.inf if blown_up else mse(adapted, data.x_finetune, data.y_finetune)
            stats = measure(adapted, base_he, he_power)
        diverged = not (math.isfinite(full) and full <= threshold)
        records.append(EpochRecord(config.method, config.n, lr, seed, epoch, full, diverged=diverged, **stats))
    return FinetuneRun(config, lr, seed, base_loss, initial_loss, records, adapted if keep_model else None)


# -- sweeps ------------------------------------------------------------------
DEFAULT_UNIT_LR = {"ether": 0.1, "ether_plus": 0.1, "oft": 0.1, "naive": 0.1, "lora": 0.1}
DEFAULT_LR_GRID = tuple(10.0 ** k for k in range(-4, 3))

# Reference sweep settings. Adam (no weight decay) replaces plain SGD here
# because SGD's loss-vs-lr curves on the toy task depend mostly on per-method
# gradient scale, which the unit lr would otherwise have to absorb.
REFERENCE_EPOCHS = 20
REFERENCE_SEEDS = (0, 1, 2)
REFERENCE_TRAIN = {"optimizer": "adam", "batch_size": 64, "cosine": False, "weight_decay": 0.0}


@dataclass
class SweepResult:
    runs: list[FinetuneRun]

    @property
    def records(self) -> list[EpochRecord]:
        return [rec for run in self.runs for rec in run.epochs]

    def methods(self) -> list[str]:
        seen = []
        for run in self.runs:
            if run.config.method not in seen:
                seen.append(run.config.method)
        return seen

    def final_losses(self, method: str, seed: int | None = None) -> dict[float, float]:
        """Final loss per learning rate, averaged over seeds unless one is given."""
        table: dict[float, list[float]] = {}
        for run in self.runs:
            if run.config.method == method and (seed is None or run.seed == seed):
                table.setdefault(run.lr, []).append(run.final_loss)
        return {lr: float(np.mean(v)) for lr, v in sorted(table.items())}

    def best_lr(self, method: str, seed: int | None = None) -> float:
        losses = self.final_losses(method, seed)
        return min(losses, key=lambda lr: (losses[lr], lr))

    def robust_range(self, method: str, tolerance: float = 0.10, seed: int | None = None) -> tuple[list[float], float]:
        """Learning rates whose final loss is within ``tolerance`` of the best, and their span in decades."""
        losses = self.final_losses(method, seed)
        best = min(losses.values())
        good = [lr for lr, loss in losses.items() if loss <= best * (1.0 + tolerance)]
        return good, float(np.log10(max(good) / min(good)))

    def run(self, method: str, lr: float, seed: int) -> FinetuneRun:
        for run in self.runs:
            if run.config.method == method and run.lr == lr and run.seed == seed:
                return run
        raise KeyError((method, lr, seed))

    def at_largest_lr(self, method: str, seed: int) -> FinetuneRun:
        lrs = [run.lr for run in self.runs if run.config.method == method and run.seed == seed]
        return self.run(method, max(lrs), seed)


def _sweep_cell(args):
    task, pretrain_seed, config, lr, epochs, seed, train_kwargs = args
    model = make_pretrained(task, seed=pretrain_seed)
    return finetune(model, config, task, lr, epochs, seed, **train_kwargs)


def run_cells(cells: list[tuple], threads: int = 1) -> list[FinetuneRun]:
    """Evaluate sweep cells serially or in worker processes; result order follows ``cells``."""
    if threads <= 1 or len(cells) <= 1:
        return [_sweep_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_sweep_cell, cells))


def _clean(x: float) -> float:
    # 0.1 * 1e-4 is 1.0000000000000001e-05; keep the decimal value the grid means
    return float(f"{x:.12g}")


def lr_sweep(methods: Iterable[str], lr_grid: Sequence[float], task: TaskSpec, epochs: int,
             seeds: Sequence[int], *, unit_lr: dict | None = None, n: int = 1, r: int = 4,
             two_sided: bool = True, pretrain_seed: int = 0, threads: int = 1,
             **train_kwargs) -> SweepResult:
    """Finetune every (method, lr multiplier, seed) cell.

    The learning rate of a cell is ``unit_lr[method] * multiplier``.
    """
    grid = sorted(float(m) for m in lr_grid)
    if len(grid) < 2 or np.log10(grid[-1] / grid[0]) < 4 - 1e-9:
        raise ConfigurationError("the learning-rate grid must span at least four orders of magnitude")
    units = dict(DEFAULT_UNIT_LR, **(unit_lr or {}))
    cells = []
    for method in methods:
        config = AdapterConfig(method, n=n, r=r, two_sided=two_sided)
        for mult in grid:
            for seed in seeds:
                cells.append((task, pretrain_seed, config, _clean(units[method] * mult), epochs, seed, train_kwargs))
    return SweepResult(run_cells(cells, threads))


# -- perturbations -----------------------------------------------------------
def _unit(rng, m):
    v = rng.standard_normal(m)
    return v / np.linalg.norm(v)


def _bisect(fn, target, lo, hi, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_transformation(method: str, d: int, strength: float, rng: np.random.Generator, n: int = 1):
    """Random dense (d, d) left transformation with ``|T - I|_F = strength``, or ``None`` if unreachable.

    ETHER exists only at distance ``2 sqrt(n)``. ETHER+ interpolates ``v``
    from ``u`` towards an independent unit vector. OFT scales a random skew
    generator inside the Cayley map. Naive scales a random perturbation of
    the identity.
    """
    m = d // n
    if method == "ether":
        H = np.eye(d)
        for i in range(n):
            u = _unit(rng, m)
            H[i * m:(i + 1) * m, i * m:(i + 1) * m] -= 2.0 * np.outer(u, u)
        return H if abs(strength - 2.0 * math.sqrt(n)) <= 1e-9 else None
    if strength == 0.0:
        return np.eye(d)
    if method == "ether_plus":
        u, w = _unit(rng, d), _unit(rng, d)

        def build(t):
            v = (1 - t) * u + t * w
            v /= np.linalg.norm(v)
            return np.eye(d) - np.outer(u, u) + np.outer(v, v)

        dist = lambda t: np.linalg.norm(build(t) - np.eye(d))
        if strength > dist(1.0):
            return None
        return build(_bisect(dist, strength, 0.0, 1.0))
    if method == "oft":
        G = rng.standard_normal((d, d))
        S0 = 0.5 * (G - G.T)

        def build(t):
            S = t * S0
            return np.linalg.solve(np.eye(d) - S, np.eye(d) + S)

        dist = lambda t: np.linalg.norm(build(t) - np.eye(d))
        hi = 1.0
        while dist(hi) < strength and hi < 1e12:
            hi *= 2.0
        if dist(hi) < strength:
            return None
        return build(_bisect(dist, strength, 0.0, hi))
    if method == "naive":
        E = rng.standard_normal((d, d))
        return np.eye(d) + strength * E / np.linalg.norm(E)
    raise ConfigurationError(f"perturbation is not defined for method {method!r}")


def perturbation_sweep(model: ToyModel, method: str, strength_grid: Sequence[float],
                       probes: np.ndarray, seed: int = 0, n: int = 1) -> list[tuple[float, float | None]]:
    """Relative output change ``|y' - y| / |y|`` when every layer is left-multiplied by a random transformation.

    The same random directions are reused across strengths. Unreachable
    strengths yield ``None``. For ETHER, the grid is ignored and the single
    attainable distance ``2 sqrt(n)`` is reported.
    """
    y = model.merged_forward(probes)
    if method == "ether":
        strength_grid = [2.0 * math.sqrt(n)]
    out = []
    for strength in strength_grid:
        rng = make_rng(seed, _STREAM_PERTURB)
        h = np.asarray(probes, dtype=np.float64)
        reachable = True
        for i, layer in enumerate(model.layers):
            M = sample_transformation(method, layer.d, float(strength), rng, n=n)
            if M is None:
                reachable = False
                break
            h = h @ (M @ layer.W.data) + layer.b.data
            if i + 1 < len(model.layers):
                h = np.tanh(h)
        dev = float(np.linalg.norm(h - y) / np.linalg.norm(y)) if reachable else None
        out.append((float(strength), dev))
    return out


# -- ablations ---------------------------------------------------------------
@dataclass
class AblationRow:
    method: str
    n: int
    two_sided: bool
    params: int
    ops_mul: int
    ops_add: int
    final_loss: float


def _layer_costs(method, dims, n, r, two_sided):
    params = mul = add = 0
    for d, f in zip(dims[:-1], dims[1:]):
        params += param_count(method, d, f, n=n, r=r, two_sided=two_sided)
        m, a = op_count(d, f, n)
        mul, add = mul + m, add + a
        if method == "ether_plus" and two_sided:
            m, a = op_count(f, d, n)
            mul, add = mul + m, add + a
    return params, mul, add


def ablate_blocks(method: str, n_grid: Sequence[int], task: TaskSpec, *, lr: float, epochs: int,
                  seed: int = 0, r: int = 4, two_sided: bool = True, pretrain_seed: int = 0,
                  threads: int = 1, **train_kwargs) -> list[AblationRow]:
    dims = [task.input_dim, task.hidden_dim, task.output_dim]
    for n in n_grid:
        for d, f in zip(dims[:-1], dims[1:]):
            if d % n or (method == "ether_plus" and two_sided and f % n):
                raise ConfigurationError(f"block count n={n} does not divide layer shape ({d}, {f})")
    cells = [(task, pretrain_seed, AdapterConfig(method, n=n, r=r, two_sided=two_sided), lr, epochs, seed,
              train_kwargs) for n in n_grid]
    rows = []
    for n, run in zip(n_grid, run_cells(cells, threads)):
        params, mul, add = _layer_costs(method, dims, n, r, two_sided)
        rows.append(AblationRow(method, n, two_sided, params, mul, add, run.final_loss))
    return rows


def ablate_sidedness(task: TaskSpec, *, lr: float, epochs: int, seed: int = 0, n: int = 1,
                     pretrain_seed: int = 0, threads: int = 1, **train_kwargs) -> list[AblationRow]:
    dims = [task.input_dim, task.hidden_dim, task.output_dim]
    cells = [(task, pretrain_seed, AdapterConfig("ether_plus", n=n, two_sided=s), lr, epochs, seed, train_kwargs)
             for s in (True, False)]
    rows = []
    for sided, run in zip((True, False), run_cells(cells, threads)):
        params, mul, add = _layer_costs("ether_plus", dims, n, 1, sided)
        rows.append(AblationRow("ether_plus", n, sided, params, mul, add, run.final_loss))
    return rows


def as_dict(obj) -> dict:
    return asdict(obj)


def reference_sweep(methods: Iterable[str] = ("ether", "ether_plus", "oft", "naive", "lora"),
                    seeds: Sequence[int] = REFERENCE_SEEDS, threads: int = 1) -> SweepResult:
    """The lr sweep on the default task with the reference training settings."""
    return lr_sweep(methods, DEFAULT_LR_GRID, TaskSpec(), REFERENCE_EPOCHS, seeds, threads=threads,
                    **REFERENCE_TRAIN)
