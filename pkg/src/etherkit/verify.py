"""Invariant suites run by ``etherkit verify``.

Each check returns ``(ok, detail)``. Faults can be injected to confirm that
the suites catch the corresponding defect.
"""

from __future__ import annotations

import contextlib
import io
import os
import tempfile
from dataclasses import dataclass
from typing import Callable, Iterable
from unittest import mock

import numpy as np

from . import adapters as A
from . import checkpoint as C
from . import harness as H
from . import metrics as M
from . import tensor as T
from .errors import CheckpointFormatError

FAULTS = ("skip-normalization",)


@dataclass
class CheckResult:
    suite: str
    name: str
    ok: bool
    detail: str


def _rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


# -- tensor-core -------------------------------------------------------------
def _t_matmul_grad(rng):
    a, b = T.Tensor(_rand(rng, 5, 4), True), T.Tensor(_rand(rng, 4, 3), True)
    errs = T.gradient_check(lambda: T.sum(T.matmul(a, b)), [a, b])
    return max(errs) < 1e-4, f"max relative error {max(errs):.2e}"


def _t_normalize_grad(rng):
    u = T.Tensor(_rand(rng, 8), True)
    w = T.Tensor(_rand(rng, 8))
    errs = T.gradient_check(lambda: T.sum(T.normalize(u) * w), [u])
    return max(errs) < 1e-4, f"max relative error {max(errs):.2e}"


def _t_mlp_grad(rng):
    x = T.Tensor(_rand(rng, 6, 5))
    Ws = [T.Tensor(_rand(rng, 5, 7), True), T.Tensor(_rand(rng, 7, 4), True), T.Tensor(_rand(rng, 4, 2), True)]
    y = T.Tensor(_rand(rng, 6, 2))

    def loss():
        h = T.tanh(x @ Ws[0])
        h = T.tanh(h @ Ws[1])
        return T.loss_mse(h @ Ws[2], y)

    errs = T.gradient_check(loss, Ws)
    return max(errs) < 1e-4, f"max relative error {max(errs):.2e}"


def _t_linearity(rng):
    W = T.Tensor(_rand(rng, 4, 3), True)
    x = T.Tensor(_rand(rng, 2, 4))
    f1 = lambda: T.sum(T.tanh(x @ W))
    f2 = lambda: T.loss_mse(x @ W, T.Tensor(np.zeros((2, 3))))
    grads = []
    for fn in (f1, f2, lambda: f1() + f2()):
        W.zero_grad()
        T.backward(fn(), [W])
        grads.append(W.grad.copy())
    err = float(np.max(np.abs(grads[0] + grads[1] - grads[2])))
    return err < 1e-12, f"max deviation {err:.2e}"


def _t_associativity(rng):
    a, b, c = (T.Tensor(_rand(rng, 8, 8)) for _ in range(3))
    err = float(np.linalg.norm(((a @ b) @ c).data - (a @ (b @ c)).data))
    return err <= 1e-10, f"|(AB)C - A(BC)|_F = {err:.2e}"


# -- adapters ----------------------------------------------------------------
def _a_householder_distance(rng):
    # raw (unnormalized) inputs: householder must normalize them itself
    worst = 0.0
    for d in (2, 8, 64):
        for _ in range(200):
            Hm = A.householder(T.Tensor(rng.standard_normal(d) * rng.uniform(0.1, 10.0))).data
            worst = max(worst, abs(np.linalg.norm(Hm - np.eye(d)) - 2.0))
    return worst <= 1e-10, f"max | |H - I|_F - 2 | = {worst:.2e}"


def _a_householder_orthogonal(rng):
    worst, dets = 0.0, []
    for _ in range(100):
        Hm = A.householder(T.Tensor(rng.standard_normal(8))).data
        worst = max(worst, M.orthogonality_residual(Hm), float(np.linalg.norm(Hm @ Hm - np.eye(8))))
        dets.append(np.linalg.det(Hm))
    det_err = float(np.max(np.abs(np.array(dets) + 1.0)))
    return worst <= 1e-10 and det_err <= 1e-8, f"residual {worst:.2e}, max |det + 1| {det_err:.2e}"


def _a_ether_plus_bound(rng):
    worst, same = 0.0, 0.0
    for _ in range(2000):
        u, v = rng.standard_normal(16), rng.standard_normal(16)
        worst = max(worst, float(np.linalg.norm(A.ether_plus_factor(T.Tensor(u), T.Tensor(v)).data - np.eye(16))))
        same = max(same, float(np.linalg.norm(A.ether_plus_factor(T.Tensor(u), T.Tensor(u)).data - np.eye(16))))
    return worst <= 2 + 1e-10 and same <= 1e-12, f"max distance {worst:.6f}, u=v distance {same:.2e}"


def _a_cayley(rng):
    worst, det_err = 0.0, 0.0
    for m in range(1, 9):
        for _ in range(12):
            Q = A.cayley(T.Tensor(rng.standard_normal((m, m)))).data
            worst = max(worst, M.orthogonality_residual(Q))
            det_err = max(det_err, abs(np.linalg.det(Q) - 1.0))
    return worst <= 1e-10 and det_err <= 1e-8, f"residual {worst:.2e}, max |det - 1| {det_err:.2e}"


def _a_block_parallel(rng):
    worst = 0.0
    for d, f in ((8, 12), (32, 48), (64, 64)):
        W = T.Tensor(rng.standard_normal((d, f)))
        for n in (1, 2, 4, 8):
            blocks = [T.Tensor(rng.standard_normal((d // n, d // n))) for _ in range(n)]
            dense = A.build_block_diagonal(blocks).data @ W.data
            worst = max(worst, float(np.max(np.abs(dense - A.block_parallel_apply(blocks, W, "left").data))))
            if f % n == 0:
                rblocks = [T.Tensor(rng.standard_normal((f // n, f // n))) for _ in range(n)]
                dense = W.data @ A.build_block_diagonal(rblocks).data
                worst = max(worst, float(np.max(np.abs(dense - A.block_parallel_apply(rblocks, W, "right").data))))
    return worst <= 1e-12, f"max |dense - blocked| = {worst:.2e}"


def _random_layer(rng, method, d=8, f=12, n=2):
    W = T.Tensor(rng.standard_normal((d, f)))
    b = T.Tensor(rng.standard_normal(f))
    adapter = A.init_adapter(method, d, f, n=n, r=3, rng=rng)
    for p in adapter.parameters():
        p.data += 0.3 * rng.standard_normal(p.shape)
    return A.AdaptedLinear(W, b, adapter)


def _a_merge(rng):
    worst = 0.0
    for method in A.METHODS:
        layer = _random_layer(rng, method)
        x = rng.standard_normal((100, layer.d))
        merged = x @ A.merge(layer) + layer.b.data
        worst = max(worst, float(np.max(np.abs(merged - layer(T.Tensor(x)).data))))
    return worst <= 1e-12, f"max |merged - adapted| = {worst:.2e}"


def _a_identity_init(rng):
    worst = 0.0
    for method in ("ether_plus", "oft", "naive", "lora"):
        W, b = T.Tensor(rng.standard_normal((8, 12))), T.Tensor(rng.standard_normal(12))
        layer = A.AdaptedLinear(W, b, A.init_adapter(method, 8, 12, n=2, r=2, rng=rng))
        x = rng.standard_normal((5, 8))
        worst = max(worst, float(np.max(np.abs(layer(T.Tensor(x)).data - (x @ W.data + b.data)))))
    return worst <= 1e-12, f"max deviation from the base layer at init {worst:.2e}"


def _a_gradients(rng):
    worst = 0.0
    for method in A.METHODS:
        layer = _random_layer(rng, method)
        x, y = T.Tensor(rng.standard_normal((4, layer.d))), T.Tensor(rng.standard_normal((4, layer.f)))
        errs = T.gradient_check(lambda: T.loss_mse(layer(x), y), layer.parameters())
        worst = max(worst, max(errs))
    return worst < 1e-4, f"max relative error {worst:.2e}"


# -- metrics -----------------------------------------------------------------
def _m_he_invariance(rng):
    W = rng.standard_normal((16, 10))
    Hm = A.householder(T.Tensor(rng.standard_normal(16))).data
    Q = A.cayley(T.Tensor(rng.standard_normal((16, 16)))).data
    he = M.hyperspherical_energy(W)
    err = max(abs(M.hyperspherical_energy(Hm @ W) - he), abs(M.hyperspherical_energy(Q @ W) - he))
    P = A.ether_plus_factor(T.Tensor(rng.standard_normal(16)), T.Tensor(rng.standard_normal(16))).data
    moved = abs(M.hyperspherical_energy(P @ W) - he)
    return err <= 1e-8 and moved > 1e-6, f"orthogonal change {err:.2e}, relaxed change {moved:.2e}"


def _m_counts(rng):
    ok = M.op_count(4, 3, 1) == (48, 36) and M.op_count(4, 3, 2) == (24, 18)
    ok &= all(M.op_count(64, 48, n)[0] * n == M.op_count(64, 48, 1)[0] for n in (1, 2, 4, 8, 16))
    ok &= {M.param_count("ether", 64, 64, n=n) for n in (1, 2, 4, 8)} == {64}
    ok &= all(M.param_count("oft", 64, 64, n=n) * n == 64 * 64 for n in (1, 2, 4, 8))
    ok &= (M.param_count("lora", 64, 64, r=1), M.param_count("ether_plus", 64, 64)) == (128, 256)
    return bool(ok), "operation and parameter tallies"


def _m_distances(rng):
    ether = A.init_adapter("ether", 16, 8, n=4, rng=rng)
    oft = A.init_adapter("oft", 16, 8, n=4, rng=rng)
    td = M.transformation_distance(ether)
    blocks = M.block_distances(ether)
    ok = abs(td - 4.0) <= 1e-10 and max(abs(b - 2.0) for b in blocks) <= 1e-10 and M.transformation_distance(oft) == 0
    return ok, f"ETHER n=4 distance {td:.12f}"


# -- harness -----------------------------------------------------------------
_TASK = H.TaskSpec()


def _h_base_frozen(rng):
    model = H.make_pretrained(_TASK)
    before = [W.copy() for W in model.base_weights()]
    for method in A.METHODS:
        H.finetune(model, H.AdapterConfig(method, n=2), _TASK, 1e-2, 2, 0, optimizer="adam")
    same = all(np.array_equal(a, b) for a, b in zip(before, model.base_weights()))
    return same, "base weights bit-identical after finetuning"


def _h_bounds_and_he(rng):
    model = H.make_pretrained(_TASK)
    worst, he = 0.0, 0.0
    for method in ("ether", "ether_plus", "oft"):
        run = H.finetune(model, H.AdapterConfig(method), _TASK, 1.0, 3, 0, optimizer="adam")
        if method != "oft":
            worst = max(worst, max(r.max_block_distance for r in run.epochs))
        if method != "ether_plus":
            he = max(he, max(abs(r.delta_he) for r in run.epochs))
    return worst <= 2 + 1e-10 and he <= 1e-8, f"max block distance {worst:.6f}, orthogonal |dHE| {he:.2e}"


def _h_zero_lr(rng):
    model = H.make_pretrained(_TASK)
    run = H.finetune(model, H.AdapterConfig("oft"), _TASK, 0.0, 2, 0)
    ok = all(r.loss == run.base_loss and r.transform_distance == 0 for r in run.epochs)
    return ok, "lr = 0 leaves loss and distances unchanged"


def _h_perturb_zero(rng):
    model = H.make_pretrained(_TASK)
    probes = H.make_task_data(_TASK).probes
    devs = [H.perturbation_sweep(model, m, [0.0], probes)[0][1] for m in ("ether_plus", "oft", "naive")]
    return all(v == 0.0 for v in devs), "zero strength gives zero deviation"


# -- checkpoint --------------------------------------------------------------
def _c_roundtrip(rng):
    tensors = {"scalar": np.array(1.5), "vec": rng.standard_normal(7), "mat": rng.standard_normal((3, 4)),
               "empty": np.zeros((0, 2))}
    blob = C.encode_checkpoint(tensors)
    back = C.decode_checkpoint(blob)
    ok = C.encode_checkpoint(back) == blob and len(C.encode_checkpoint({})) == 12
    return ok, "save/load/save byte-identical; empty file is 12 bytes"


def _c_corruption(rng):
    blob = C.encode_checkpoint({"weights": rng.standard_normal((4, 4))})
    try:
        C.decode_checkpoint(blob[:-3])
    except CheckpointFormatError as exc:
        return "weights" in str(exc) and exc.offset is not None, str(exc)
    return False, "truncated payload was accepted"


def _c_file(rng):
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "x.etck")
        C.save_checkpoint(path, {"a": np.arange(3.0)})
        ok = np.array_equal(C.load_checkpoint(path)["a"], np.arange(3.0)) and os.listdir(tmp) == ["x.etck"]
    return ok, "atomic write leaves only the target file"


SUITES: dict[str, list[tuple[str, Callable]]] = {
    "tensor-core": [
        ("matmul_gradient", _t_matmul_grad),
        ("normalize_gradient", _t_normalize_grad),
        ("mlp_gradient", _t_mlp_grad),
        ("backward_linearity", _t_linearity),
        ("matmul_associativity", _t_associativity),
    ],
    "adapters": [
        ("householder_identity_distance", _a_householder_distance),
        ("householder_orthogonal_det", _a_householder_orthogonal),
        ("ether_plus_distance_bound", _a_ether_plus_bound),
        ("cayley_orthogonal_det", _a_cayley),
        ("block_parallel_equivalence", _a_block_parallel),
        ("merge_equivalence", _a_merge),
        ("identity_at_init", _a_identity_init),
        ("adapter_gradients", _a_gradients),
    ],
    "metrics": [
        ("he_orthogonal_invariance", _m_he_invariance),
        ("operation_parameter_counts", _m_counts),
        ("transformation_distances", _m_distances),
    ],
    "harness": [
        ("base_weights_frozen", _h_base_frozen),
        ("distance_bound_and_he", _h_bounds_and_he),
        ("zero_learning_rate", _h_zero_lr),
        ("zero_perturbation", _h_perturb_zero),
    ],
    "checkpoint": [
        ("roundtrip_bytes", _c_roundtrip),
        ("corruption_detected", _c_corruption),
        ("atomic_file_write", _c_file),
    ],
}


@contextlib.contextmanager
def inject(faults: Iterable[str]):
    """Temporarily break the implementation in the named ways."""
    with contextlib.ExitStack() as stack:
        for fault in faults:
            if fault == "skip-normalization":
                stack.enter_context(mock.patch.object(A, "normalize", lambda u: u))
            else:
                raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
        yield


def run_suites(seed: int = 0, faults: Iterable[str] = ()) -> list[CheckResult]:
    results = []
    with inject(list(faults)):
        for suite, checks in SUITES.items():
            for name, fn in checks:
                rng = np.random.default_rng([seed, len(results)])
                try:
                    with np.errstate(all="ignore"), contextlib.redirect_stdout(io.StringIO()):
                        ok, detail = fn(rng)
                except Exception as exc:  # a crashing check is a failing check
                    ok, detail = False, f"{type(exc).__name__}: {exc}"
                results.append(CheckResult(suite, name, bool(ok), detail))
    return results
