import math
from dataclasses import replace

import numpy as np
import pytest

from etherkit import harness as H
from etherkit.errors import ConfigurationError, SetupError
from etherkit.metrics import op_count, param_count


# -- task and pretraining ----------------------------------------------------
def test_task_data_is_deterministic(task):
    a = H.make_task_data.__wrapped__(task)
    b = H.make_task_data.__wrapped__(task)
    for name in ("x_pretrain", "y_pretrain", "x_finetune", "y_finetune", "probes"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_pretraining_is_bit_identical(task):
    w1, _ = H._pretrain_cached.__wrapped__(task, 0, 100, 128, 1e-2, 0.02)
    w2, _ = H._pretrain_cached.__wrapped__(task, 0, 100, 128, 1e-2, 0.02)
    assert [w.tobytes() for w in w1] == [w.tobytes() for w in w2]


def test_shift_is_real(task, pretrained):
    data = H.make_task_data(task)
    assert pretrained.report.loss < pretrained.report.threshold
    assert pretrained.report.loss < H.mse(pretrained, data.x_finetune, data.y_finetune) / 2


def test_zero_shift_needs_no_finetuning(task):
    flat = replace(task, shift_magnitude=0.0)
    model = H.make_pretrained(flat)
    data = H.make_task_data(flat)
    assert H.mse(model, data.x_finetune, data.y_finetune) < 1.5 * model.report.loss


def test_pretraining_failure_raises(task):
    with pytest.raises(SetupError, match="threshold"):
        H.make_pretrained(task, epochs=1, threshold=1e-9)


def test_architecture_must_match_task(task):
    with pytest.raises(ConfigurationError):
        H.make_pretrained(task, arch=[32, 10, 16])


def test_base_arrays_are_read_only(pretrained):
    with pytest.raises(ValueError):
        pretrained.layers[0].W.data[0, 0] = 1.0


def test_classification_kind(task):
    data = H.make_task_data(replace(task, kind="classification"))
    assert set(np.unique(data.y_finetune)) <= {0.0, 1.0}
    assert np.all(data.y_finetune.sum(axis=1) == 1.0)


def test_streams_are_independent():
    a = H.make_rng(7, 1).standard_normal(4)
    b = H.make_rng(7, 2).standard_normal(4)
    c = H.make_rng(7, 1).standard_normal(4)
    assert not np.array_equal(a, b) and np.array_equal(a, c)


# -- finetuning --------------------------------------------------------------
@pytest.mark.parametrize("method", ["ether", "ether_plus", "oft", "naive", "lora"])
def test_finetune_leaves_base_bit_identical(task, pretrained, method):
    before = [W.tobytes() for W in pretrained.base_weights()] + [l.b.data.tobytes() for l in pretrained.layers]
    H.finetune(pretrained, H.AdapterConfig(method, n=2), task, 10.0, 2, 0, optimizer="adam")
    after = [W.tobytes() for W in pretrained.base_weights()] + [l.b.data.tobytes() for l in pretrained.layers]
    assert before == after


@pytest.mark.parametrize("method", ["ether_plus", "oft", "naive", "lora"])
def test_zero_lr_changes_nothing(task, pretrained, method):
    run = H.finetune(pretrained, H.AdapterConfig(method), task, 0.0, 2, 0)
    assert run.initial_loss == run.base_loss
    for rec in run.epochs:
        assert rec.loss == run.base_loss
        assert rec.transform_distance == 0.0 and rec.weights_distance == 0.0


def test_zero_lr_ether_keeps_its_init_distance(task, pretrained):
    run = H.finetune(pretrained, H.AdapterConfig("ether"), task, 0.0, 2, 0)
    assert run.epochs[0].loss == run.epochs[1].loss == run.initial_loss
    assert all(rec.transform_distance == pytest.approx(4.0, abs=1e-10) for rec in run.epochs)


def test_finetune_reduces_loss(task, pretrained):
    run = H.finetune(pretrained, H.AdapterConfig("ether_plus"), task, 1e-2, 3, 0, optimizer="adam")
    assert run.final_loss < run.base_loss


def test_ether_plus_bound_at_huge_lr(task, pretrained):
    run = H.finetune(pretrained, H.AdapterConfig("ether_plus", n=4), task, 100.0, 3, 0, optimizer="adam")
    assert max(r.max_block_distance for r in run.epochs) <= 2 + 1e-10


def test_divergence_predicate(task, pretrained):
    run = H.finetune(pretrained, H.AdapterConfig("naive"), task, 1e3, 2, 0, optimizer="sgd")
    for rec in run.epochs:
        expected = not (math.isfinite(rec.loss) and rec.loss <= H.DIVERGENCE_FACTOR * run.base_loss)
        assert rec.diverged == expected
    assert run.epochs[-1].diverged


def test_non_finite_run_reports_inf_and_keeps_finite_parameters(task, pretrained):
    run = H.finetune(pretrained, H.AdapterConfig("naive"), task, 1e12, 2, 0, optimizer="sgd", keep_model=True)
    assert run.epochs[-1].loss == math.inf and run.epochs[-1].diverged
    assert all(np.all(np.isfinite(p.data)) for p in run.model.parameters())


def test_unknown_optimizer(task, pretrained):
    with pytest.raises(ConfigurationError):
        H.finetune(pretrained, H.AdapterConfig("oft"), task, 0.1, 1, 0, optimizer="lbfgs")


def test_cosine_schedule():
    opt = H.SGD([], 1.0, total_steps=10, cosine=True)
    assert opt.current_lr() == 1.0
    opt.t = 5
    assert opt.current_lr() == pytest.approx(0.5)
    opt.t = 10
    assert opt.current_lr() == pytest.approx(0.0, abs=1e-15)


def test_finetune_is_deterministic(task, pretrained):
    a = H.finetune(pretrained, H.AdapterConfig("oft", n=2), task, 1e-3, 2, 5, optimizer="adam")
    b = H.finetune(pretrained, H.AdapterConfig("oft", n=2), task, 1e-3, 2, 5, optimizer="adam")
    assert [r.loss for r in a.epochs] == [r.loss for r in b.epochs]


def test_lr_grid_must_span_four_decades(task):
    with pytest.raises(ConfigurationError):
        H.lr_sweep(["oft"], [1e-3, 1e-2, 1e-1], task, 1, [0])


def test_parallel_sweep_matches_serial(task):
    grid = (1e-4, 1e-2, 1.0)
    cells = [(task, 0, H.AdapterConfig("oft"), lr, 1, 0, {"optimizer": "adam"}) for lr in grid]
    serial = H.run_cells(cells, threads=1)
    parallel = H.run_cells(cells, threads=2)
    assert [r.final_loss for r in serial] == [r.final_loss for r in parallel]


# -- reference sweep ---------------------------------------------------------
def test_every_method_beats_frozen_base(reference):
    result, _ = reference
    base = result.runs[0].base_loss
    for method in result.methods():
        assert min(result.final_losses(method).values()) < base, method


def test_best_loss_rank_order_stable_across_seeds(reference):
    result, _ = reference
    orders = set()
    for seed in H.REFERENCE_SEEDS:
        best = {m: min(result.final_losses(m, seed).values()) for m in result.methods()}
        orders.add(tuple(sorted(best, key=best.get)))
    assert len(orders) == 1


def test_ether_plus_robust_range(reference):
    result, _ = reference
    assert result.robust_range("ether_plus")[1] >= 2.0


def test_ether_plus_never_diverges(reference):
    result, _ = reference
    assert not any(r.diverged for r in result.records if r.method == "ether_plus")


def test_ether_and_ether_plus_per_block_bound(reference):
    result, _ = reference
    for rec in result.records:
        if rec.method in ("ether", "ether_plus"):
            assert rec.max_block_distance <= 2 + 1e-10


@pytest.mark.xfail(strict=True, reason="at desk scale OFT at 100x its best lr is only ~1.5-1.9x ETHER+'s distance; "
                                       "the 10x separation appears from ~1000x onwards (see criterion 8b)")
def test_oft_at_hundred_times_best_lr_far_exceeds_ether_plus(task, pretrained, reference):
    result, _ = reference
    lr = 100 * result.best_lr("oft")
    for seed in H.REFERENCE_SEEDS:
        oft = H.finetune(pretrained, H.AdapterConfig("oft"), task, lr, H.REFERENCE_EPOCHS, seed, **H.REFERENCE_TRAIN)
        ep = H.finetune(pretrained, H.AdapterConfig("ether_plus"), task, lr, H.REFERENCE_EPOCHS, seed,
                        **H.REFERENCE_TRAIN)
        assert oft.epochs[-1].transform_distance >= 10 * ep.epochs[-1].transform_distance


# -- perturbations -----------------------------------------------------------
def test_zero_strength_gives_zero_deviation(task, pretrained):
    probes = H.make_task_data(task).probes
    for method in ("ether_plus", "oft", "naive"):
        assert H.perturbation_sweep(pretrained, method, [0.0], probes) == [(0.0, 0.0)]


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("n", [1, 4])
def test_sampled_ether_has_fixed_distance(seed, n):
    M = H.sample_transformation("ether", 32, 2 * math.sqrt(n), H.make_rng(seed, 9), n=n)
    m = 32 // n
    for i in range(n):
        block = M[i * m:(i + 1) * m, i * m:(i + 1) * m]
        assert np.linalg.norm(block - np.eye(m)) == pytest.approx(2.0, abs=1e-12)
    assert H.sample_transformation("ether", 32, 1.0, H.make_rng(seed, 9), n=n) is None


@pytest.mark.parametrize("method", ["ether_plus", "oft", "naive"])
@pytest.mark.parametrize("strength", [0.3, 1.0, 1.4])
def test_sampled_transformations_hit_requested_distance(method, strength):
    M = H.sample_transformation(method, 16, strength, H.make_rng(1, 2))
    assert np.linalg.norm(M - np.eye(16)) == pytest.approx(strength, abs=1e-8)


def test_ether_plus_strength_above_reach_is_not_applicable():
    assert H.sample_transformation("ether_plus", 16, 2.5, H.make_rng(0, 0)) is None


def test_sampled_oft_is_orthogonal():
    M = H.sample_transformation("oft", 12, 3.0, H.make_rng(3, 3))
    np.testing.assert_allclose(M @ M.T, np.eye(12), atol=1e-10)


def test_oft_deviation_keeps_growing_past_ether_plus_reach(task, pretrained):
    probes = H.make_task_data(task).probes
    grid = [1.5, 2.0, 3.0, 4.0, 6.0, 8.0]
    ep = H.perturbation_sweep(pretrained, "ether_plus", grid, probes)
    assert all(dev is None for _, dev in ep)
    devs = [dev for _, dev in H.perturbation_sweep(pretrained, "oft", grid, probes)]
    assert all(b > a for a, b in zip(devs, devs[1:]))
    ether = H.perturbation_sweep(pretrained, "ether", grid, probes)
    assert devs[-1] > 2 * ether[0][1]


def test_perturbation_rejects_lora():
    with pytest.raises(ConfigurationError):
        H.sample_transformation("lora", 8, 1.0, H.make_rng(0))


# -- ablations ---------------------------------------------------------------
def test_ablate_blocks_counts(task):
    rows = H.ablate_blocks("ether", [1, 4, 16], task, lr=0.1, epochs=1, **H.REFERENCE_TRAIN)
    assert len({r.params for r in rows}) == 1
    assert rows[0].params == param_count("ether", 32, 64) + param_count("ether", 64, 16)
    for r in rows:
        assert r.ops_mul * r.n == rows[0].ops_mul
        assert r.ops_add * r.n == rows[0].ops_add
    assert rows[0].ops_mul == op_count(32, 64)[0] + op_count(64, 16)[0]


def test_ablate_blocks_divisibility(task):
    with pytest.raises(ConfigurationError):
        H.ablate_blocks("oft", [3], task, lr=0.1, epochs=1)


def test_ether_plus_block_count_barely_matters(task):
    rows = H.ablate_blocks("ether_plus", [1, 4, 16], task, lr=1e-2, epochs=H.REFERENCE_EPOCHS,
                           **H.REFERENCE_TRAIN)
    losses = [r.final_loss for r in rows]
    assert (max(losses) - min(losses)) / min(losses) <= 0.20


@pytest.mark.xfail(strict=True, reason="plain ETHER with 16 blocks forces 2-dim reflections on a 32-dim layer; "
                                       "at desk scale the loss spread across n is far above 20%")
def test_ether_block_count_barely_matters(task):
    rows = H.ablate_blocks("ether", [1, 4, 16], task, lr=1e-1, epochs=H.REFERENCE_EPOCHS, **H.REFERENCE_TRAIN)
    losses = [r.final_loss for r in rows]
    assert (max(losses) - min(losses)) / min(losses) <= 0.20


def test_sidedness(task, pretrained):
    rows = H.ablate_sidedness(task, lr=1e-2, epochs=H.REFERENCE_EPOCHS, **H.REFERENCE_TRAIN)
    two, one = rows
    assert two.two_sided and not one.two_sided
    assert two.params == 2 * (32 + 64) + 2 * (64 + 16)
    assert one.params == 2 * 32 + 2 * 64
    assert two.final_loss <= one.final_loss
    for sided in (True, False):
        run = H.finetune(pretrained, H.AdapterConfig("ether_plus", two_sided=sided), task, 1e-2, 1, 0)
        assert run.initial_loss == pytest.approx(run.base_loss, rel=1e-12)
