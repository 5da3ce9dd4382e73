"""Config validation, iteration sampling cardinalities, loss closed forms,
the optimization loop, and checkpoint round-trips."""

import numpy as np
import pytest

from narob.autodiff import Tensor
from narob.container import FormatError, write_container
from narob.model import init_params
from narob.tasks import TASKS, FeatureSpec, build_dataset
from narob.training import (CHECKPOINT_KIND, ConfigError, DivergenceError,
                            FULL_PROFILE, TrainConfig, _feature_step_loss,
                            compute_loss, load_checkpoint, sample_iteration,
                            save_checkpoint, train, write_config_json,
                            write_trainlog_csv)


# ---------------------------------------------------------------------------
# configuration


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig(mode="nope")
    with pytest.raises(ConfigError):
        TrainConfig(mode="paired")  # no partner
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"task_id": "bfs", "not_a_key": 1})


def test_config_profiles_merge():
    desk = TrainConfig.from_dict({"task_id": "bfs"})
    assert (desk.batch_size, desk.steps, desk.aux_count) == (4, 2000, 64)
    full = TrainConfig.from_dict({"task_id": "bfs", "profile": "full"})
    assert (full.batch_size, full.steps, full.aux_count) == (32, 10000, 240)
    assert FULL_PROFILE["aux_count"] == 240
    over = TrainConfig.from_dict({"task_id": "bfs", "steps": 5})
    assert over.steps == 5


def test_bank_tasks_by_mode():
    assert TrainConfig(task_id="bfs").bank_tasks() == ["bfs"]
    cfg = TrainConfig(task_id="bfs", mode="paired", partner_task="minimum")
    assert cfg.bank_tasks() == ["bfs", "minimum"]
    cfg = TrainConfig(task_id="bfs", mode="multi_aug", aux_tasks=["minimum", "bfs"])
    assert cfg.bank_tasks() == ["bfs", "minimum"]


# ---------------------------------------------------------------------------
# iteration sampling


@pytest.fixture(scope="module")
def tiny_sets():
    return {tid: build_dataset(TASKS[tid], 6, 4, seed=21)
            for tid in ("bfs", "minimum", "bubble_sort")}


def test_sample_iteration_single(tiny_sets):
    cfg = TrainConfig(task_id="bfs", aux_count=10, batch_size=3)
    targets, aux = sample_iteration(tiny_sets, cfg, np.random.default_rng(0))
    assert len(targets) == 3
    assert len(aux) == 10
    assert all(t == "bfs" for t, _, _ in aux)


def test_sample_iteration_paired_splits_budget(tiny_sets):
    cfg = TrainConfig(task_id="bfs", mode="paired", partner_task="minimum",
                      aux_count=9)
    _, aux = sample_iteration(tiny_sets, cfg, np.random.default_rng(0))
    counts = {}
    for t, _, _ in aux:
        counts[t] = counts.get(t, 0) + 1
    assert counts == {"bfs": 4, "minimum": 5}


def test_sample_iteration_multi_aug(tiny_sets):
    cfg = TrainConfig(task_id="bfs", mode="multi_aug",
                      aux_tasks=["bfs", "minimum", "bubble_sort"], aux_per_task=4)
    _, aux = sample_iteration(tiny_sets, cfg, np.random.default_rng(0))
    assert len(aux) == 12
    counts = {}
    for t, _, _ in aux:
        counts[t] = counts.get(t, 0) + 1
    assert counts == {"bfs": 4, "minimum": 4, "bubble_sort": 4}


def test_sample_iteration_missing_dataset_raises(tiny_sets):
    cfg = TrainConfig(task_id="bfs", mode="paired", partner_task="dijkstra")
    with pytest.raises(ConfigError):
        sample_iteration(tiny_sets, cfg, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_iteration({}, TrainConfig(task_id="bfs"), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# losses


def _fs(kind, k=0):
    return FeatureSpec("f", "hint", "node", kind, k)


def test_pointer_loss_uniform_is_log_n():
    n = 6
    loss = _feature_step_loss(_fs("pointer"), Tensor(np.zeros((n, n))),
                              np.zeros(n, dtype=np.int64), n)
    assert np.isclose(float(loss.data), np.log(n))


def test_mask_one_loss_uniform_is_log_n():
    n = 5
    truth = np.eye(n, dtype=np.int64)[2]
    loss = _feature_step_loss(_fs("mask_one"), Tensor(np.zeros((n, 1))), truth, n)
    assert np.isclose(float(loss.data), np.log(n))


def test_mask_loss_at_zero_logits_is_log_two():
    n = 4
    truth = np.array([0, 1, 1, 0])
    loss = _feature_step_loss(_fs("mask"), Tensor(np.zeros((n, 1))), truth, n)
    assert np.isclose(float(loss.data), np.log(2.0))


def test_scalar_loss_is_mean_squared_error():
    n = 4
    truth = np.full(n, 1.5)
    pred = Tensor(np.full((n, 1), 2.0))
    loss = _feature_step_loss(_fs("scalar"), pred, truth, n)
    assert np.isclose(float(loss.data), 0.25)


def test_confident_correct_predictions_give_near_zero_loss():
    task = TASKS["bfs"]
    inst = build_dataset(task, 1, 4, seed=30).instances[0]
    n, big = 4, 200.0
    preds_seq = []
    for t in range(inst.num_steps):
        preds = {}
        for f in task.stage_features("hint"):
            truth = inst.hints[f.name][t]
            if f.kind == "pointer":
                preds[f.name] = Tensor(big * np.eye(n)[truth])
            else:
                preds[f.name] = Tensor(
                    big * (np.asarray(truth, dtype=np.float64).reshape(n, 1) * 2 - 1))
        preds["pi"] = Tensor(big * np.eye(n)[inst.outputs["pi"]])
        preds_seq.append(preds)
    lb = compute_loss(preds_seq, inst, task)
    assert float(lb.total.data) < 1e-6
    assert set(lb.per_feature) == {"visited", "frontier", "pi_h", "pi"}


def test_compute_loss_total_is_feature_mean():
    task = TASKS["minimum"]
    inst = build_dataset(task, 1, 4, seed=31).instances[0]
    preds_seq = [{"min_h": Tensor(np.zeros((4, 1))),
                  "i": Tensor(np.zeros((4, 1))),
                  "min": Tensor(np.zeros((4, 1)))}
                 for _ in range(inst.num_steps)]
    lb = compute_loss(preds_seq, inst, task)
    assert np.isclose(float(lb.total.data),
                      np.mean(list(lb.per_feature.values())))
    assert np.isclose(float(lb.total.data), np.log(4))  # all mask_one heads


def test_compute_loss_rejects_missing_feature():
    task = TASKS["minimum"]
    inst = build_dataset(task, 1, 4, seed=32).instances[0]
    with pytest.raises(ConfigError):
        compute_loss([{"min_h": Tensor(np.zeros((4, 1)))}], inst, task)


# ---------------------------------------------------------------------------
# the loop


def _tiny_cfg(**kw):
    base = dict(task_id="minimum", steps=5, batch_size=2, aux_count=3,
                hidden=8, train_size=4, train_nodes=4, val_every=0, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_min_sets():
    return {"minimum": build_dataset(TASKS["minimum"], 4, 4, seed=40)}


def test_train_is_deterministic(tiny_min_sets):
    p1, log1 = train(_tiny_cfg(), tiny_min_sets)
    p2, log2 = train(_tiny_cfg(), tiny_min_sets)
    for k in p1:
        assert np.array_equal(p1[k].data, p2[k].data), k
    assert log1.losses == log2.losses


def test_train_zero_steps_returns_initialization(tiny_min_sets):
    cfg = _tiny_cfg(steps=0)
    params, log = train(cfg, tiny_min_sets)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 7)))
    fresh = init_params(TASKS["minimum"], cfg.hidden, rng,
                        aux_tasks=[TASKS["minimum"]])
    for k in fresh:
        assert np.array_equal(params[k].data, fresh[k].data), k
    assert log.losses == []


def test_train_reduces_loss(tiny_min_sets):
    _, log = train(_tiny_cfg(steps=40, seed=1), tiny_min_sets)
    first = np.mean([l for _, l in log.losses[:5]])
    last = np.mean([l for _, l in log.losses[-5:]])
    assert last < first


def test_train_baseline_has_no_openbook_dependence(tiny_min_sets):
    p, _ = train(_tiny_cfg(use_openbook=False), tiny_min_sets)
    fresh = init_params(TASKS["minimum"], 8,
                        np.random.default_rng(np.random.SeedSequence(entropy=(3, 7))),
                        aux_tasks=[TASKS["minimum"]])
    # attention weights never receive gradient without the open-book path
    for name in ("openbook/q/w", "openbook/v/w", "dataset_encoder/shared/w"):
        assert np.array_equal(p[name].data, fresh[name].data)


def test_train_validation_logging(tiny_min_sets):
    _, log = train(_tiny_cfg(steps=6, val_every=3, val_size=2), tiny_min_sets)
    assert [s for s, _ in log.validation] == [2, 5]
    assert all(0.0 <= v <= 1.0 for _, v in log.validation)


def test_train_raises_on_divergence(tmp_path):
    ds = build_dataset(TASKS["minimum"], 4, 4, seed=41)
    ds.instances[0].inputs["key"] = np.full(4, np.nan)
    diag = tmp_path / "diag.narckpt"
    with pytest.raises(DivergenceError):
        train(_tiny_cfg(steps=50), {"minimum": ds}, diag_path=str(diag))
    assert diag.exists()


# ---------------------------------------------------------------------------
# checkpoints and logs


def test_checkpoint_round_trip(tmp_path, tiny_min_sets):
    cfg = _tiny_cfg(steps=2)
    params, _ = train(cfg, tiny_min_sets)
    path = tmp_path / "m.narckpt"
    save_checkpoint(path, params, cfg, extra={"note": 1})
    loaded, cfg2, meta = load_checkpoint(path)
    assert cfg2.to_dict() == cfg.to_dict()
    assert meta["extra"] == {"note": 1}
    for k in params:
        assert np.array_equal(params[k].data, loaded[k].data)


def test_load_checkpoint_rejects_other_containers(tmp_path):
    path = tmp_path / "x.narckpt"
    write_container(path, {"kind": "something-else"}, {"a": np.zeros(2)})
    with pytest.raises(FormatError):
        load_checkpoint(path)
    assert CHECKPOINT_KIND == "narob-checkpoint"


def test_log_and_config_files(tmp_path, tiny_min_sets):
    cfg = _tiny_cfg(steps=4, val_every=2, val_size=1)
    _, log = train(cfg, tiny_min_sets)
    csv = tmp_path / "log.csv"
    write_trainlog_csv(log, csv)
    lines = csv.read_text().strip().splitlines()
    assert lines[0] == "step,loss,val_f1"
    assert len(lines) == 5
    js = tmp_path / "cfg.json"
    write_config_json(cfg, js)
    import json
    assert json.loads(js.read_text())["task_id"] == "minimum"


def test_batched_rollout_loss_matches_per_instance_mean():
    """Stacking a batch through one block rollout must reproduce the mean of
    the per-instance losses and their gradients."""
    import functools
    from narob import autodiff as ad
    from narob.autodiff import Tape, backward, leaf_grad, zero_grads
    from narob.model import rollout, rollout_batch
    from narob.openbook import build_bank
    from narob.training import compute_loss_batch
    from conftest import small_params, bank_triples

    task = TASKS["bubble_sort"]
    params = small_params("bubble_sort", hidden=8, seed=3)
    ds = build_dataset(task, 6, 5, seed=99)
    insts = [i for i in ds.instances if i.num_steps == ds.instances[0].num_steps][:3]

    with Tape() as tape:
        bank = build_bank(bank_triples(ds, 2), params, np.random.default_rng(8))
        batched = compute_loss_batch(
            rollout_batch(insts, params, task, bank=bank), insts, task)
    backward(tape, batched)
    grads_b = {k: leaf_grad(t).copy() for k, t in params.items()}
    zero_grads(params.values())

    with Tape() as tape:
        bank = build_bank(bank_triples(ds, 2), params, np.random.default_rng(8))
        per = [compute_loss(rollout(i, params, task, bank=bank)[0], i, task).total
               for i in insts]
        mean = ad.scale(functools.reduce(ad.add, per), 1.0 / len(per))
    backward(tape, mean)
    grads_p = {k: leaf_grad(t).copy() for k, t in params.items()}
    zero_grads(params.values())

    assert abs(float(batched.data) - float(mean.data)) < 1e-12
    for k in grads_b:
        assert np.max(np.abs(grads_b[k] - grads_p[k])) < 1e-12


def test_batched_rollout_rejects_mixed_shapes():
    from narob.autodiff import ShapeError
    from narob.model import rollout_batch
    from conftest import small_params

    task = TASKS["bfs"]
    params = small_params("bfs", hidden=8, seed=0)
    a = build_dataset(task, 4, 4, seed=1).instances
    mixed = [i for i in a if i.num_steps != a[0].num_steps][:1]
    if mixed:
        with pytest.raises(ShapeError):
            rollout_batch([a[0], mixed[0]], params, task, use_openbook=False)
