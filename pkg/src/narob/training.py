"""Iteration sampling, per-feature losses, and the optimization loop.

Training is teacher-forced: every iteration samples a batch of target
instances plus fresh auxiliary instances (bank re-encoded with a new adjacent-
state sample each time), rolls each target out, averages the per-feature
losses, and takes one Adam step. Fully deterministic given (config, seed,
datasets).
"""

from __future__ import annotations

import functools
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tape, Tensor, backward, leaf_grad, zero_grads
from .model import hard_decode, init_params, rollout, rollout_batch
from .openbook import build_bank
from .optim import AdamState, adam_update
from .tasks import TASKS

CHECKPOINT_KIND = "narob-checkpoint"


class ConfigError(Exception):
    pass


class DivergenceError(Exception):
    pass


DESK_PROFILE = dict(batch_size=4, steps=2000, aux_count=64, hidden=128,
                    train_size=512, train_nodes=8, test_size=64, test_nodes=16)
FULL_PROFILE = dict(batch_size=32, steps=10000, aux_count=240, hidden=128,
                    train_size=1000, train_nodes=12, test_size=128, test_nodes=64)


@dataclass
class TrainConfig:
    task_id: str = "bfs"
    mode: str = "single"           # single | multi_aug | paired
    partner_task: str = ""         # paired mode only
    aux_tasks: list = field(default_factory=list)  # multi_aug bank sources
    profile: str = "desk"
    batch_size: int = 4
    steps: int = 2000
    lr: float = 1e-3
    aux_count: int = 64
    aux_per_task: int = 8
    hidden: int = 128
    seed: int = 0
    train_size: int = 512
    train_nodes: int = 8
    test_size: int = 64
    test_nodes: int = 16
    val_every: int = 100
    val_size: int = 4
    eval_bank_resamples: int = 4
    scalar_tol: float = 0.01
    use_openbook: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.aux_count < 1:
            raise ConfigError("batch_size/aux_count must be >= 1, steps >= 0")
        if self.mode not in ("single", "multi_aug", "paired"):
            raise ConfigError(f"unknown mode {self.mode}")
        if self.mode == "paired" and not self.partner_task:
            raise ConfigError("paired mode needs partner_task")

    @classmethod
    def from_dict(cls, data: dict):
        base = dict(DESK_PROFILE if data.get("profile", "desk") == "desk" else FULL_PROFILE)
        base.update(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(base) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    def bank_tasks(self):
        if self.mode == "single":
            return [self.task_id]
        if self.mode == "paired":
            return sorted({self.task_id, self.partner_task})
        tasks = self.aux_tasks or sorted(TASKS)
        return sorted(tasks)


@dataclass
class LossBreakdown:
    per_feature: dict
    total: object  # scalar Tensor


@dataclass
class TrainLog:
    seed: int
    config: dict
    losses: list = field(default_factory=list)       # (step, loss)
    validation: list = field(default_factory=list)   # (step, aggregate F1)
    wall_clock: float = 0.0


# ---------------------------------------------------------------------------
# sampling


def sample_iteration(train_sets: dict, config: TrainConfig, rng):
    """Draw batch targets and the iteration's auxiliary instances. Returns
    (targets, auxiliaries) where auxiliaries are (task_id, index, instance)."""
    if config.task_id not in train_sets or not train_sets[config.task_id].instances:
        raise ConfigError(f"no training data for target task {config.task_id}")
    pool = train_sets[config.task_id].instances
    targets = [pool[int(rng.integers(len(pool)))] for _ in range(config.batch_size)]

    def draw(task_id, k):
        if task_id not in train_sets:
            raise ConfigError(f"mode {config.mode} needs a dataset for task {task_id}")
        insts = train_sets[task_id].instances
        return [(task_id, int(i), insts[int(i)])
                for i in rng.integers(len(insts), size=k)]

    if config.mode == "single":
        aux = draw(config.task_id, config.aux_count)
    elif config.mode == "paired":
        half = config.aux_count // 2
        aux = draw(config.task_id, half) + draw(config.partner_task,
                                                config.aux_count - half)
    else:  # multi_aug: aux_per_task from every source, total == single-task budget
        aux = []
        for t in config.bank_tasks():
            aux.extend(draw(t, config.aux_per_task))
    return targets, aux


# ---------------------------------------------------------------------------
# losses


def _feature_step_loss(f, pred, truth, n):
    if f.kind == "pointer":
        lsm = ad.log_softmax_rows(pred)
        onehot = np.eye(n)[np.asarray(truth, dtype=np.int64)]
        return ad.scale(ad.reduce_sum(ad.mul(lsm, onehot)), -1.0 / n)
    if f.kind == "mask_one":
        lsm = ad.log_softmax_rows(ad.reshape(pred, (1, n)))
        onehot = np.asarray(truth, dtype=np.float64).reshape(1, n)
        return ad.scale(ad.reduce_sum(ad.mul(lsm, onehot)), -1.0)
    if f.kind == "categorical":
        lsm = ad.log_softmax_rows(pred)
        onehot = np.eye(f.num_classes)[np.asarray(truth, dtype=np.int64)]
        return ad.scale(ad.reduce_sum(ad.mul(lsm, onehot)), -1.0 / n)
    if f.kind == "mask":
        y = np.asarray(truth, dtype=np.float64).reshape(n, 1)
        bce = ad.sub(ad.softplus(pred), ad.mul(pred, y))
        return ad.reduce_mean(bce)
    if f.kind == "scalar":
        y = np.asarray(truth, dtype=np.float64).reshape(-1, 1)
        diff = ad.sub(pred, y)
        return ad.reduce_mean(ad.mul(diff, diff))
    raise ConfigError(f"no loss for kind {f.kind}")


def _feature_step_loss_batch(f, pred, truths, n, blocks):
    """_feature_step_loss over `blocks` stacked instances; the scalar it
    returns is the mean of the per-instance losses."""
    if f.kind == "pointer":
        lsm = ad.log_softmax_rows(pred)
        idx = np.concatenate([np.asarray(t, dtype=np.int64) for t in truths])
        return ad.scale(ad.reduce_sum(ad.mul(lsm, np.eye(n)[idx])),
                        -1.0 / (n * blocks))
    if f.kind == "mask_one":
        lsm = ad.log_softmax_rows(ad.reshape(pred, (blocks, n)))
        onehot = np.stack([np.asarray(t, dtype=np.float64) for t in truths])
        return ad.scale(ad.reduce_sum(ad.mul(lsm, onehot)), -1.0 / blocks)
    if f.kind == "categorical":
        lsm = ad.log_softmax_rows(pred)
        idx = np.concatenate([np.asarray(t, dtype=np.int64) for t in truths])
        return ad.scale(ad.reduce_sum(ad.mul(lsm, np.eye(f.num_classes)[idx])),
                        -1.0 / (n * blocks))
    if f.kind == "mask":
        y = np.concatenate(
            [np.asarray(t, dtype=np.float64).reshape(n, 1) for t in truths])
        bce = ad.sub(ad.softplus(pred), ad.mul(pred, y))
        return ad.reduce_mean(bce)
    if f.kind == "scalar":
        y = np.concatenate(
            [np.asarray(t, dtype=np.float64).reshape(-1, 1) for t in truths])
        diff = ad.sub(pred, y)
        return ad.reduce_mean(ad.mul(diff, diff))
    raise ConfigError(f"no loss for kind {f.kind}")


def compute_loss_batch(preds_seq, instances, task):
    """Mean training loss of a block-stacked teacher-forced rollout; averaged
    over nodes, steps, features, then instances (uniform sizes make the
    instance mean exact)."""
    n = instances[0].graph.n
    steps = len(preds_seq)
    blocks = len(instances)
    totals = []
    for f in task.features:
        if f.stage == "input":
            continue
        step_losses = []
        for t, preds in enumerate(preds_seq):
            if f.name not in preds:
                raise ConfigError(f"missing prediction for feature {f.name}")
            truths = [i.hints[f.name][t] if f.stage == "hint" else i.outputs[f.name]
                      for i in instances]
            step_losses.append(
                _feature_step_loss_batch(f, preds[f.name], truths, n, blocks))
        totals.append(ad.scale(functools.reduce(ad.add, step_losses), 1.0 / steps))
    return ad.scale(functools.reduce(ad.add, totals), 1.0 / len(totals))


def compute_loss(preds_seq, instance, task) -> LossBreakdown:
    """Cross-entropy / BCE / squared-error per feature, averaged uniformly
    over nodes, steps, then features."""
    n = instance.graph.n
    steps = len(preds_seq)
    per_feature = {}
    totals = []
    for f in task.features:
        if f.stage == "input":
            continue
        step_losses = []
        for t, preds in enumerate(preds_seq):
            if f.name not in preds:
                raise ConfigError(f"missing prediction for feature {f.name}")
            truth = instance.hints[f.name][t] if f.stage == "hint" else instance.outputs[f.name]
            step_losses.append(_feature_step_loss(f, preds[f.name], truth, n))
        fl = ad.scale(functools.reduce(ad.add, step_losses), 1.0 / steps)
        per_feature[f.name] = float(fl.data)
        totals.append(fl)
    total = ad.scale(functools.reduce(ad.add, totals), 1.0 / len(totals))
    return LossBreakdown(per_feature=per_feature, total=total)


# ---------------------------------------------------------------------------
# training loop


def _quick_f1(params, instances, bank_src, config, rng, task):
    # light validation: autoregressive decode, one bank sample
    from .evaluation import score_outputs
    bank = None
    if config.use_openbook:
        bank = build_bank(bank_src, params, rng)
    scores = []
    for inst in instances:
        preds_seq, _ = rollout(inst, params, task, bank=bank, mode="autoregressive",
                               use_openbook=config.use_openbook)
        decoded = hard_decode(preds_seq[-1], task, "output")
        scores.append(score_outputs(decoded, inst.outputs, task, config.scalar_tol)[1])
    return float(np.mean(scores))


def train(config: TrainConfig, datasets: dict, diag_path=None):
    """Run the optimization loop; returns (params, TrainLog)."""
    task = TASKS[config.task_id]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 7)))
    aux_tasks = [TASKS[t] for t in config.bank_tasks()]
    params = init_params(task, config.hidden, rng, aux_tasks=aux_tasks)
    state = AdamState(params)
    log = TrainLog(seed=config.seed, config=config.to_dict())
    t0 = time.monotonic()

    pool = datasets[config.task_id].instances
    val_insts = pool[-min(config.val_size, len(pool)):]

    for step in range(config.steps):
        targets, aux = sample_iteration(datasets, config, rng)
        with Tape() as tape:
            bank = build_bank(aux, params, rng) if config.use_openbook else None
            # stack same-shape instances into one block rollout per group
            groups = {}
            for inst in targets:
                groups.setdefault((inst.graph.n, inst.num_steps), []).append(inst)
            parts = []
            for insts in groups.values():
                preds_seq = rollout_batch(insts, params, task, bank=bank,
                                          use_openbook=config.use_openbook)
                part = compute_loss_batch(preds_seq, insts, task)
                parts.append(ad.scale(part, len(insts) / len(targets)))
            loss = functools.reduce(ad.add, parts)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            if diag_path:
                save_checkpoint(diag_path, params, config, extra={"diverged_at": step})
            raise DivergenceError(f"non-finite loss at step {step}")
        backward(tape, loss)
        grads = {k: leaf_grad(t) for k, t in params.items()}
        zero_grads(params.values())
        adam_update(params, grads, state, lr=config.lr)
        log.losses.append((step, loss_val))
        if config.val_every and (step + 1) % config.val_every == 0:
            _, vaux = sample_iteration(datasets, config, rng)
            f1 = _quick_f1(params, val_insts, vaux, config, rng, task)
            log.validation.append((step, f1))
    log.wall_clock = time.monotonic() - t0
    return params, log


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, config, extra=None):
    meta = {"kind": CHECKPOINT_KIND, "config": config.to_dict(),
            "seed": config.seed, "extra": extra or {}}
    container.write_container(path, meta, {k: t.data for k, t in params.items()})


def load_checkpoint(path):
    meta, arrays = container.read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise container.FormatError(f"{path} is not a checkpoint")
    params = {k: Tensor(v) for k, v in arrays.items()}
    return params, TrainConfig.from_dict(meta["config"]), meta


def write_trainlog_csv(log: TrainLog, path):
    with open(path, "w") as f:
        f.write("step,loss,val_f1\n")
        val = dict(log.validation)
        for step, loss in log.losses:
            v = val.get(step)
            f.write(f"{step},{loss:.8f},{'' if v is None else f'{v:.6f}'}\n")


def write_config_json(config: TrainConfig, path):
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
