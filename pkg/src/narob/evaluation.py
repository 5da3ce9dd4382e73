"""F1 scoring, bank-resampled evaluation, attention profiles, and the
experiment runners (single-task / multi-task augmenting, paired training,
auxiliary-count ablation, graph-size scaling)."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import hard_decode, init_params, rollout
from .openbook import build_bank, extract_attention
from .tasks import TASKS, build_dataset, load_dataset
from .training import (ConfigError, TrainConfig, save_checkpoint, train,
                       write_trainlog_csv)


class DependencyError(Exception):
    """A prerequisite artifact is missing; the message carries the command
    that produces it."""


@dataclass
class EvalReport:
    task_id: str
    per_feature: dict
    aggregate_mean: float
    aggregate_std: float
    resamples: int
    config: dict = field(default_factory=dict)


@dataclass
class AttentionProfile:
    target_task: str
    weights: dict  # source task -> normalized attention mass


# ---------------------------------------------------------------------------
# scoring


def _binary_f1(pred, truth):
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def score_outputs(decoded, truths, task, scalar_tol=0.01):
    """Per-feature and aggregate F1 of hard-decoded outputs for one instance."""
    per_feature = {}
    for f in task.stage_features("output"):
        p, t = decoded[f.name], truths[f.name]
        if p.shape != t.shape:
            raise ValueError(f"shape mismatch for {f.name}")
        if f.kind == "mask":
            per_feature[f.name] = _binary_f1(p, t)
        elif f.kind == "mask_one":
            per_feature[f.name] = float(np.argmax(p) == np.argmax(t))
        elif f.kind in ("pointer", "categorical"):
            per_feature[f.name] = float(np.mean(p == t))
        else:  # scalar: fraction within absolute tolerance
            per_feature[f.name] = float(np.mean(np.abs(p - t) <= scalar_tol))
    aggregate = float(np.mean(list(per_feature.values())))
    return per_feature, aggregate


def sample_auxiliary(train_sets, config, rng):
    """The bank draw of one iteration/pass, shared by training and evaluation."""
    from .training import sample_iteration
    _, aux = sample_iteration(train_sets, config, rng)
    return aux


def evaluate(params, test_set, aux_sources, config, rng,
             use_openbook=None) -> EvalReport:
    """Autoregressive rollout per test instance; the bank is resampled
    (instances and adjacent-state pairs) per pass and scores averaged."""
    task = TASKS[test_set.task_id]
    use_ob = config.use_openbook if use_openbook is None else use_openbook
    # without a bank every pass is identical, so one pass suffices
    passes = config.eval_bank_resamples if use_ob else 1
    resample_scores = []
    feature_sums = {}
    for _ in range(passes):
        bank = build_bank(sample_auxiliary(aux_sources, config, rng),
                          params, rng) if use_ob else None
        agg = []
        for inst in test_set.instances:
            preds_seq, _ = rollout(inst, params, task, bank=bank,
                                   mode="autoregressive", use_openbook=use_ob)
            decoded = hard_decode(preds_seq[-1], task, "output")
            pf, a = score_outputs(decoded, inst.outputs, task, config.scalar_tol)
            for k, v in pf.items():
                feature_sums[k] = feature_sums.get(k, 0.0) + v
            agg.append(a)
        resample_scores.append(float(np.mean(agg)))
    total = passes * len(test_set.instances)
    return EvalReport(
        task_id=test_set.task_id,
        per_feature={k: v / total for k, v in feature_sums.items()},
        aggregate_mean=float(np.mean(resample_scores)),
        aggregate_std=float(np.std(resample_scores)),
        resamples=passes,
        config=config.to_dict())


def attention_profile(params, test_set, aux_sources, config, rng) -> AttentionProfile:
    """Attention mass over bank rows, summed over steps, nodes, instances and
    bank resamples, grouped by source task and normalized to 1."""
    task = TASKS[test_set.task_id]
    if len(set(config.bank_tasks())) < 2:
        raise ConfigError("attention profiles need a multi-task bank")
    mass = {}
    for _ in range(config.eval_bank_resamples):
        bank = build_bank(sample_auxiliary(aux_sources, config, rng), params, rng)
        for inst in test_set.instances:
            _, records = rollout(inst, params, task, bank=bank,
                                 mode="autoregressive", record_attention=True)
            for rec in records:
                for t, m in extract_attention(rec).items():
                    mass[t] = mass.get(t, 0.0) + m
    z = sum(mass.values())
    return AttentionProfile(target_task=test_set.task_id,
                            weights={k: v / z for k, v in sorted(mass.items())})


def select_partner(profile: AttentionProfile, self_task: str) -> str:
    """Highest-attention source task excluding the target; ties break toward
    the lexicographically first task id."""
    best, best_w = None, -1.0
    for tid in sorted(profile.weights):
        if tid == self_task:
            continue
        if profile.weights[tid] > best_w:
            best, best_w = tid, profile.weights[tid]
    if best is None:
        raise ConfigError("profile covers no task other than the target")
    return best


# ---------------------------------------------------------------------------
# experiment harness


def _dataset_path(data_dir, task_id, split, nodes=None):
    if nodes is not None:
        sized = os.path.join(data_dir, f"{task_id}-{split}-n{nodes}.nardat")
        if os.path.exists(sized):
            return sized
    return os.path.join(data_dir, f"{task_id}-{split}.nardat")


def load_or_fail(data_dir, task_id, split, nodes, count, seed):
    path = _dataset_path(data_dir, task_id, split, nodes)
    if not os.path.exists(path):
        name = os.path.basename(_dataset_path(data_dir, task_id, split))
        raise DependencyError(
            f"missing dataset {path}; produce it with: "
            f"narob gen --task {task_id} --count {count} --nodes {nodes} "
            f"--seed {seed} --split {split} --out {data_dir} --name {name}")
    ds = load_dataset(path)
    if nodes is not None and ds.node_count != nodes:
        raise DependencyError(
            f"{path} has node_count {ds.node_count}, expected {nodes}; regenerate "
            f"with: narob gen --task {task_id} --count {count} --nodes {nodes} "
            f"--seed {seed} --split {split} --out {data_dir} "
            f"--name {task_id}-{split}-n{nodes}.nardat")
    return ds


def generate_default_datasets(tasks, config: TrainConfig, data_seed=1):
    """In-memory train/test datasets at the configured sizes."""
    train_sets, test_sets = {}, {}
    for tid in tasks:
        task = TASKS[tid]
        train_sets[tid] = build_dataset(task, config.train_size, config.train_nodes,
                                        data_seed, split="train")
        test_sets[tid] = build_dataset(task, config.test_size, config.test_nodes,
                                       data_seed + 1, split="test")
    return train_sets, test_sets


def _run_single(args):
    """One (task, seed, variant) training + evaluation; top-level for pickling."""
    task_id, seed, variant, cfg_dict, train_sets, test_set, ckpt_path = args
    cfg = TrainConfig.from_dict({**cfg_dict, "task_id": task_id, "seed": seed,
                                 "use_openbook": variant == "openbook"})
    params, log = train(cfg, train_sets)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 99)))
    report = evaluate(params, test_set, train_sets, cfg, rng)
    if ckpt_path:
        save_checkpoint(ckpt_path, params, cfg)
        write_trainlog_csv(log, ckpt_path.replace(".narckpt", "-trainlog.csv"))
    return task_id, variant, seed, report.aggregate_mean, report.aggregate_std


def _fan_out(jobs=1, items=()):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [_run_single(a) for a in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_single, items))


def run_experiment(kind, cfg: dict, outdir, jobs=1):
    """Dispatch one experiment family; writes CSV tables (and figures via the
    report module) into outdir and returns the written paths."""
    os.makedirs(outdir, exist_ok=True)
    from . import reports
    base = TrainConfig.from_dict({k: v for k, v in cfg.items()
                                  if k in TrainConfig.__dataclass_fields__})
    tasks = cfg.get("tasks", sorted(TASKS))
    seeds = [base.seed + i for i in range(int(cfg.get("num_seeds", 4)))]
    data_seed = int(cfg.get("data_seed", 1))
    written = []

    def datasets_for(task_ids, train_nodes=None, test_nodes=None):
        c = TrainConfig.from_dict({**base.to_dict(),
                                   **({"train_nodes": train_nodes} if train_nodes else {}),
                                   **({"test_nodes": test_nodes} if test_nodes else {})})
        return generate_default_datasets(task_ids, c, data_seed)

    if kind == "single_aug":
        train_sets, test_sets = datasets_for(tasks)
        items = [(tid, s, var, base.to_dict(), {tid: train_sets[tid]}, test_sets[tid], None)
                 for tid in tasks for var in ("baseline", "openbook") for s in seeds]
        rows = _fan_out(jobs=jobs, items=items)
        runs_csv = os.path.join(outdir, "single_aug_runs.csv")
        reports.write_csv(runs_csv, ["task", "variant", "seed", "f1_mean", "f1_std"], rows)
        summary = _summarize(rows)
        summary_csv = os.path.join(outdir, "single_aug_summary.csv")
        reports.write_csv(summary_csv, ["task", "variant", "n_runs", "f1_mean", "f1_std"],
                          summary)
        fig = reports.comparison_figure(summary, os.path.join(outdir, "single_aug.svg"))
        written += [runs_csv, summary_csv, fig]

    elif kind == "multi_aug":
        train_sets, test_sets = datasets_for(tasks)
        aux_per_task = max(1, base.aux_count // len(tasks))
        rows, profile_rows, partner_rows = [], [], []
        for tid in tasks:
            for seed in seeds:
                cfgm = TrainConfig.from_dict({
                    **base.to_dict(), "task_id": tid, "seed": seed,
                    "mode": "multi_aug", "aux_tasks": list(tasks),
                    "aux_per_task": aux_per_task,
                    "aux_count": aux_per_task * len(tasks)})
                params, _ = train(cfgm, train_sets)
                rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 99)))
                rep = evaluate(params, test_sets[tid], train_sets, cfgm, rng)
                rows.append((tid, "multi_aug", seed, rep.aggregate_mean, rep.aggregate_std))
                if seed == seeds[0]:
                    prof = attention_profile(params, test_sets[tid], train_sets, cfgm, rng)
                    for src, w in prof.weights.items():
                        profile_rows.append((tid, src, f"{w:.10f}"))
                    partner_rows.append((tid, select_partner(prof, tid)))
        runs_csv = os.path.join(outdir, "multi_aug_runs.csv")
        reports.write_csv(runs_csv, ["task", "variant", "seed", "f1_mean", "f1_std"], rows)
        summary_csv = os.path.join(outdir, "multi_aug_summary.csv")
        reports.write_csv(summary_csv, ["task", "variant", "n_runs", "f1_mean", "f1_std"],
                          _summarize(rows))
        profile_csv = os.path.join(outdir, "attention_profile.csv")
        reports.write_csv(profile_csv, ["target", "source", "weight"], profile_rows)
        partner_csv = os.path.join(outdir, "partners.csv")
        reports.write_csv(partner_csv, ["target", "partner"], partner_rows)
        fig = reports.heatmap_figure(profile_rows, os.path.join(outdir, "attention_heatmap.svg"))
        written += [runs_csv, summary_csv, profile_csv, partner_csv, fig]

    elif kind == "paired":
        partner_csv = cfg.get("partners_csv", "")
        if not partner_csv or not os.path.exists(partner_csv):
            raise DependencyError(
                "paired training needs partners.csv from a multi_aug run; produce it "
                "with: narob experiment --kind multi_aug --out <dir>")
        partners = dict(reports.read_csv_rows(partner_csv))
        rows = []
        for tid in tasks:
            partner = partners.get(tid)
            if partner is None:
                raise DependencyError(f"no partner recorded for {tid} in {partner_csv}")
            train_sets, test_sets = datasets_for(sorted({tid, partner}))
            for seed in seeds:
                cfgp = TrainConfig.from_dict({**base.to_dict(), "task_id": tid,
                                              "seed": seed, "mode": "paired",
                                              "partner_task": partner})
                params, _ = train(cfgp, train_sets)
                rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 99)))
                rep = evaluate(params, test_sets[tid], train_sets, cfgp, rng)
                rows.append((tid, f"paired({partner})", seed,
                             rep.aggregate_mean, rep.aggregate_std))
        runs_csv = os.path.join(outdir, "paired_runs.csv")
        reports.write_csv(runs_csv, ["task", "variant", "seed", "f1_mean", "f1_std"], rows)
        summary_csv = os.path.join(outdir, "paired_summary.csv")
        reports.write_csv(summary_csv, ["task", "variant", "n_runs", "f1_mean", "f1_std"],
                          _summarize(rows))
        written += [runs_csv, summary_csv]
        three_way = _three_way_table(cfg, _summarize(rows), outdir, reports)
        if three_way:
            written.append(three_way)

    elif kind == "ablate_aux":
        task_id = cfg.get("task", "bfs")
        ladder = cfg.get("aux_ladder", [16, 32, 48, 64])
        train_sets, test_sets = datasets_for([task_id])
        rows = []
        for ell in ladder:
            for seed in seeds:
                cfga = TrainConfig.from_dict({**base.to_dict(), "task_id": task_id,
                                              "seed": seed, "aux_count": int(ell)})
                params, _ = train(cfga, train_sets)
                rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 99)))
                rep = evaluate(params, test_sets[task_id], train_sets, cfga, rng)
                rows.append((task_id, int(ell), seed, rep.aggregate_mean, rep.aggregate_std))
        csv = os.path.join(outdir, "ablate_aux.csv")
        reports.write_csv(csv, ["task", "aux_count", "seed", "f1_mean", "f1_std"], rows)
        fig = reports.sweep_figure(rows, 1, os.path.join(outdir, "ablate_aux.svg"),
                                   xlabel="auxiliary count")
        written += [csv, fig]

    elif kind == "scale_train":
        task_id = cfg.get("task", "bfs")
        sizes = cfg.get("train_sizes", [4, 8, 12, 16, 20])
        rows = []
        for n in sizes:
            train_sets, test_sets = datasets_for([task_id], train_nodes=int(n))
            cfgs = TrainConfig.from_dict({**base.to_dict(), "task_id": task_id,
                                          "train_nodes": int(n)})
            rng0 = np.random.default_rng(np.random.SeedSequence(entropy=(cfgs.seed, 5)))
            untrained = init_params(TASKS[task_id], cfgs.hidden, rng0,
                                    aux_tasks=[TASKS[task_id]])
            rngu = np.random.default_rng(np.random.SeedSequence(entropy=(cfgs.seed, 98)))
            base_rep = evaluate(untrained, test_sets[task_id], train_sets, cfgs, rngu)
            params, _ = train(cfgs, train_sets)
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfgs.seed, 99)))
            rep = evaluate(params, test_sets[task_id], train_sets, cfgs, rng)
            rows.append((task_id, int(n), cfgs.seed, rep.aggregate_mean,
                         rep.aggregate_std, base_rep.aggregate_mean))
        csv = os.path.join(outdir, "scale_train.csv")
        reports.write_csv(csv, ["task", "train_nodes", "seed", "f1_mean", "f1_std",
                                "untrained_f1"], rows)
        fig = reports.sweep_figure(rows, 1, os.path.join(outdir, "scale_train.svg"),
                                   xlabel="training graph size")
        written += [csv, fig]

    elif kind == "scale_test":
        task_id = cfg.get("task", "bfs")
        sizes = cfg.get("test_sizes", [16, 24, 32])
        train_sets, _ = datasets_for([task_id])
        cfgs = TrainConfig.from_dict({**base.to_dict(), "task_id": task_id})
        params, _ = train(cfgs, train_sets)
        rows = []
        for n in sizes:
            test_set = build_dataset(TASKS[task_id], cfgs.test_size, int(n),
                                     data_seed + 1, split="test")
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfgs.seed, 99, n)))
            rep = evaluate(params, test_set, train_sets, cfgs, rng)
            rows.append((task_id, int(n), cfgs.seed, rep.aggregate_mean, rep.aggregate_std))
        csv = os.path.join(outdir, "scale_test.csv")
        reports.write_csv(csv, ["task", "test_nodes", "seed", "f1_mean", "f1_std"], rows)
        fig = reports.sweep_figure(rows, 1, os.path.join(outdir, "scale_test.svg"),
                                   xlabel="test graph size")
        written += [csv, fig]

    else:
        raise ConfigError(f"unknown experiment kind {kind}")
    return written


def _summarize(rows):
    """(task, variant, seed, mean, std) rows -> per (task, variant) aggregates."""
    groups = {}
    for task_id, variant, seed, mean, _std in rows:
        groups.setdefault((str(task_id), str(variant)), []).append(mean)
    out = []
    for (task_id, variant), vals in sorted(groups.items()):
        out.append((task_id, variant, len(vals),
                    float(np.mean(vals)), float(np.std(vals))))
    return out


def _three_way_table(cfg, paired_summary, outdir, reports):
    single_csv = cfg.get("single_summary_csv", "")
    multi_csv = cfg.get("multi_summary_csv", "")
    if not (single_csv and multi_csv and os.path.exists(single_csv)
            and os.path.exists(multi_csv)):
        return None

    def col(path, wanted_variant=None):
        out = {}
        for row in reports.read_csv_rows(path):
            task_id, variant, _n, mean = row[0], row[1], row[2], float(row[3])
            if wanted_variant is None or variant == wanted_variant or \
                    variant.startswith(wanted_variant):
                out[task_id] = mean
        return out

    single = col(single_csv, "openbook")
    multi = col(multi_csv, "multi_aug")
    rows = []
    for task_id, variant, _n, mean, _std in paired_summary:
        rows.append((task_id, f"{single.get(task_id, float('nan')):.6f}",
                     f"{multi.get(task_id, float('nan')):.6f}", f"{mean:.6f}"))
    path = os.path.join(outdir, "three_way.csv")
    reports.write_csv(path, ["task", "single", "multi", "paired"], rows)
    return path
