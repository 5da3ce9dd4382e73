"""Operator surface: dataset generation, training, evaluation, attention
analysis, experiment orchestration, and report emission.

Every verb that produces artifacts also writes a manifest (command, config
echo, seed, content hashes of inputs and outputs, tool version) so any run
can be reproduced and checked hash-for-hash. Exit codes: 0 success, 1 user
error, 2 internal failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, container, reports
from .evaluation import (DependencyError, attention_profile, evaluate,
                         load_or_fail, run_experiment, select_partner)
from .openbook import build_bank
from .tasks import TASKS, build_dataset, load_dataset, persist_dataset
from .training import (ConfigError, TrainConfig, load_checkpoint,
                       save_checkpoint, train, write_config_json,
                       write_trainlog_csv)

OUT_ROOT_ENV = "NAROB_OUT"


class UserError(Exception):
    pass


def _out_dir(args):
    out = args.out or os.environ.get(OUT_ROOT_ENV) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(outdir, name, argv, config, seed, inputs, outputs):
    manifest = {
        "tool": "narob",
        "version": __version__,
        "command": argv,
        "config": config,
        "seed": seed,
        "inputs": {p: container.content_digest(p) for p in inputs},
        "outputs": {p: container.content_digest(p) for p in outputs},
    }
    path = os.path.join(outdir, name)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _parse_override(kv):
    if "=" not in kv:
        raise UserError(f"override must be key=value, got {kv!r}")
    key, raw = kv.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key, val


def _load_cfg(args):
    cfg = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise UserError(f"config file not found: {args.config}")
        with open(args.config) as f:
            cfg = json.load(f)
    for kv in getattr(args, "set", None) or []:
        key, val = _parse_override(kv)
        cfg[key] = val
    return cfg


def _datasets_for_train(cfg: TrainConfig, data_dir):
    sets = {}
    for tid in cfg.bank_tasks():
        sets[tid] = load_or_fail(data_dir, tid, "train", cfg.train_nodes,
                                 cfg.train_size, 1)
    return sets


# ---------------------------------------------------------------------------
# verbs


def cmd_gen(args, argv):
    if args.task not in TASKS:
        raise UserError(f"unknown task {args.task!r}; choices: {sorted(TASKS)}")
    outdir = _out_dir(args)
    ds = build_dataset(TASKS[args.task], args.count, args.nodes, args.seed,
                       split=args.split, edge_prob=args.edge_prob)
    name = args.name or f"{args.task}-{args.split}.nardat"
    path = os.path.join(outdir, name)
    persist_dataset(ds, path)
    _write_manifest(outdir, name + ".manifest.json", argv,
                    {"task": args.task, "count": args.count, "nodes": args.nodes,
                     "split": args.split, "edge_prob": args.edge_prob},
                    args.seed, [], [path])
    print(path)
    return 0


def cmd_train(args, argv):
    outdir = _out_dir(args)
    cfg = TrainConfig.from_dict(_load_cfg(args))
    datasets = _datasets_for_train(cfg, args.data)
    ckpt = os.path.join(outdir, f"{cfg.task_id}-{cfg.mode}-s{cfg.seed}.narckpt")
    params, log = train(cfg, datasets, diag_path=ckpt + ".diverged")
    save_checkpoint(ckpt, params, cfg)
    log_csv = ckpt.replace(".narckpt", "-trainlog.csv")
    write_trainlog_csv(log, log_csv)
    cfg_json = ckpt.replace(".narckpt", "-config.json")
    write_config_json(cfg, cfg_json)
    inputs = [os.path.join(args.data, f"{t}-train.nardat") for t in cfg.bank_tasks()
              if os.path.exists(os.path.join(args.data, f"{t}-train.nardat"))]
    _write_manifest(outdir, os.path.basename(ckpt) + ".manifest.json", argv,
                    cfg.to_dict(), cfg.seed, inputs, [ckpt, log_csv, cfg_json])
    print(ckpt)
    return 0


def cmd_eval(args, argv):
    outdir = _out_dir(args)
    params, cfg, _ = load_checkpoint(args.ckpt)
    for kv in args.set or []:
        key, val = _parse_override(kv)
        cfg = TrainConfig.from_dict({**cfg.to_dict(), key: val})
    datasets = _datasets_for_train(cfg, args.data)
    if args.test:
        test_set = load_dataset(args.test)
    else:
        test_set = load_or_fail(args.data, cfg.task_id, "test", cfg.test_nodes,
                                cfg.test_size, 2)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 99)))
    rep = evaluate(params, test_set, datasets, cfg, rng)
    csv_path = os.path.join(outdir, f"eval-{cfg.task_id}-s{cfg.seed}.csv")
    rows = [(rep.task_id, "aggregate", f"{rep.aggregate_mean:.6f}",
             f"{rep.aggregate_std:.6f}")]
    rows += [(rep.task_id, name, f"{v:.6f}", "") for name, v in rep.per_feature.items()]
    reports.write_csv(csv_path, ["task", "feature", "f1_mean", "f1_std"], rows)
    _write_manifest(outdir, os.path.basename(csv_path) + ".manifest.json", argv,
                    cfg.to_dict(), cfg.seed, [args.ckpt], [csv_path])
    print(f"{rep.task_id} aggregate F1 = {rep.aggregate_mean:.4f} "
          f"± {rep.aggregate_std:.4f}")
    return 0


def cmd_attn(args, argv):
    outdir = _out_dir(args)
    params, cfg, _ = load_checkpoint(args.ckpt)
    datasets = _datasets_for_train(cfg, args.data)
    test_set = load_or_fail(args.data, cfg.task_id, "test", cfg.test_nodes,
                            cfg.test_size, 2)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 99)))
    prof = attention_profile(params, test_set, datasets, cfg, rng)
    prof_csv = os.path.join(outdir, f"profile-{cfg.task_id}.csv")
    reports.write_csv(prof_csv, ["target", "source", "weight"],
                      [(prof.target_task, s, f"{w:.10f}")
                       for s, w in prof.weights.items()])
    # per-(step, node, row) attention records for the first few test instances
    from .evaluation import sample_auxiliary
    from .model import rollout
    task = TASKS[cfg.task_id]
    bank = build_bank(sample_auxiliary(datasets, cfg, rng), params, rng)
    rec_rows = []
    for inst in test_set.instances[:args.records]:
        _, records = rollout(inst, params, task, bank=bank, mode="autoregressive",
                             record_attention=True)
        for step, rec in enumerate(records):
            n, total = rec.weights.shape
            for node in range(n):
                for row in range(total):
                    src = rec.source_tasks[row] if row < rec.bank_size else "self"
                    rec_rows.append((step, node, row, src,
                                     f"{rec.weights[node, row]:.10f}"))
    rec_csv = os.path.join(outdir, f"attention-records-{cfg.task_id}.csv")
    reports.write_csv(rec_csv, ["step", "node", "row", "source_task", "weight"], rec_rows)
    _write_manifest(outdir, os.path.basename(prof_csv) + ".manifest.json", argv,
                    cfg.to_dict(), cfg.seed, [args.ckpt], [prof_csv, rec_csv])
    print(prof_csv)
    return 0


def cmd_pair(args, argv):
    rows = reports.read_csv_rows(args.profile)
    targets = sorted({r[0] for r in rows})
    out_rows = []
    for tgt in targets:
        from .evaluation import AttentionProfile
        weights = {r[1]: float(r[2]) for r in rows if r[0] == tgt}
        partner = select_partner(AttentionProfile(tgt, weights), tgt)
        out_rows.append((tgt, partner))
        if not args.task or args.task == tgt:
            print(f"{tgt} -> {partner}")
    if args.out:
        outdir = _out_dir(args)
        path = os.path.join(outdir, "partners.csv")
        reports.write_csv(path, ["target", "partner"], out_rows)
        _write_manifest(outdir, "partners.csv.manifest.json", argv, {}, 0,
                        [args.profile], [path])
    return 0


def cmd_experiment(args, argv):
    outdir = _out_dir(args)
    cfg = _load_cfg(args)
    written = run_experiment(args.kind, cfg, outdir, jobs=args.jobs)
    _write_manifest(outdir, f"experiment-{args.kind}.manifest.json", argv, cfg,
                    int(cfg.get("seed", 0)), [], written)
    for p in written:
        print(p)
    return 0


def cmd_report(args, argv):
    outdir = _out_dir(args)
    indir = args.indir
    written = []
    renders = {
        "single_aug_summary.csv": lambda rows, out: reports.comparison_figure(
            [(r[0], r[1], r[2], float(r[3]), float(r[4])) for r in rows],
            os.path.join(out, "single_aug.svg")),
        "attention_profile.csv": lambda rows, out: reports.heatmap_figure(
            rows, os.path.join(out, "attention_heatmap.svg")),
        "ablate_aux.csv": lambda rows, out: reports.sweep_figure(
            rows, 1, os.path.join(out, "ablate_aux.svg"), xlabel="auxiliary count"),
        "scale_train.csv": lambda rows, out: reports.sweep_figure(
            rows, 1, os.path.join(out, "scale_train.svg"), xlabel="training graph size"),
        "scale_test.csv": lambda rows, out: reports.sweep_figure(
            rows, 1, os.path.join(out, "scale_test.svg"), xlabel="test graph size"),
    }
    for name, render in renders.items():
        path = os.path.join(indir, name)
        if os.path.exists(path):
            written.append(render(reports.read_csv_rows(path), outdir))
    if not written:
        raise UserError(f"no renderable CSVs found in {indir}")
    _write_manifest(outdir, "report.manifest.json", argv, {}, 0, [], written)
    for p in written:
        print(p)
    return 0


def cmd_digest(args, argv):
    for path in args.paths:
        if not os.path.exists(path):
            raise UserError(f"no such file: {path}")
        print(f"{container.content_digest(path)}  {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="narob",
                                description="open-book neural algorithmic reasoning")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", help="generate a trace dataset")
    g.add_argument("--task", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--split", default="train", choices=["train", "test"])
    g.add_argument("--edge-prob", type=float, default=0.5)
    g.add_argument("--out", default=None)
    g.add_argument("--name", default=None)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--test", default=None)
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("attn", help="attention profile and records")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--records", type=int, default=1)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_attn)

    pr = sub.add_parser("pair", help="select partner tasks from a profile CSV")
    pr.add_argument("--profile", required=True)
    pr.add_argument("--task", default=None)
    pr.add_argument("--out", default=None)
    pr.set_defaults(fn=cmd_pair)

    x = sub.add_parser("experiment", help="run an experiment family")
    x.add_argument("--kind", required=True,
                   choices=["single_aug", "multi_aug", "paired", "ablate_aux",
                            "scale_train", "scale_test"])
    x.add_argument("--config", default=None)
    x.add_argument("--set", action="append", metavar="KEY=VALUE")
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--out", default=None)
    x.set_defaults(fn=cmd_experiment)

    r = sub.add_parser("report", help="render figures from experiment CSVs")
    r.add_argument("--indir", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_report)

    d = sub.add_parser("digest", help="print stable content hashes")
    d.add_argument("paths", nargs="+")
    d.set_defaults(fn=cmd_digest)
    return p


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.fn(args, ["narob"] + list(argv))
    except (UserError, ConfigError, DependencyError, container.FormatError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # internal failure
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
