"""CSV tables and the figures rendered next to them.

CSV is the source of truth; figures are matplotlib SVGs written with
deterministic settings (fixed hash salt, no date metadata, text kept as text
elements) so report hashes are reproducible and heatmap cell labels can be
cross-checked against the CSV.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.fonttype"] = "none"
matplotlib.rcParams["svg.hashsalt"] = "narob"

import matplotlib.pyplot as plt
import numpy as np

CSV_SCHEMA_VERSION = 1


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(list(row))
    return path


def read_csv_rows(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)  # header
        return [tuple(row) for row in r]


def _save(fig, path):
    fig.savefig(path, metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def comparison_figure(summary_rows, path):
    """Per-task before/after bars from (task, variant, n, mean, std) rows,
    tasks sorted by descending improvement magnitude."""
    by_task = {}
    for task_id, variant, _n, mean, std in summary_rows:
        by_task.setdefault(task_id, {})[variant] = (float(mean), float(std))
    tasks = [t for t in by_task if "baseline" in by_task[t] and "openbook" in by_task[t]]
    tasks.sort(key=lambda t: by_task[t]["openbook"][0] - by_task[t]["baseline"][0],
               reverse=True)
    if not tasks:
        fig = plt.figure(figsize=(4, 2))
        return _save(fig, path)
    x = np.arange(len(tasks))
    base = [by_task[t]["baseline"][0] for t in tasks]
    ob = [by_task[t]["openbook"][0] for t in tasks]
    berr = [by_task[t]["baseline"][1] for t in tasks]
    oerr = [by_task[t]["openbook"][1] for t in tasks]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(tasks), 3.5))
    ax.bar(x - 0.2, base, width=0.4, yerr=berr, capsize=3, color="#9aa5b1",
           ecolor="black", label="baseline")
    ax.bar(x + 0.2, ob, width=0.4, yerr=oerr, capsize=3, color="#3f72af",
           ecolor="black", label="open-book")
    ax.set_xticks(x)
    ax.set_xticklabels(tasks, rotation=30, ha="right")
    ax.set_ylabel("aggregate F1")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    return _save(fig, path)


def heatmap_figure(profile_rows, path):
    """Attention heatmap from (target, source, weight) rows; each cell carries
    its numeric value as a text label matching the CSV."""
    targets = sorted({r[0] for r in profile_rows})
    sources = sorted({r[1] for r in profile_rows})
    mat = np.zeros((len(targets), len(sources)))
    for tgt, src, w in profile_rows:
        mat[targets.index(tgt), sources.index(src)] = float(w)
    fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(sources), 1.0 + 0.9 * len(targets)))
    ax.imshow(mat, cmap="viridis", vmin=0.0)
    ax.set_xticks(range(len(sources)))
    ax.set_xticklabels(sources, rotation=45, ha="right")
    ax.set_yticks(range(len(targets)))
    ax.set_yticklabels(targets)
    ax.set_xlabel("source task")
    ax.set_ylabel("target task")
    for i in range(len(targets)):
        for j in range(len(sources)):
            ax.text(j, i, f"{mat[i, j]:.3f}", ha="center", va="center",
                    fontsize=7, color="white" if mat[i, j] < mat.max() / 2 else "black")
    return _save(fig, path)


def sweep_figure(rows, x_col, path, xlabel=""):
    """Mean-F1-vs-parameter line plot from rows whose mean sits at index 3."""
    by_x = {}
    for row in rows:
        by_x.setdefault(float(row[x_col]), []).append(float(row[3]))
    xs = sorted(by_x)
    means = [float(np.mean(by_x[x])) for x in xs]
    stds = [float(np.std(by_x[x])) for x in xs]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3, color="#3f72af")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("aggregate F1")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def trainlog_figure(steps, losses, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, color="#3f72af", lw=1)
    ax.set_xlabel("training step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    return _save(fig, path)
