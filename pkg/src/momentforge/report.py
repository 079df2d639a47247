"""Run reports: matplotlib figures rendered next to delimited summaries.

Reads only files earlier stages wrote into the run directory and emits
PNG figures plus CSV tables under <run>/report. Rendering is
deterministic (agg backend, fixed style, no timestamps), so report
artifacts participate in the manifest digests like everything else.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .curation import read_pool
from .vmr_eval import read_annotations

__all__ = ["render_run_report", "plot_metrics"]

FIG_DPI = 110
_SAVE_KW = {"dpi": FIG_DPI, "bbox_inches": "tight", "metadata": {"Software": "momentforge"}}


def render_run_report(run_dir: str | Path, config_hash: str = "") -> list[Path]:
    """Render every figure whose inputs exist; returns the files written."""
    run_dir = Path(run_dir)
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    scores_csv = run_dir / "frames" / "scores.csv"
    if scores_csv.exists():
        written.append(_plot_frame_scores(scores_csv, out / "frame_scores.png"))

    losses_csv = run_dir / "train" / "losses.csv"
    if losses_csv.exists():
        written.append(_plot_training_losses(losses_csv, out / "training_loss.png"))

    pool_path = run_dir / "score" / "pool.jsonl"
    selected_path = run_dir / "curate" / "selected.jsonl"
    filtered_path = run_dir / "curate" / "filtered.jsonl"
    if pool_path.exists():
        written.extend(
            _plot_fidelity(
                pool_path,
                filtered_path if filtered_path.exists() else None,
                selected_path if selected_path.exists() else None,
                run_dir / "curate" / "vmr_scores.csv",
                out,
            )
        )

    metrics_path = run_dir / "eval" / "metrics.json"
    if metrics_path.exists():
        tables = json.loads(metrics_path.read_text(encoding="utf-8"))
        if "warning" not in tables:
            written.append(plot_metrics(tables, out / "metrics.png"))
            written.append(_write_metrics_csv(tables, out / "metrics.csv"))

    split_path = run_dir / "data" / "split" / "test.jsonl"
    if split_path.exists():
        written.append(_write_split_csv(run_dir, out / "split_summary.csv"))
    return [p for p in written if p is not None]


def _plot_frame_scores(scores_csv: Path, target: Path) -> Path:
    rows = defaultdict(list)
    with open(scores_csv, newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            rows[record["moment_id"]].append((int(record["frame_index"]), float(record["phi"])))
    moments = sorted(rows)[:6]
    fig, axes = plt.subplots(1, max(len(moments), 1), figsize=(2.4 * max(len(moments), 1), 2.6), sharey=True)
    if len(moments) <= 1:
        axes = [axes]
    for ax, mid in zip(axes, moments):
        pairs = sorted(rows[mid])
        ax.bar([i for i, _ in pairs], [v for _, v in pairs], color="#4878d0")
        ax.set_title(mid, fontsize=8)
        ax.set_xlabel("frame")
    axes[0].set_ylabel("selection score")
    fig.suptitle("Per-frame diversity + clarity scores", fontsize=10)
    fig.savefig(target, **_SAVE_KW)
    plt.close(fig)
    return target


def _plot_training_losses(losses_csv: Path, target: Path) -> Path:
    curves: dict[tuple[str, str], list[float]] = defaultdict(list)
    with open(losses_csv, newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            curves[(record["stage"], record["id"])].append(float(record["loss"]))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    for (stage, item), values in sorted(curves.items()):
        ax = ax1 if stage == "stage1" else ax2
        ax.plot(values, label=item, linewidth=1)
    for ax, title in ((ax1, "Stage 1: instance descriptor"), (ax2, "Stage 2: temporal encoding")):
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if ax.lines:
            ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(target, **_SAVE_KW)
    plt.close(fig)
    return target


def _plot_fidelity(pool_path: Path, filtered_path, selected_path, scores_csv: Path, out: Path) -> list[Path]:
    pool = read_pool(pool_path)
    filtered_ids = {m.id for m in read_pool(filtered_path).items} if filtered_path else set()
    selected_ids = {m.id for m in read_pool(selected_path).items} if selected_path else set()

    fig, ax = plt.subplots(figsize=(4.5, 3.6))
    groups = {
        "rejected": ([], [], "#bbbbbb"),
        "filtered": ([], [], "#4878d0"),
        "selected": ([], [], "#d65f5f"),
    }
    for m in pool.items:
        key = "selected" if m.id in selected_ids else "filtered" if m.id in filtered_ids else "rejected"
        groups[key][0].append(m.prompt_fid)
        groups[key][1].append(m.struct_fid)
    for label, (xs, ys, color) in groups.items():
        if xs:
            ax.scatter(xs, ys, s=18, c=color, label=label, edgecolors="none")
    ax.set_xlabel("prompt fidelity")
    ax.set_ylabel("structure fidelity")
    ax.set_title("Candidate fidelity and hybrid selection", fontsize=10)
    ax.legend(fontsize=7)
    fig_path = out / "fidelity.png"
    fig.savefig(fig_path, **_SAVE_KW)
    plt.close(fig)

    vmr_scores = {}
    if scores_csv.exists():
        from .curation import read_scores_csv

        vmr_scores = read_scores_csv(scores_csv)
    table_path = out / "pool_summary.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "edit_prompt", "prompt_fid", "struct_fid", "h_score", "vmr_score", "status"])
        for m in sorted(pool.items, key=lambda m: m.id):
            status = "selected" if m.id in selected_ids else "filtered" if m.id in filtered_ids else "rejected"
            writer.writerow(
                [
                    m.id, m.edit_prompt,
                    f"{m.prompt_fid:.6f}", f"{m.struct_fid:.6f}", f"{m.h_score:.6f}",
                    f"{vmr_scores[m.id]:.6f}" if m.id in vmr_scores else "",
                    status,
                ]
            )
    return [fig_path, table_path]


def plot_metrics(tables: dict[str, dict], target: str | Path) -> Path:
    """Grouped bars comparing metric tables (e.g. baseline vs augmented)."""
    target = Path(target)
    tags = sorted(tables)
    metric_names = [k for k in tables[tags[0]] if k != "queries"]
    width = 0.8 / max(len(tags), 1)
    fig, ax = plt.subplots(figsize=(1.2 * len(metric_names) + 2, 3.2))
    for j, tag in enumerate(tags):
        xs = [i + j * width for i in range(len(metric_names))]
        ax.bar(xs, [tables[tag][m] for m in metric_names], width=width, label=tag)
    ax.set_xticks([i + width * (len(tags) - 1) / 2 for i in range(len(metric_names))])
    ax.set_xticklabels(metric_names, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("value")
    ax.set_title("Moment-retrieval metrics", fontsize=10)
    ax.legend(fontsize=7)
    fig.savefig(target, **_SAVE_KW)
    plt.close(fig)
    return target


def _write_metrics_csv(tables: dict[str, dict], target: Path) -> Path:
    tags = sorted(tables)
    metric_names = [k for k in tables[tags[0]]]
    with open(target, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", *tags])
        for name in metric_names:
            writer.writerow([name, *(f"{tables[tag][name]:.6f}" for tag in tags)])
    return target


def _write_split_csv(run_dir: Path, target: Path) -> Path:
    rows = []
    for split in ("generation", "test"):
        path = run_dir / "data" / "split" / f"{split}.jsonl"
        if path.exists():
            for ann in read_annotations(path):
                rows.append((split, ann.video_id, ann.query))
    with open(target, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "video_id", "query"])
        writer.writerows(rows)
    return target
