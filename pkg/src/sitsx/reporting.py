"""Result tables and plots aggregated over completed runs.

Standard deviations are taken over seeds with the n - 1 denominator and are
left empty for single-seed runs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .harness import RunRecord, mean_std

METRICS = ("ap", "f1", "precision", "recall")


def format_mean_std(agg: dict | None, digits: int = 4) -> str:
    if not agg or agg.get("mean") is None:
        return "/"
    text = f"{agg['mean']:.{digits}f}"
    if agg.get("std") is not None:
        text += f" ± {agg['std']:.{digits}f}"
    return text


def run_label(config: dict) -> str:
    method = config["method"]
    if method.startswith("sits-"):
        return method
    return f"{config.get('steps_used', 5)}-step {method}"


def load_record(run_dir) -> RunRecord:
    return RunRecord.from_dict(json.loads((Path(run_dir) / "run.json").read_text()))


def comparison_rows(records: list[RunRecord]) -> list[dict]:
    """One row per run: mean ± std of every metric over its seeds."""
    rows = []
    for rec in records:
        row = {"method": run_label(rec.config), "status": rec.status,
               "seeds": sum(r.status == "ok" for r in rec.runs)}
        for m in METRICS:
            agg = rec.aggregate.get(m)
            row[m] = format_mean_std(agg)
            row[f"{m}_mean"] = None if not agg else agg["mean"]
            row[f"{m}_std"] = None if not agg else agg["std"]
        rows.append(row)
    return rows


def per_type_rows(record: RunRecord) -> list[dict]:
    """Per disaster type: metrics aggregated over the seeds of one run."""
    by_type: dict[str, dict[str, list]] = {}
    for run in record.runs:
        if run.report is None:
            continue
        for t, metrics in run.report.get("per_type", {}).items():
            slot = by_type.setdefault(t, {m: [] for m in METRICS})
            for m in METRICS:
                slot[m].append(metrics[m])
    rows = []
    for t in sorted(by_type):
        row = {"disaster_type": t}
        for m in METRICS:
            row[m] = format_mean_std(mean_std(by_type[t][m]))
        rows.append(row)
    return rows


def ablation_rows(rows: list[dict]) -> list[dict]:
    out = []
    for r in rows:
        row = {"row": r["row"], "status": r["status"], **r["weights"]}
        for m in ("ap", "f1"):
            row[m] = format_mean_std(r["aggregate"].get(m)) if r["status"] == "ok" else "/"
        out.append(row)
    return out


def write_table(rows: list[dict], stem) -> tuple[Path, Path]:
    """Write ``rows`` to ``<stem>.csv`` and ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    fields = list(rows[0]) if rows else []
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    json_path.write_text(json.dumps(rows, indent=1))
    return csv_path, json_path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curves(records: list[RunRecord], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for rec in records:
        for run in rec.runs:
            if run.history:
                epochs = [h["epoch"] for h in run.history]
                ax.plot(epochs, [h["train_loss"] for h in run.history],
                        label=f"{run_label(rec.config)} seed {run.seed}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    if ax.lines:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def _read_scores(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return np.array([float(r["score"]) for r in rows]), np.array([int(r["label"]) for r in rows])


def plot_pr_curves(records: list[RunRecord], path) -> Path:
    """Precision-recall curves from each seed's ``scores.csv`` next to its checkpoint."""
    from .detection import precision_recall_curve

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    for rec in records:
        for run in rec.runs:
            if not run.checkpoint:
                continue
            scores_path = Path(run.checkpoint).parent / "scores.csv"
            if not scores_path.is_file():
                continue
            scores, labels = _read_scores(scores_path)
            if labels.sum() == 0:
                continue
            precision, recall, _ = precision_recall_curve(scores, labels)
            ax.step(np.r_[0.0, recall], np.r_[precision[0], precision], where="pre",
                    label=f"{run_label(rec.config)} seed {run.seed}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if ax.lines:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def report(run_dirs, out) -> dict:
    """Aggregate finished run directories into ``tables/`` and ``plots/`` under ``out``."""
    out = Path(out)
    records = [load_record(d) for d in run_dirs]
    written = {}
    written["comparison"] = write_table(comparison_rows(records), out / "tables" / "comparison")
    for d, rec in zip(run_dirs, records):
        rows = per_type_rows(rec)
        if rows:
            name = f"per_type_{Path(d).name}"
            written[name] = write_table(rows, out / "tables" / name)
        ablation = Path(d) / "ablation.json"
        if ablation.is_file():
            name = f"ablation_{Path(d).name}"
            written[name] = write_table(ablation_rows(json.loads(ablation.read_text())), out / "tables" / name)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    written["loss_curves"] = plot_loss_curves(records, out / "plots" / "loss_curves.png")
    written["pr_curves"] = plot_pr_curves(records, out / "plots" / "pr_curves.png")
    return written
