"""Render a finished run directory: CER table, plot-ready CSV, figures.

Everything here is read-only with respect to the run directory; all
outputs land in a separate report directory.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .io import read_csv, write_csv

REPORT_CURVE_COLUMNS = ("step", "task_id", "split", "cer", "loss")
REQUIRED_FILES = ("manifest.json", "config.json", "metrics.json", "curves.csv")


class IncompleteRunError(RuntimeError):
    """The run directory is missing pieces or never finished."""


def load_run(run_dir) -> dict:
    """Read and sanity-check a run directory produced by ``chaingem run``."""

    run = Path(run_dir)
    if not run.is_dir():
        raise IncompleteRunError(f"{run} is not a directory")
    for name in REQUIRED_FILES:
        if not (run / name).is_file():
            raise IncompleteRunError(f"{run} is missing {name}")

    with open(run / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("status") != "complete":
        raise IncompleteRunError(f"run status is {manifest.get('status')!r}, not complete")
    with open(run / "config.json", "r", encoding="utf-8") as fh:
        config = json.load(fh)
    with open(run / "metrics.json", "r", encoding="utf-8") as fh:
        metrics = json.load(fh)
    if 3 in config.get("stages", []) and not (run / "error_matrix.csv").is_file():
        raise IncompleteRunError(f"{run} ran stage 3 but has no error_matrix.csv")
    curves = read_csv(run / "curves.csv")
    return {"dir": run, "manifest": manifest, "config": config, "metrics": metrics, "curves": curves}


def select_curve_rows(run: dict) -> list[dict]:
    """Project run curves onto the five-column plotting schema.

    Stage-3 rows of the configured method when present, otherwise the
    stage-1 training curve, so the file always shows one coherent run.
    """

    config = run["config"]
    rows = [r for r in run["curves"] if r.get("stage") == "3" and r.get("method") == config["method"]]
    if not rows:
        rows = [r for r in run["curves"] if r.get("stage") == "1"]
    out = []
    for row in rows:
        if not row.get("cer"):
            continue
        out.append(
            {
                "step": int(row["step"]),
                "task_id": int(row["task_id"]),
                "split": row["split"],
                "cer": float(row["cer"]),
                "loss": float(row["loss"]) if row.get("loss") else "",
            }
        )
    return out


def format_cer_table(run: dict) -> str:
    """Method-by-task table of final test CERs, or a flat metric dump."""

    config = run["config"]
    metrics = run["metrics"]
    task_ids = list(range(1 + len(config["followup_snr_db"])))
    if f"final_cer_task_{task_ids[0]}" not in metrics:
        lines = ["metric" + " " * 26 + "value"]
        for key in sorted(metrics):
            lines.append(f"{key:<32}{metrics[key]}")
        return "\n".join(lines)

    header = f"{'method':<22}" + "".join(f"task_{tid:<7}" for tid in task_ids)
    lines = [header]
    row = f"{config['method']:<22}"
    for tid in task_ids:
        row += f"{metrics[f'final_cer_task_{tid}']:<12.4f}"
    lines.append(row)
    if f"reference_final_cer_task_{task_ids[0]}" in metrics and config["method"] != "finetune":
        row = f"{'finetune_reference':<22}"
        for tid in task_ids:
            row += f"{metrics[f'reference_final_cer_task_{tid}']:<12.4f}"
        lines.append(row)
    return "\n".join(lines)


def plot_learning_curves(rows: list[dict], method: str, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    task_ids = sorted({row["task_id"] for row in rows})
    for tid in task_ids:
        pts = [(row["step"], row["cer"]) for row in rows if row["task_id"] == tid]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=f"task {tid}")
    ax.set_xlabel("training step")
    ax.set_ylabel("dev CER")
    ax.set_title(f"{method}: dev CER during training")
    if task_ids:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_final_cers(run: dict, path) -> bool:
    """Bar chart of final test CER per task, method next to its reference."""

    config = run["config"]
    metrics = run["metrics"]
    task_ids = list(range(1 + len(config["followup_snr_db"])))
    if f"final_cer_task_{task_ids[0]}" not in metrics:
        return False
    method_vals = [metrics[f"final_cer_task_{tid}"] for tid in task_ids]
    ref_key = f"reference_final_cer_task_{task_ids[0]}"
    have_ref = ref_key in metrics and config["method"] != "finetune"

    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.38 if have_ref else 0.6
    xs = list(range(len(task_ids)))
    ax.bar([x - (width / 2 if have_ref else 0) for x in xs], method_vals, width, label=config["method"])
    if have_ref:
        ref_vals = [metrics[f"reference_final_cer_task_{tid}"] for tid in task_ids]
        ax.bar([x + width / 2 for x in xs], ref_vals, width, label="finetune reference")
    ax.set_xticks(xs)
    ax.set_xticklabels([f"task {tid}" for tid in task_ids])
    ax.set_ylabel("final test CER")
    ax.set_title("final CER per task")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def write_report(run_dir, out_dir=None) -> dict:
    """Build the report for a finished run; returns paths and the table text."""

    run = load_run(run_dir)
    out = Path(out_dir) if out_dir is not None else run["dir"].parent / (run["dir"].name + "-report")
    out.mkdir(parents=True, exist_ok=True)

    rows = select_curve_rows(run)
    write_csv(out / "curves.csv", REPORT_CURVE_COLUMNS, rows)

    figures = []
    plot_learning_curves(rows, run["config"]["method"], out / "learning_curves.png")
    figures.append("learning_curves.png")
    if plot_final_cers(run, out / "final_cer.png"):
        figures.append("final_cer.png")

    return {"out_dir": out, "table": format_cer_table(run), "figures": figures}
