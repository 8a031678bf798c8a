"""Report rendering: matplotlib figures written next to delimited output.

Every report artifact comes in pairs: a CSV with the numbers and a PNG with
the same numbers plotted, so runs can be inspected without a notebook.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_LOG_COLUMNS = ("step", "recon", "kl", "tc", "ce", "acc", "total")


def read_log(path) -> list[dict]:
    entries = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                entries.append(json.loads(line))
    return entries


def write_log(path, entries) -> None:
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def training_curves(entries, out_dir) -> list[Path]:
    """training_curves.png + training_log.csv from JSONL log entries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        [e.get("phase", "joint")] + [e.get(c, "") for c in _LOG_COLUMNS]
        for e in entries
    ]
    csv_path = out / "training_log.csv"
    _write_csv(csv_path, ("phase",) + _LOG_COLUMNS, rows)

    joint = [e for e in entries if e.get("phase", "joint") == "joint"]
    warm = [e for e in entries if e.get("phase") == "warm"]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    panels = (
        ("recon", "reconstruction log-likelihood"),
        ("kl", "KL to prior"),
        ("tc", "total correlation estimate"),
        ("acc", "batch accuracy"),
    )
    for ax, (key, title) in zip(axes.flat, panels):
        for label, series in (("warm", warm), ("joint", joint)):
            pts = [(e["step"], e[key]) for e in series if key in e]
            if pts:
                ax.plot(*zip(*pts), label=label, linewidth=1)
        ax.set_title(title)
        ax.set_xlabel("step")
        if ax.get_legend_handles_labels()[0]:
            ax.legend()
    fig.tight_layout()
    png_path = out / "training_curves.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def per_factor_accuracy(eval_result: dict, out_dir) -> list[Path]:
    """per_factor_accuracy.png/.csv from an evaluate_reasoning result."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = sorted(eval_result["per_factor"].items())
    csv_path = out / "per_factor_accuracy.csv"
    _write_csv(csv_path, ("factor", "accuracy"), items)

    fig, ax = plt.subplots(figsize=(6, 4))
    names = [k for k, _ in items]
    ax.bar(names, [v for _, v in items], color="#4878cf")
    ax.axhline(eval_result["accuracy"], color="k", linestyle="--", linewidth=1,
               label=f"overall {eval_result['accuracy']:.3f}")
    ax.axhline(1 / 6, color="r", linestyle=":", linewidth=1, label="chance")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("reasoning accuracy")
    ax.legend()
    fig.tight_layout()
    png_path = out / "per_factor_accuracy.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def metric_bars(report_dict: dict, out_dir) -> list[Path]:
    """disentanglement_metrics.png/.csv from a metric report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = ("factor_vae", "dci_d", "mig", "sap")
    rows = [(name, report_dict[name]) for name in order]
    csv_path = out / "disentanglement_metrics.csv"
    _write_csv(csv_path, ("metric", "score"), rows)

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar([r[0] for r in rows], [r[1] for r in rows], color="#6acc64")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    fig.tight_layout()
    png_path = out / "disentanglement_metrics.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]
