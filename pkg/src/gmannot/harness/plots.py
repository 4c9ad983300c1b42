"""Metrics rendering: per-metric CSV files plus matplotlib line charts
saved as SVG next to them."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

PLOT_KEYS = ("l_gm", "l_l", "l_g", "annotator_miou")


class PlotError(ValueError):
    pass


def read_metrics_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise PlotError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
    if not records:
        raise PlotError(f"{path}: no records")
    return records


def _series(records: list[dict], key: str) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for rec in records:
        value = rec.get(key)
        if value is None:
            continue
        xs.append(int(rec["step"]))
        ys.append(float(value))
    return xs, ys


def plot_metrics(metrics_path: str | Path, out_dir: str | Path,
                 keys: Sequence[str] = PLOT_KEYS) -> list[Path]:
    """Emit <key>.csv and <key>.svg per metric present in the JSONL."""
    records = read_metrics_jsonl(metrics_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for key in keys:
        xs, ys = _series(records, key)
        if not xs:
            continue
        csv_path = out / f"{key}.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", key])
            writer.writerows(zip(xs, ys))
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(xs, ys, lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(key)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        svg_path = out / f"{key}.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        written += [csv_path, svg_path]
    if not written:
        raise PlotError(f"{metrics_path}: none of {list(keys)} present")
    return written


def plot_curves(metric_paths: Sequence[str | Path], labels: Sequence[str],
                key: str, out_path: str | Path) -> Path:
    """Overlay one metric from several runs on a shared axis (sweep plots)."""
    if len(metric_paths) != len(labels):
        raise PlotError("need one label per metrics file")
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    plotted = 0
    for path, label in zip(metric_paths, labels):
        xs, ys = _series(read_metrics_jsonl(path), key)
        if not xs:
            continue
        ax.plot(xs, ys, lw=1.2, label=label)
        plotted += 1
    if plotted == 0:
        raise PlotError(f"no curves for key {key!r}")
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return out
