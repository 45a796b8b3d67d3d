"""
Metric reports: JSON documents plus aligned text tables, and optional
matplotlib charts (diagnosis grid bars, training loss curves).
"""

import json
import os
from typing import Dict, List, Optional, Sequence

from src.dataset import DatasetConfig, VideoAnnotation
from src.evaluation import (
    FLAG_NAMES,
    DiagnosisGrid,
    MatchConfig,
    acc_p,
    detection_map,
    per_class_accuracy,
    video_accuracy,
)

GRID_HEADERS = ("Actor Detection", "part_det", "state_parsing", "Action parsing", "Acc^p")
CHECK = "✓"


def metrics_report(predictions: Sequence[VideoAnnotation], ground_truth: Sequence[VideoAnnotation],
                   config: DatasetConfig, cfg: MatchConfig = MatchConfig()) -> Dict:
    per_class = per_class_accuracy(predictions, ground_truth)
    return {
        "videos": len(ground_truth),
        "iou_threshold": cfg.iou_threshold,
        "psc_threshold": cfg.psc_threshold,
        "mAP": detection_map(predictions, ground_truth, cfg),
        "Acc": video_accuracy(predictions, ground_truth),
        "Acc^p": acc_p(predictions, ground_truth, cfg),
        "per_class_accuracy": {config.action_names[c]: value for c, value in per_class.items()},
    }


def _aligned(rows: List[Sequence[str]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for n, row in enumerate(rows):
        lines.append(" | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if n == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def format_metrics_table(report: Dict) -> str:
    rows = [("Metric", "Value")]
    for name in ("mAP", "Acc", "Acc^p"):
        rows.append((name, f"{report[name] * 100:.2f}%"))
    for action, value in report["per_class_accuracy"].items():
        rows.append((f"Acc[{action}]", f"{value * 100:.2f}%"))
    return _aligned(rows)


def grid_report(grid: DiagnosisGrid) -> Dict:
    return {"rows": [dict({name: getattr(flags, name) for name in FLAG_NAMES}, label=flags.label(), acc_p=value)
                     for flags, value in grid.rows]}


def format_grid_table(grid: DiagnosisGrid) -> str:
    rows = [GRID_HEADERS]
    for flags, value in grid.rows:
        marks = tuple(CHECK if getattr(flags, name) else "" for name in FLAG_NAMES)
        rows.append(marks + (f"{value * 100:.2f}%",))
    return _aligned(rows)


def write_report(path: str, document: Dict, table: str):
    """Writes `path` (JSON) and the text table next to it with a .txt suffix."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    table_path = os.path.splitext(path)[0] + ".txt"
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(table + "\n")
    print(f"[Evaluate] Report saved to: {path} (table: {table_path})")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_grid(grid: DiagnosisGrid, path: str) -> Optional[str]:
    try:
        plt = _pyplot()
        labels = [flags.label().replace("+", "\n+") for flags, _ in grid.rows]
        values = [value * 100 for _, value in grid.rows]
        fig, ax = plt.subplots(figsize=(12, 4.5))
        ax.bar(range(len(values)), values, color="#4c72b0")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel("Acc^p (%)")
        ax.set_ylim(0, 100)
        ax.set_title("Ground-truth substitution")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        print(f"[Diagnose] Plot saved to: {path}")
        return path
    except Exception as e:
        print(f"[Diagnose] Warning: could not write plot {path}: {e}")
        return None


def plot_history(history: List[Dict[str, float]], path: str, title: str = "training loss") -> Optional[str]:
    try:
        plt = _pyplot()
        names = sorted({k for entry in history for k in entry if k != "lr"})
        fig, ax = plt.subplots(figsize=(7, 4))
        for name in names:
            points = [(i + 1, entry[name]) for i, entry in enumerate(history) if name in entry]
            ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        if names:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        print(f"[Train] Loss curve saved to: {path}")
        return path
    except Exception as e:
        print(f"[Train] Warning: could not write plot {path}: {e}")
        return None
