"""Dice / IoU and dataset-level mean +- std reports."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def _counts(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    inter = int(np.count_nonzero(p & g))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(g))


def dice(pred, gt) -> float:
    inter, np_, ng = _counts(pred, gt)
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def iou(pred, gt) -> float:
    inter, np_, ng = _counts(pred, gt)
    union = np_ + ng - inter
    if union == 0:
        return 1.0
    return inter / union


def evaluate(pairs, names=None) -> dict:
    """Per-pair Dice/IoU aggregated with population std."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot evaluate an empty list of pairs")
    d = np.array([dice(p, g) for p, g in pairs])
    j = np.array([iou(p, g) for p, g in pairs])
    names = list(names) if names is not None else [str(i) for i in range(len(pairs))]
    return {
        "n": len(pairs),
        "dice_mean": float(d.mean()),
        "dice_std": float(d.std()),
        "iou_mean": float(j.mean()),
        "iou_std": float(j.std()),
        "per_sample": [{"name": n, "dice": float(a), "iou": float(b)} for n, a, b in zip(names, d, j)],
    }


def format_report(report: dict) -> str:
    return f"Dice {report['dice_mean']:.3f}±{report['dice_std']:.2f}  IoU {report['iou_mean']:.3f}±{report['iou_std']:.2f}  (n={report['n']})"


def write_report(report: dict, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["name", "dice", "iou"])
            for row in report["per_sample"]:
                writer.writerow([row["name"], repr(row["dice"]), repr(row["iou"])])
