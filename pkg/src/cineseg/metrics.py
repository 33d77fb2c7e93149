"""Segmentation metrics and slice-position-stratified reporting.

Hausdorff distance is boundary-based: the boundary of a mask is the set of
foreground pixels with at least one background 4-neighbor, where the image
border counts as background. Clip-level HD is the mean of per-phase HDs;
phases where either mask is empty are excluded, and a clip with no defined
phase reports HD as missing.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def binarize(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold probabilities to {0, 1}; values equal to the threshold map to 1."""
    return (np.asarray(probabilities) >= threshold).astype(np.uint8)


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks score 1.0 by convention."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred != 0
    g = gt != 0
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Return (N, 2) integer coordinates of the 4-neighbor boundary of a 2D mask."""
    m = np.asarray(mask) != 0
    if m.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {m.shape}")
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def _directed_sq(a: np.ndarray, b: np.ndarray) -> int:
    # max over a of min squared distance to b; exact in int64
    diff_r = a[:, 0:1] - b[None, :, 0].astype(np.int64)
    diff_c = a[:, 1:2] - b[None, :, 1].astype(np.int64)
    sq = diff_r * diff_r + diff_c * diff_c
    return int(sq.min(axis=1).max())


def hausdorff_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric boundary Hausdorff distance between two non-empty 2D masks, in pixels."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    a = boundary_points(pred).astype(np.int64)
    b = boundary_points(gt).astype(np.int64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("hausdorff_distance requires two non-empty masks")
    return math.sqrt(max(_directed_sq(a, b), _directed_sq(b, a)))


def clip_hausdorff(pred: np.ndarray, gt: np.ndarray) -> tuple[float | None, int]:
    """Mean per-phase HD over an (H, W, T) pair, plus the count of excluded phases."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    values = []
    excluded = 0
    for t in range(pred.shape[2]):
        p = pred[:, :, t]
        g = gt[:, :, t]
        if p.sum() == 0 or g.sum() == 0:
            excluded += 1
            continue
        values.append(hausdorff_distance(p, g))
    if not values:
        return None, excluded
    return float(np.mean(values)), excluded


@dataclass
class ClipMetrics:
    scan_id: str
    view: str
    slice_position: str
    num_phases: int
    dice: float
    hd: float | None
    hd_excluded_phases: int = 0


@dataclass
class GroupStats:
    count: int
    dice_mean: float
    hd_mean: float | None
    hd_count: int
    hd_excluded_phases: int


@dataclass
class MetricsReport:
    rows: list[ClipMetrics]
    groups: dict[str, GroupStats]


def evaluate_clip(pred: np.ndarray, gt: np.ndarray, meta) -> ClipMetrics:
    """Per-clip Dice and mean per-phase HD for binary (H, W, T) volumes."""
    hd, excluded = clip_hausdorff(pred, gt)
    return ClipMetrics(
        scan_id=meta.scan_id,
        view=meta.view,
        slice_position=meta.slice_position,
        num_phases=pred.shape[2],
        dice=dice_score(pred, gt),
        hd=hd,
        hd_excluded_phases=excluded,
    )


def _group_stats(rows: list[ClipMetrics]) -> GroupStats:
    dices = [r.dice for r in rows]
    hds = [r.hd for r in rows if r.hd is not None]
    return GroupStats(
        count=len(rows),
        dice_mean=float(np.mean(dices)),
        hd_mean=float(np.mean(hds)) if hds else None,
        hd_count=len(hds),
        hd_excluded_phases=sum(r.hd_excluded_phases for r in rows),
    )


def stratified_report(rows: list[ClipMetrics]) -> MetricsReport:
    """Group means over {all, basal, mid, apical} and per view.

    Rows are sorted by (scan_id, view, slice_position) for deterministic output;
    empty input yields an empty report rather than fabricated aggregates.
    """
    ordered = sorted(rows, key=lambda r: (r.scan_id, r.view, r.slice_position))
    groups: dict[str, GroupStats] = {}
    if not ordered:
        return MetricsReport(rows=[], groups=groups)
    groups["all"] = _group_stats(ordered)
    for slice_position in ("basal", "mid", "apical"):
        members = [r for r in ordered if r.slice_position == slice_position]
        if members:
            groups[slice_position] = _group_stats(members)
    for view in ("SAX", "LAX"):
        members = [r for r in ordered if r.view == view]
        if members:
            groups[f"view:{view}"] = _group_stats(members)
    return MetricsReport(rows=ordered, groups=groups)


def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["scan_id", "view", "slice_position", "num_phases", "dice", "hd", "hd_excluded_phases"]
    )
    for r in report.rows:
        writer.writerow(
            [
                r.scan_id,
                r.view,
                r.slice_position,
                r.num_phases,
                f"{r.dice:.6f}",
                "" if r.hd is None else f"{r.hd:.6f}",
                r.hd_excluded_phases,
            ]
        )
    return buf.getvalue()


def report_json(report: MetricsReport) -> str:
    payload = {
        "groups": {
            name: {
                "count": g.count,
                "dice_mean": g.dice_mean,
                "hd_mean": g.hd_mean,
                "hd_count": g.hd_count,
                "hd_excluded_phases": g.hd_excluded_phases,
            }
            for name, g in report.groups.items()
        }
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_report(report: MetricsReport, prefix: str | Path) -> tuple[Path, Path]:
    """Write `<prefix>.csv` (per-clip rows) and `<prefix>.json` (group summary)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_name(prefix.name + ".csv")
    json_path = prefix.with_name(prefix.name + ".json")
    csv_path.write_text(report_csv(report), encoding="utf-8")
    json_path.write_text(report_json(report), encoding="utf-8")
    return csv_path, json_path
