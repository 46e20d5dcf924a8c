"""Region similarity J, boundary F-measure F and their mean J&F."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .data_io import DatasetError, load_mask


def _check(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def jaccard(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary_map(mask) -> np.ndarray:
    """Foreground pixels with a background (or out-of-image) 4-neighbour."""
    m = np.pad(np.asarray(mask).astype(bool), 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~interior


def default_tolerance(shape) -> int:
    return math.ceil(0.008 * math.hypot(*shape))


def disk(radius) -> np.ndarray:
    r = int(math.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= radius * radius


def f_from_counts(matched_pred, n_pred, matched_gt, n_gt) -> float:
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    precision = matched_pred / n_pred
    recall = matched_gt / n_gt
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_f(pred, gt, tolerance: Optional[float] = None) -> float:
    """Contour F-measure: boundary pixels count as matched when a boundary
    pixel of the other mask lies within Euclidean distance ``tolerance``."""
    pred, gt = _check(pred, gt)
    if tolerance is None:
        tolerance = default_tolerance(pred.shape)
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    bp, bg = boundary_map(pred), boundary_map(gt)
    footprint = disk(tolerance)
    near_gt = ndimage.binary_dilation(bg, structure=footprint)
    near_pred = ndimage.binary_dilation(bp, structure=footprint)
    return f_from_counts(
        np.count_nonzero(bp & near_gt), np.count_nonzero(bp),
        np.count_nonzero(bg & near_pred), np.count_nonzero(bg),
    )


@dataclass
class MetricReport:
    per_object: Dict[Tuple[str, int], Tuple[float, float]] = field(default_factory=dict)
    J: float = 0.0
    F: float = 0.0
    J_and_F: float = 0.0

    def rounded(self, ndigits: int = 4):
        return display_round(self.J, ndigits), display_round(self.F, ndigits), display_round(self.J_and_F, ndigits)


def display_round(x: float, ndigits: int = 4) -> float:
    # round() is half-even on the exact binary value of x
    return round(float(x), ndigits)


def j_and_f(j: float, f: float) -> float:
    return (j + f) / 2


def aggregate(per_object: Dict[Tuple[str, int], Tuple[float, float]]) -> MetricReport:
    """Unweighted mean over (video, object) pairs, reduced in sorted key order."""
    keys = sorted(per_object)
    if not keys:
        raise DatasetError("no objects to evaluate")
    j = float(np.mean([per_object[k][0] for k in keys]))
    f = float(np.mean([per_object[k][1] for k in keys]))
    return MetricReport({k: per_object[k] for k in keys}, j, f, j_and_f(j, f))


def _annotation_root(path: Path) -> Path:
    return path / "Annotations" if (path / "Annotations").is_dir() else path


def evaluate_video(pred_dir: Path, gt_dir: Path, video: str):
    """Per-object (mean J, mean F) for one video plus the list of missing frames.

    Each object is scored on every annotated frame after the first one it
    appears in.
    """
    gt_frames = sorted(p.stem for p in (gt_dir / video).glob("*.png"))
    gts = {name: load_mask(gt_dir / video / f"{name}.png") for name in gt_frames}
    first_seen: Dict[int, int] = {}
    for pos, name in enumerate(gt_frames):
        for oid in np.unique(gts[name]):
            if oid != 0:
                first_seen.setdefault(int(oid), pos)

    scores: Dict[int, List[Tuple[float, float]]] = {oid: [] for oid in first_seen}
    missing = []
    for pos, name in enumerate(gt_frames):
        scored = [oid for oid, p0 in first_seen.items() if pos > p0]
        if not scored:
            continue
        pred_path = pred_dir / video / f"{name}.png"
        if not pred_path.exists():
            missing.append(f"{video}/{name}")
            continue
        pred = load_mask(pred_path)
        gt = gts[name]
        if pred.shape != gt.shape:
            raise DatasetError(f"{pred_path}: size {pred.shape} != ground truth {gt.shape}")
        for oid in scored:
            p, g = pred == oid, gt == oid
            scores[oid].append((jaccard(p, g), boundary_f(p, g)))
    per_object = {
        (video, oid): (float(np.mean([s[0] for s in v])), float(np.mean([s[1] for s in v])))
        for oid, v in scores.items() if v
    }
    return per_object, missing


def evaluate(pred_dir, gt_dir, jobs: int = 1) -> MetricReport:
    pred_dir, gt_dir = Path(pred_dir), _annotation_root(Path(gt_dir))
    videos = sorted(p.name for p in gt_dir.iterdir() if p.is_dir())
    if not videos:
        raise DatasetError(f"no ground-truth videos under {gt_dir}")
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(lambda v: evaluate_video(pred_dir, gt_dir, v), videos))
    else:
        results = [evaluate_video(pred_dir, gt_dir, v) for v in videos]
    missing = [m for _, miss in results for m in miss]
    if missing:
        raise DatasetError(f"missing predicted frames: {', '.join(missing)}")
    per_object = {}
    for scores, _ in results:
        per_object.update(scores)
    return aggregate(per_object)


def write_csv(report: MetricReport, path) -> None:
    """Rows: video, object, mean_J, mean_F, J_and_F; final row holds the global scores."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video", "object", "mean_J", "mean_F", "J_and_F"])
        for (video, oid), (j, f) in report.per_object.items():
            w.writerow([video, oid, f"{j:.6f}", f"{f:.6f}", f"{j_and_f(j, f):.6f}"])
        w.writerow(["GLOBAL", "", f"{report.J:.6f}", f"{report.F:.6f}", f"{report.J_and_F:.6f}"])


def format_table(rows: List[Tuple[str, float, float]]) -> str:
    """Render (name, J, F) rows with a J&F column, 4-decimal display rounding."""
    width = max(len("Method"), *(len(r[0]) for r in rows))
    lines = [f"{'Method':<{width}}  {'J':>6}  {'F':>6}  {'J&F':>6}"]
    for name, j, f in rows:
        lines.append(
            f"{name:<{width}}  {display_round(j):.4f}  {display_round(f):.4f}  {display_round(j_and_f(j, f)):.4f}"
        )
    return "\n".join(lines)
