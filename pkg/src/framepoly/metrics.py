"""IoU, per-threshold precision/recall, and the max tangent angle error."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .polygonize import BuildingSet
from .raster import RasterGrid, Scene, rasterize_interior, scene_segments


def iou(a: RasterGrid, b: RasterGrid) -> float:
    """|a & b| / |a | b| on binary grids; two empty masks count as identical."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    for g in (a, b):
        if not np.isin(g.data, (0.0, 1.0)).all():
            raise ValueError("iou expects binary grids")
    aa = a.data > 0
    bb = b.data > 0
    union = float(np.sum(aa | bb))
    if union == 0.0:
        return 1.0
    return float(np.sum(aa & bb)) / union


@dataclass
class AngleErrorReport:
    per_contour_deg: list = field(default_factory=list)
    mean_deg: float | None = None
    matched_count: int = 0


def _polygon_mask(poly, extent) -> np.ndarray:
    scene = Scene(extent=extent, buildings=[poly])
    return rasterize_interior(scene).data[:, :, 0] > 0


def _resample_ring(ring: np.ndarray, step: float):
    """Points spaced ~step apart along a closed ring (uniform arclength)."""
    pts = np.asarray(ring, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    perim = float(seglen.sum())
    if perim <= 0.0:
        return None
    n = max(int(round(perim / step)), 8)
    s = np.arange(n) * (perim / n)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seglen) - 1)
    safe = np.where(seglen[k] > 0, seglen[k], 1.0)
    t = (s - cum[k]) / safe
    return pts[k] + t[:, None] * seg[k]


def _closest_points(p: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """For each query point, the nearest point on any segment.

    Ties resolve to the earliest segment (ring and segment order), which is
    what np.argmin yields on the distance matrix.
    """
    a = segs[:, 0]
    d = segs[:, 1] - segs[:, 0]
    den = np.maximum(np.sum(d * d, axis=1), 1e-30)
    out = np.empty_like(p)
    chunk = 4096
    for lo in range(0, len(p), chunk):
        q = p[lo:lo + chunk]
        t = np.clip(((q[:, None, :] - a) * d).sum(-1) / den, 0.0, 1.0)
        proj = a + t[:, :, None] * d
        dist2 = np.sum((q[:, None, :] - proj) ** 2, axis=-1)
        best = np.argmin(dist2, axis=1)
        out[lo:lo + chunk] = proj[np.arange(len(q)), best]
    return out


def _tangents(points: np.ndarray):
    nxt = np.roll(points, -1, axis=0)
    d = nxt - points
    ln = np.hypot(d[:, 0], d[:, 1])
    return d, ln


def max_tangent_angle_error(pred: BuildingSet, gt: Scene,
                            sample_step: float = 0.1) -> AngleErrorReport:
    """Per matched contour: the maximum folded angle between predicted
    tangents and the tangents of their projections onto the ground truth.

    Contours must overlap the ground truth mask by at least 50%.  Samples
    whose projected step is stretched or squashed beyond a factor of 2 are
    discarded, as are degenerate zero-length steps.
    """
    gt_mask = rasterize_interior(gt).data[:, :, 0] > 0
    segs = scene_segments(gt)
    report = AngleErrorReport()
    if len(segs) == 0:
        return report

    for poly in pred.polygons:
        mask = _polygon_mask(poly, gt.extent)
        area = float(mask.sum())
        overlap = float((mask & gt_mask).sum()) / area if area > 0 else 0.0
        if overlap < 0.5:
            continue
        for ring in poly.rings():
            p = _resample_ring(ring, sample_step)
            if p is None:
                continue
            q = _closest_points(p, segs)
            dp, lp = _tangents(p)
            dq, lq = _tangents(q)
            ok = lp > 0.0
            ratio = np.where(ok, lq / np.where(ok, lp, 1.0), 0.0)
            valid = ok & (ratio > 0.5) & (ratio < 2.0)
            if not valid.any():
                continue
            tp = dp[valid] / lp[valid][:, None]
            tq = dq[valid] / lq[valid][:, None]
            cosang = np.abs(np.sum(tp * tq, axis=1))
            ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
            report.per_contour_deg.append(float(ang.max()))
            report.matched_count += 1
    if report.per_contour_deg:
        report.mean_deg = float(np.mean(report.per_contour_deg))
    return report


@dataclass
class PrEntry:
    precision: float | None
    recall: float
    tp: int
    fp: int
    fn: int


def pr_at_iou(pred: BuildingSet, gt: Scene, thresholds) -> dict:
    """Greedy one-to-one matching by mask IoU, highest score first."""
    for t in thresholds:
        if not (0.0 < t < 1.0):
            raise ValueError(f"threshold {t} outside (0, 1)")
    pred_masks = [_polygon_mask(p, gt.extent) for p in pred.polygons]
    gt_masks = [_polygon_mask(b, gt.extent) for b in gt.buildings]
    order = sorted(range(len(pred.polygons)),
                   key=lambda i: (-pred.polygons[i].score, i))

    def mask_iou(a, b):
        union = float(np.sum(a | b))
        return float(np.sum(a & b)) / union if union > 0 else 1.0

    out = {}
    for thr in thresholds:
        taken = set()
        tp = fp = 0
        for i in order:
            best_j, best_v = None, 0.0
            for j in range(len(gt_masks)):
                if j in taken:
                    continue
                v = mask_iou(pred_masks[i], gt_masks[j])
                if v > best_v:
                    best_v, best_j = v, j
            if best_j is not None and best_v >= thr:
                taken.add(best_j)
                tp += 1
            else:
                fp += 1
        fn = len(gt_masks) - len(taken)
        precision = tp / (tp + fp) if (tp + fp) > 0 else None
        recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
        out[thr] = PrEntry(precision=precision, recall=recall, tp=tp, fp=fp, fn=fn)
    return out
