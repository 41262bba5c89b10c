"""Evaluation of a predicted path against a ground-truth path.

All metrics work on polylines resampled to a uniform arc-length step and
use exact point-to-segment distances (never nearest-sample distances), so
the resampling step biases nothing but the sample density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume_io import Polyline

# Conventions the numbers depend on; repeated in every emitted report.
DEFAULT_RESAMPLE_STEP_MM = 1.0
REVERSAL_SLACK_MM = 2.0


@dataclass
class MetricsReport:
    precision: float            # percent
    recall: float               # percent
    curve_to_curve: float       # mm
    max_len_no_error: float     # mm
    tp: int
    fp: int
    fn: int
    tolerance: float            # mm
    resample_step: float        # mm

    def table_row(self) -> str:
        return (
            f"{self.precision:6.1f} %  {self.recall:6.1f} %  "
            f"{self.curve_to_curve:7.2f} mm  {self.max_len_no_error:8.1f} mm"
        )

    def to_text(self) -> str:
        lines = [
            f"precision_pct: {self.precision:.6g}",
            f"recall_pct: {self.recall:.6g}",
            f"curve_to_curve_mm: {self.curve_to_curve:.6g}",
            f"max_len_no_error_mm: {self.max_len_no_error:.6g}",
            f"tp: {self.tp}",
            f"fp: {self.fp}",
            f"fn: {self.fn}",
            f"tolerance_mm: {self.tolerance:.6g}",
            f"resample_step_mm: {self.resample_step:.6g}",
            "# point_to_curve: exact point-to-segment distance",
            f"# max_len monotonicity slack: {REVERSAL_SLACK_MM:g} mm local reversals allowed",
        ]
        return "\n".join(lines) + "\n"

    def line_protocol(self) -> str:
        return (
            f"precision={self.precision:.6g} recall={self.recall:.6g} "
            f"curve_to_curve={self.curve_to_curve:.6g} "
            f"max_len_no_error={self.max_len_no_error:.6g} "
            f"tp={self.tp} fp={self.fp} fn={self.fn} "
            f"tolerance={self.tolerance:.6g} step={self.resample_step:.6g}"
        )


def resample_polyline(line: Polyline, step: float) -> Polyline:
    """Resample to uniform arc-length spacing, keeping both endpoints.

    The final inter-point gap is whatever remains after the last full step,
    so total arc length is preserved to within one step.
    """
    if not np.isfinite(step) or step <= 0:
        raise ValueError(f"resample step must be positive, got {step}")
    arc = line.cumulative_arc()
    total = arc[-1]
    positions = np.arange(0.0, total, step)
    if total - positions[-1] > 1e-12:
        positions = np.append(positions, total)
    else:
        positions[-1] = total
    pts = np.stack([np.interp(positions, arc, line.points[:, k]) for k in range(3)], axis=1)
    # Guard against degenerate duplicates from floating-point arc positions.
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 0
    pts = pts[keep]
    if len(pts) < 2:
        pts = line.points[[0, -1]]
    return Polyline(pts)


def _point_segment_distances(points: np.ndarray, curve: Polyline) -> tuple[np.ndarray, np.ndarray]:
    """Distance of each point to the curve and the arc position of the foot.

    Returns (distances, arc_positions), both shape (n,). Exact per-segment
    projection, minimized over all segments.
    """
    a = curve.points[:-1]                     # (s, 3)
    d = curve.points[1:] - a                  # (s, 3)
    seg_len2 = np.einsum("ij,ij->i", d, d)
    arc0 = curve.cumulative_arc()[:-1]
    seg_len = np.sqrt(seg_len2)

    n = points.shape[0]
    best = np.full(n, np.inf)
    best_arc = np.zeros(n)
    # Chunk over points to bound the (chunk, segments) temporaries.
    chunk = max(1, int(4e6) // max(1, a.shape[0]))
    for start in range(0, n, chunk):
        p = points[start:start + chunk]                       # (c, 3)
        diff = p[:, None, :] - a[None, :, :]                  # (c, s, 3)
        t = np.einsum("csk,sk->cs", diff, d) / seg_len2
        np.clip(t, 0.0, 1.0, out=t)
        proj = diff - t[:, :, None] * d[None, :, :]
        dist2 = np.einsum("csk,csk->cs", proj, proj)
        idx = np.argmin(dist2, axis=1)
        rows = np.arange(p.shape[0])
        best[start:start + chunk] = np.sqrt(dist2[rows, idx])
        best_arc[start:start + chunk] = arc0[idx] + t[rows, idx] * seg_len[idx]
    return best, best_arc


def point_to_curve_distance(points: np.ndarray, curve: Polyline) -> np.ndarray:
    return _point_segment_distances(np.asarray(points, dtype=np.float64), curve)[0]


def match_paths(pred: Polyline, gt: Polyline, tol: float) -> tuple[int, int, int, float, float]:
    """Tolerance-based overlap counts between resampled curves.

    Returns (tp, fp, fn, precision_pct, recall_pct). Predicted samples
    within ``tol`` of the GT curve count as TP; GT samples farther than
    ``tol`` from the predicted curve count as FN.
    """
    pred_d = point_to_curve_distance(pred.points, gt)
    gt_d = point_to_curve_distance(gt.points, pred)
    tp = int(np.count_nonzero(pred_d <= tol))
    fp = pred.points.shape[0] - tp
    covered = int(np.count_nonzero(gt_d <= tol))
    fn = gt.points.shape[0] - covered
    precision = 100.0 * tp / max(1, tp + fp)
    recall = 100.0 * covered / gt.points.shape[0]
    return tp, fp, fn, precision, recall


def curve_to_curve_distance(pred: Polyline, gt: Polyline) -> float:
    """Symmetric mean closest-point distance between two sampled curves."""
    d_pg = point_to_curve_distance(pred.points, gt)
    d_gp = point_to_curve_distance(gt.points, pred)
    return float((d_pg.mean() + d_gp.mean()) / 2.0)


def max_error_free_length(pred: Polyline, gt: Polyline, tol: float) -> float:
    """Longest GT arc stretch tracked without error.

    A GT sample is tracked when it lies within ``tol`` of the predicted
    curve. A contiguous run of tracked samples is error-free when the arc
    positions of their closest points on the prediction are monotonic in
    one direction, allowing local reversals up to REVERSAL_SLACK_MM (so a
    shortcut that jumps the prediction's arc backwards breaks the run).
    """
    dist, arc_on_pred = _point_segment_distances(gt.points, pred)
    gt_arc = gt.cumulative_arc()
    within = dist <= tol

    best = 0.0
    n = len(within)
    i = 0
    while i < n:
        if not within[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and within[j + 1]:
            j += 1
        best = max(best, _longest_monotone_window(arc_on_pred[i:j + 1], gt_arc[i:j + 1]))
        i = j + 1
    return best


def _longest_monotone_window(arc: np.ndarray, gt_arc: np.ndarray) -> float:
    best = 0.0
    for values in (arc, -arc):
        m = len(values)
        left = 0
        run_max = -np.inf
        # Two-pointer scan: a window is valid while no element drops more
        # than the slack below the running maximum seen since the window
        # start. Validity is monotone in the left endpoint, so the left
        # pointer only ever advances.
        for right in range(m):
            run_max = max(run_max, values[right])
            while values[right] < run_max - REVERSAL_SLACK_MM:
                left += 1
                run_max = values[left:right + 1].max()
            best = max(best, gt_arc[right] - gt_arc[left])
    return best


def evaluate(pred: Polyline, gt: Polyline, tol: float,
             step: float = DEFAULT_RESAMPLE_STEP_MM) -> MetricsReport:
    """Resample both curves and compute the full metric suite."""
    pred_r = resample_polyline(pred, step)
    gt_r = resample_polyline(gt, step)
    tp, fp, fn, precision, recall = match_paths(pred_r, gt_r, tol)
    return MetricsReport(
        precision=precision,
        recall=recall,
        curve_to_curve=curve_to_curve_distance(pred_r, gt_r),
        max_len_no_error=max_error_free_length(pred_r, gt_r, tol),
        tp=tp,
        fp=fp,
        fn=fn,
        tolerance=tol,
        resample_step=step,
    )
