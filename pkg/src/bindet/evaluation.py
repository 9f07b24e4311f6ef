"""Detection metrics: tIoU, per-class AP, mAP grids, and category-level F1.

Matching is greedy in score order: each prediction takes the unmatched
ground truth of its class (same video) with the highest overlap, provided
that overlap reaches the threshold.  AP integrates the all-point
interpolated precision-recall curve.  Category F1 compares the set of
predicted labels per video against the annotated label set, micro-averaged
over (video, category) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset


def tiou(a, b) -> float:
    """Temporal intersection-over-union of two (start, end) segments."""
    a_s, a_e = float(a[0]), float(a[1])
    b_s, b_e = float(b[0]), float(b[1])
    inter = min(a_e, b_e) - max(a_s, b_s)
    if inter <= 0:
        return 0.0
    union = max(a_e, b_e) - min(a_s, b_s)
    return inter / union


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    map_by_threshold: dict[float, float]
    average_map: float
    ap_table: dict[float, dict[int, float]]  # threshold -> class -> AP
    category_f1: float
    counts: dict[float, tuple[int, int, int]] = field(default_factory=dict)  # tp, fp, fn


def _sorted_predictions(preds):
    """Score-descending order with deterministic tie-breaking."""
    return sorted(
        range(len(preds)),
        key=lambda i: (-preds[i][3], preds[i][1], preds[i][2], preds[i][0], i),
    )


def _match_class(preds, gts_by_video, thr):
    """Greedy matching; returns per-prediction hit flags in sorted order.

    preds: list of (video_id, start, end, score) for one class.
    gts_by_video: video_id -> list of (start, end) for the same class.
    """
    taken = {vid: [False] * len(segs) for vid, segs in gts_by_video.items()}
    order = _sorted_predictions(preds)
    hits = np.zeros(len(preds), dtype=bool)
    for rank, i in enumerate(order):
        vid, start, end, _ = preds[i]
        segs = gts_by_video.get(vid, [])
        best, best_overlap = -1, 0.0
        for j, seg in enumerate(segs):
            if taken[vid][j]:
                continue
            o = tiou((start, end), seg)
            if o > best_overlap:
                best, best_overlap = j, o
        if best >= 0 and best_overlap >= thr:
            taken[vid][best] = True
            hits[rank] = True
    return hits


def average_precision(preds, gts_by_video, thr: float) -> float:
    """All-point interpolated AP for one class.

    Args:
        preds: list of (video_id, start, end, score).
        gts_by_video: video_id -> list of (start, end) ground truths.
        thr: tIoU threshold a match must reach.
    """
    num_gt = sum(len(v) for v in gts_by_video.values())
    if num_gt == 0:
        return 0.0
    if not preds:
        return 0.0
    hits = _match_class(preds, gts_by_video, thr)
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # Precision envelope from the right, integrated over recall steps.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_recall) * p
        prev_recall = r
    return float(ap)


def _group_by_class(results, dataset: Dataset):
    """Split predictions and ground truths per class; validates video ids."""
    known = {v.id for v in dataset.videos}
    preds_by_class: dict[int, list] = {}
    for vid, cands in results.items():
        if vid not in known:
            raise ValueError(f"predictions reference unknown video id {vid!r}")
        for c in cands:
            preds_by_class.setdefault(int(c.label), []).append(
                (vid, float(c.start), float(c.end), float(c.score))
            )
    gts_by_class: dict[int, dict[str, list]] = {}
    for v in dataset.videos:
        for a in v.annotations:
            gts_by_class.setdefault(int(a.label), {}).setdefault(v.id, []).append(
                (a.start, a.end)
            )
    return preds_by_class, gts_by_class


def evaluate(results, dataset: Dataset, thresholds) -> EvalReport:
    """Full report over a tIoU threshold grid.

    The class mean at each threshold covers every class with ground truth or
    predictions; classes with predictions but no ground truth score 0.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds:
        raise ValueError("threshold grid is empty")
    preds_by_class, gts_by_class = _group_by_class(results, dataset)
    classes = sorted(set(preds_by_class) | set(gts_by_class))
    map_by_thr: dict[float, float] = {}
    ap_table: dict[float, dict[int, float]] = {}
    counts: dict[float, tuple[int, int, int]] = {}
    for thr in thresholds:
        aps: dict[int, float] = {}
        tp = fp = 0
        num_gt = 0
        for k in classes:
            preds = preds_by_class.get(k, [])
            gts = gts_by_class.get(k, {})
            aps[k] = average_precision(preds, gts, thr)
            hits = _match_class(preds, gts, thr) if preds else np.zeros(0, dtype=bool)
            tp += int(hits.sum())
            fp += int(len(preds) - hits.sum())
            num_gt += sum(len(v) for v in gts.values())
        ap_table[thr] = aps
        map_by_thr[thr] = float(np.mean(list(aps.values()))) if aps else 0.0
        counts[thr] = (tp, fp, num_gt - tp)
    avg = float(np.mean(list(map_by_thr.values())))
    f1 = category_f1(results, dataset)
    return EvalReport(
        thresholds=thresholds,
        map_by_threshold=map_by_thr,
        average_map=avg,
        ap_table=ap_table,
        category_f1=f1,
        counts=counts,
    )


def category_f1(results, dataset: Dataset, score_threshold: float | None = None) -> float:
    """Micro-averaged F1 of per-video predicted category sets vs ground truth.

    With a score threshold, only detections scoring above it contribute to a
    video's predicted set; by default every kept detection counts.
    """
    tp = pred_total = gt_total = 0
    for v in dataset.videos:
        gt_set = {int(a.label) for a in v.annotations}
        cands = results.get(v.id, [])
        if score_threshold is not None:
            cands = [c for c in cands if c.score > score_threshold]
        pred_set = {int(c.label) for c in cands}
        tp += len(pred_set & gt_set)
        pred_total += len(pred_set)
        gt_total += len(gt_set)
    if pred_total == 0 or gt_total == 0:
        return 0.0
    precision = tp / pred_total
    recall = tp / gt_total
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def threshold_grid(start: float = 0.3, step: float = 0.1, stop: float = 0.7):
    """Inclusive threshold grid like [0.3, 0.4, 0.5, 0.6, 0.7]."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    n = int(round((stop - start) / step))
    grid = tuple(round(start + i * step, 10) for i in range(n + 1))
    if not grid or grid[-1] > stop + 1e-9:
        raise ValueError(f"invalid grid spec {start}:{step}:{stop}")
    return grid


def report_to_dict(report: EvalReport) -> dict:
    """JSON-ready view of a report; thresholds become string keys."""

    def key(thr: float) -> str:
        return f"{thr:g}"

    return {
        "thresholds": list(report.thresholds),
        "map_by_threshold": {key(t): report.map_by_threshold[t] for t in report.thresholds},
        "average_map": report.average_map,
        "ap_table": {
            key(t): {str(k): v for k, v in sorted(report.ap_table[t].items())}
            for t in report.thresholds
        },
        "category_f1": report.category_f1,
        "counts": {
            key(t): {
                "tp": report.counts[t][0],
                "fp": report.counts[t][1],
                "fn": report.counts[t][2],
            }
            for t in report.thresholds
        },
    }


def format_report_table(report: EvalReport, categories=None) -> str:
    """Plain-text summary table of mAP per threshold plus overall rows."""
    lines = []
    header = f"{'tIoU':>6}  {'mAP':>8}  {'TP':>6}  {'FP':>6}  {'FN':>6}"
    lines.append(header)
    lines.append("-" * len(header))
    for t in report.thresholds:
        tp, fp, fn = report.counts.get(t, (0, 0, 0))
        lines.append(f"{t:>6.2f}  {report.map_by_threshold[t]:>8.4f}  {tp:>6d}  {fp:>6d}  {fn:>6d}")
    lines.append("-" * len(header))
    lines.append(f"average mAP: {report.average_map:.4f}")
    lines.append(f"category F1: {report.category_f1:.4f}")
    return "\n".join(lines)
