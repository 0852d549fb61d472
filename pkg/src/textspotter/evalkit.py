"""Detection and end-to-end evaluation: greedy polygon-IoU matching with
do-not-care handling, precision/recall/F-score, and average precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, polygon_iou


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]  # (detection index, gt index)
    ignored_detections: list[int]
    # per-detection outcome in descending-score order: (det index, score,
    # 'tp' | 'fp' | 'ignored'); feeds the AP sweep
    outcomes: list[tuple[int, float, str]] = field(default_factory=list)


def _texts_equal(a: str | None, b: str | None, case_sensitive: bool) -> bool:
    if a is None or b is None:
        return False
    return a == b if case_sensitive else a.lower() == b.lower()


def match_detections(dets, gts, iou_threshold: float = 0.5,
                     require_transcription: bool = False,
                     case_sensitive: bool = True) -> MatchResult:
    """Greedy matching by descending detection score.

    Each detection tries the unmatched non-ignore gt of highest polygon IoU;
    the match needs IoU >= threshold and, in end-to-end mode, identical
    transcriptions (optionally case-folded). A detection whose best overlap
    is an ignore ("do not care") gt at IoU >= threshold is excluded from
    both tp and fp counting. Unmatched non-ignore gts count as fn.

    dets need .polygon, .score, .transcription; gts need .polygon,
    .transcription, .ignore (corpus.TextAnnotation works).
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_matched = [False] * len(gts)
    pairs: list[tuple[int, int]] = []
    ignored: list[int] = []
    outcomes: list[tuple[int, float, str]] = []

    def _iou(d, g) -> float:
        try:
            return polygon_iou(d.polygon, g.polygon)
        except GeometryError:
            return 0.0

    for di in order:
        det = dets[di]
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(gts):
            if gt.ignore or gt_matched[gi]:
                continue
            iou = _iou(det, gt)
            if iou > best_iou:
                best_iou, best_gt = iou, gi
        ignore_iou = 0.0
        for gi, gt in enumerate(gts):
            if not gt.ignore:
                continue
            ignore_iou = max(ignore_iou, _iou(det, gt))
        matched = best_iou >= iou_threshold and (
            not require_transcription
            or _texts_equal(det.transcription, gts[best_gt].transcription,
                            case_sensitive))
        if matched:
            gt_matched[best_gt] = True
            pairs.append((di, best_gt))
            outcomes.append((di, float(det.score), "tp"))
        elif ignore_iou >= iou_threshold and ignore_iou >= best_iou:
            ignored.append(di)
            outcomes.append((di, float(det.score), "ignored"))
        else:
            outcomes.append((di, float(det.score), "fp"))

    tp = len(pairs)
    fp = len(dets) - tp - len(ignored)
    fn = sum(1 for gi, gt in enumerate(gts)
             if not gt.ignore and not gt_matched[gi])
    return MatchResult(tp=tp, fp=fp, fn=fn, pairs=pairs,
                       ignored_detections=ignored, outcomes=outcomes)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, and their harmonic mean; 0 on empty denominators."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError("counts must be nonnegative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def average_precision(per_image: list[tuple[list, list]],
                      iou_threshold: float = 0.5,
                      require_transcription: bool = False,
                      case_sensitive: bool = True) -> float:
    """Area under the precision envelope, sweeping the score threshold.

    per_image: (detections, gts) pairs. Matching runs greedily per image on
    the full detection set; because greedy matching of a score-descending
    prefix equals the prefix of the full matching, the cumulative sums over
    the pooled, score-sorted outcomes realize the threshold sweep exactly.
    All-points interpolation with a monotone precision envelope.
    """
    n_gt = sum(sum(1 for g in gts if not g.ignore) for _, gts in per_image)
    if n_gt == 0:
        raise ValueError("average_precision needs at least one non-ignore gt")
    pooled: list[tuple[float, int, int, bool]] = []
    for img_idx, (dets, gts) in enumerate(per_image):
        result = match_detections(dets, gts, iou_threshold,
                                  require_transcription, case_sensitive)
        for di, score, kind in result.outcomes:
            if kind == "ignored":
                continue
            pooled.append((score, img_idx, di, kind == "tp"))
    if not pooled:
        return 0.0
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
    tps = np.cumsum([1 if is_tp else 0 for _, _, _, is_tp in pooled])
    fps = np.cumsum([0 if is_tp else 1 for _, _, _, is_tp in pooled])
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, 1)
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def evaluate(per_image: list[tuple[list, list]], iou_threshold: float = 0.5,
             case_sensitive: bool = True) -> dict:
    """Detection-only and end-to-end report over a dataset.

    Returns the JSON-ready document {"detection": {...}, "end_to_end":
    {...}, "per_image": [...]} with precision/recall/fscore/ap in each mode.
    """
    report: dict = {"per_image": []}
    for mode, require in (("detection", False), ("end_to_end", True)):
        tp = fp = fn = 0
        for dets, gts in per_image:
            r = match_detections(dets, gts, iou_threshold, require,
                                 case_sensitive)
            tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
        p, rc, f = prf(tp, fp, fn)
        try:
            ap = average_precision(per_image, iou_threshold, require,
                                   case_sensitive)
        except ValueError:
            ap = 0.0
        report[mode] = {"precision": p, "recall": rc, "fscore": f, "ap": ap,
                        "tp": tp, "fp": fp, "fn": fn}
    for idx, (dets, gts) in enumerate(per_image):
        det_r = match_detections(dets, gts, iou_threshold, False,
                                 case_sensitive)
        e2e_r = match_detections(dets, gts, iou_threshold, True,
                                 case_sensitive)
        report["per_image"].append({
            "image": idx,
            "detection": {"tp": det_r.tp, "fp": det_r.fp, "fn": det_r.fn},
            "end_to_end": {"tp": e2e_r.tp, "fp": e2e_r.fp, "fn": e2e_r.fn},
        })
    return report
