"""Detection metrics: greedy matching, precision/recall and average precision.

AP uses all-point interpolation: the area under the precision envelope as a
function of recall, summed over the discrete recall steps of the ranking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .scoring import Status


@dataclass
class MatchResult:
    """Ranked detections tagged TP/FP with the matched GT index (or None)."""

    tags: list  # [(score, is_tp, gt_index | None)] in rank order
    n_gt: int
    iou_threshold: float

    @property
    def tp(self) -> int:
        return sum(1 for _, is_tp, _ in self.tags if is_tp)

    @property
    def fp(self) -> int:
        return sum(1 for _, is_tp, _ in self.tags if not is_tp)

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def match_detections(preds: Sequence, gts: Sequence, iou_threshold: float, iou_fn: Callable) -> MatchResult:
    """Greedy over predictions by descending score (ties keep input order):
    a prediction is TP iff its best-IoU unmatched GT clears the threshold,
    consuming that GT; otherwise FP. Each GT matches at most once."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gts)
    tags = []
    for i in order:
        best_iou = 0.0
        best_j = None
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = iou_fn(preds[i], gt)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j is not None and best_iou >= iou_threshold:
            taken[best_j] = True
            tags.append((preds[i].score, True, best_j))
        else:
            tags.append((preds[i].score, False, None))
    return MatchResult(tags, len(gts), iou_threshold)


def precision_recall(m: MatchResult) -> tuple[Optional[float], Optional[float]]:
    """(precision, recall); zero denominators report None, except the doubly
    empty case (no predictions, no GT) which is perfect by convention."""
    n_pred = len(m.tags)
    if n_pred == 0 and m.n_gt == 0:
        return 1.0, 1.0
    precision = m.tp / n_pred if n_pred > 0 else None
    recall = m.tp / m.n_gt if m.n_gt > 0 else None
    return precision, recall


def average_precision(m: MatchResult) -> Optional[float]:
    """All-point interpolated AP; None when there is no GT to recall."""
    if m.n_gt == 0:
        return None
    tp_flags = [is_tp for _, is_tp, _ in m.tags]
    n = len(tp_flags)
    if n == 0:
        return 0.0
    recalls = []
    precisions = []
    tp = 0
    for i, flag in enumerate(tp_flags):
        if flag:
            tp += 1
        recalls.append(tp / m.n_gt)
        precisions.append(tp / (i + 1))
    # precision envelope from the right, then sum recall-step areas
    for i in range(n - 2, -1, -1):
        if precisions[i] < precisions[i + 1]:
            precisions[i] = precisions[i + 1]
    ap = 0.0
    prev_r = 0.0
    for i in range(n):
        if recalls[i] > prev_r:
            ap += (recalls[i] - prev_r) * precisions[i]
            prev_r = recalls[i]
    return ap


@dataclass
class MetricsReport:
    nucleus_precision: Optional[float]
    nucleus_recall: Optional[float]
    signal_ap: dict  # class name -> AP | None
    mean_ap: Optional[float]
    status_agreement: bool
    predicted_status: str
    gt_status: str
    nucleus_iou_threshold: float
    signal_iou_threshold: float

    def to_dict(self) -> dict:
        return {
            "nucleus_precision": self.nucleus_precision,
            "nucleus_recall": self.nucleus_recall,
            "signal_ap": dict(self.signal_ap),
            "mean_ap": self.mean_ap,
            "status_agreement": self.status_agreement,
            "predicted_status": self.predicted_status,
            "gt_status": self.gt_status,
            "nucleus_iou_threshold": self.nucleus_iou_threshold,
            "signal_iou_threshold": self.signal_iou_threshold,
        }


def evaluate_slide(
    pred_polygons: Sequence,
    pred_signals: Sequence,
    pred_status: Status,
    gt,
    nucleus_iou: float = 0.5,
    signal_iou: float = 0.5,
    supersample: int = 4,
) -> MetricsReport:
    """Nucleus P/R at polygon IoU, per-class signal AP at box IoU, mAP over
    classes with GT, and slide-status agreement."""
    from .geometry import polygon_iou
    from .signal_detection import CLASS_ORDER, box_iou

    @dataclass
    class _Scored:
        obj: object
        score: float

    poly_preds = [_Scored(p, p.score) for p in pred_polygons]
    nm = match_detections(
        poly_preds,
        gt.polygons(),
        nucleus_iou,
        lambda a, b: polygon_iou(a.obj, b, supersample),
    )
    n_prec, n_rec = precision_recall(nm)

    gt_signals = [s for n in gt.nuclei for s in n.signals]
    ap_by_class: dict[str, Optional[float]] = {}
    defined = []
    for cls in CLASS_ORDER:
        preds_c = [_Scored(s, s.score) for s in pred_signals if s.cls is cls]
        gts_c = [s for s in gt_signals if s.cls is cls]
        mr = match_detections(preds_c, gts_c, signal_iou, lambda a, b: box_iou(a.obj.box, b.box))
        ap = average_precision(mr)
        ap_by_class[cls.value] = ap
        if ap is not None:
            defined.append(ap)
    mean_ap = sum(defined) / len(defined) if defined else None

    return MetricsReport(
        nucleus_precision=n_prec,
        nucleus_recall=n_rec,
        signal_ap=ap_by_class,
        mean_ap=mean_ap,
        status_agreement=pred_status is gt.status.status,
        predicted_status=pred_status.value,
        gt_status=gt.status.status.value,
        nucleus_iou_threshold=nucleus_iou,
        signal_iou_threshold=signal_iou,
    )
