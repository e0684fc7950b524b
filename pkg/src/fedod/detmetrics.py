"""COCO-style detection metrics: mAP@0.5, AP@[.50:.05:.95], size-bucketed
AP/AR, rendered exactly as the comparison tables expect.

Matching is greedy: detections in descending confidence (ties by input
order) claim the unmatched truth with the highest IoU, provided that IoU
meets the threshold. AP interpolates the precision envelope at the 101
recall points {0.00, 0.01, ..., 1.00}. AR averages recall over the ten
IoU thresholds {0.50, 0.55, ..., 0.95} with at most 100 detections per
image. Aggregates are unweighted means over classes present in the ground
truth; a size bucket with no ground truth renders as "__".

Size buckets are area fractions of the image (boxes are normalized, so
w*h is already the fraction): medium is [1/9, 4/9), large is [4/9, inf).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FedodError
from .synthdata import BBox

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SIZE_BUCKETS = {"medium": (1 / 9, 4 / 9), "large": (4 / 9, float("inf"))}
MAX_DETECTIONS_PER_IMAGE = 100

ABSENT = "__"  # rendering for a bucket with no ground truth


class ClassUniverseMismatch(FedodError):
    """Detections or truths carry a class id outside the declared universe."""


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two normalized center/size boxes."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


@dataclass
class MatchResult:
    """Greedy matching outcome for one image and one class at one IoU
    threshold. Detection entries are in descending-confidence order."""

    det_confidence: list[float] = field(default_factory=list)
    det_matched: list[bool] = field(default_factory=list)
    det_iou: list[float] = field(default_factory=list)
    truth_matched: list[bool] = field(default_factory=list)

    @property
    def num_truths(self) -> int:
        return len(self.truth_matched)


def match(detections, truths, iou_threshold: float) -> MatchResult:
    """Match same-class detections to truths for one image.

    `detections` are objects with .bbox and .confidence; `truths` are BBox.
    Descending-confidence greedy, confidence ties broken by input order; a
    detection claims the unmatched truth with the highest IoU when that IoU
    >= iou_threshold, truth-index ties going to the lowest index.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    result = MatchResult(truth_matched=[False] * len(truths))
    for i in order:
        det = detections[i]
        best_iou, best_j = 0.0, -1
        for j, t in enumerate(truths):
            if result.truth_matched[j]:
                continue
            v = iou(det.bbox, t)
            if v > best_iou:
                best_iou, best_j = v, j
        hit = best_j >= 0 and best_iou >= iou_threshold
        if hit:
            result.truth_matched[best_j] = True
        result.det_confidence.append(det.confidence)
        result.det_matched.append(hit)
        result.det_iou.append(best_iou if hit else 0.0)
    return result


def average_precision(results) -> float:
    """101-point interpolated AP from per-image MatchResults of one class
    at one IoU threshold. 0.0 when the class has no ground truth."""
    results = list(results)
    total_truths = sum(r.num_truths for r in results)
    if total_truths == 0:
        return 0.0
    pairs = []
    for image_index, r in enumerate(results):
        for rank, (conf, matched) in enumerate(zip(r.det_confidence, r.det_matched)):
            pairs.append((conf, image_index, rank, matched))
    # descending confidence; ties keep (image, within-image rank) order
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    if not pairs:
        return 0.0
    tp = np.cumsum([1.0 if m else 0.0 for _, _, _, m in pairs])
    fp = np.cumsum([0.0 if m else 1.0 for _, _, _, m in pairs])
    recall = tp / total_truths
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    return float(np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0).mean())


def _recall(results) -> float | None:
    """Dataset recall for one class at one threshold (the per-image
    detection cap is applied upstream). None when there is no ground truth."""
    total = sum(r.num_truths for r in results)
    if total == 0:
        return None
    hit = sum(sum(r.truth_matched) for r in results)
    return hit / total


@dataclass
class ClassMetrics:
    map50: float
    ap_5095: float
    ap_medium: float | None
    ap_large: float | None
    ar_medium: float | None
    ar_large: float | None
    num_truths: int


@dataclass
class EvalReport:
    """Aggregate and per-class metrics matching the comparison-table columns
    (mAP, AP@[.50:.05:.95], APm, APl, ARm, ARl)."""

    map50: float
    ap_5095: float
    ap_medium: float | None
    ap_large: float | None
    ar_medium: float | None
    ar_large: float | None
    per_class: dict[int, ClassMetrics]
    num_images: int
    num_truths: int
    num_detections: int

    COLUMNS = ("mAP", "AP@[.50:.05:.95]", "APm", "APl", "ARm", "ARl")

    def metric_row(self) -> tuple:
        return (self.map50, self.ap_5095, self.ap_medium, self.ap_large,
                self.ar_medium, self.ar_large)

    def to_dict(self) -> dict:
        def cell(v):
            return None if v is None else round(float(v), 6)

        return {
            "map50": cell(self.map50),
            "ap_5095": cell(self.ap_5095),
            "ap_medium": cell(self.ap_medium),
            "ap_large": cell(self.ap_large),
            "ar_medium": cell(self.ar_medium),
            "ar_large": cell(self.ar_large),
            "per_class": {
                str(k): {
                    "map50": cell(m.map50),
                    "ap_5095": cell(m.ap_5095),
                    "ap_medium": cell(m.ap_medium),
                    "ap_large": cell(m.ap_large),
                    "ar_medium": cell(m.ar_medium),
                    "ar_large": cell(m.ar_large),
                    "num_truths": m.num_truths,
                }
                for k, m in sorted(self.per_class.items())
            },
            "counts": {
                "images": self.num_images,
                "truths": self.num_truths,
                "detections": self.num_detections,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self, model: str = "model", dataset: str = "dataset") -> str:
        """Fixed-width text table: Model | Test Dataset | six metric columns."""
        headers = ("Model", "Test Dataset") + self.COLUMNS
        row = (model, dataset) + tuple(format_metric(v) for v in self.metric_row())
        widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
        lines = [
            "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
            "  ".join("-" * w for w in widths),
            "  ".join(v.ljust(w) for v, w in zip(row, widths)),
        ]
        return "\n".join(lines) + "\n"


def format_metric(v) -> str:
    return ABSENT if v is None else f"{v:.4f}"


def _in_bucket(box: BBox, bucket: tuple[float, float]) -> bool:
    lo, hi = bucket
    return lo <= box.area() < hi


def _class_results(dets_per_image, truths_per_image, class_id, threshold,
                   bucket=None, max_det=MAX_DETECTIONS_PER_IMAGE):
    results = []
    for dets, truths in zip(dets_per_image, truths_per_image):
        dets_c = [d for d in dets if d.class_id == class_id]
        dets_c = sorted(dets_c, key=lambda d: -d.confidence)[:max_det]
        truths_c = [t for t in truths if t.class_id == class_id]
        if bucket is not None:
            dets_c = [d for d in dets_c if _in_bucket(d.bbox, bucket)]
            truths_c = [t for t in truths_c if _in_bucket(t, bucket)]
        results.append(match(dets_c, truths_c, threshold))
    return results


def evaluate(dets_per_image, truths_per_image, size_buckets=None,
             class_ids=None) -> EvalReport:
    """Full evaluation over a dataset.

    `dets_per_image[i]` holds objects with .bbox/.class_id/.confidence for
    image i; `truths_per_image[i]` holds BBox ground truth. When class_ids
    is given, any other class id raises ClassUniverseMismatch.
    """
    if len(dets_per_image) != len(truths_per_image):
        raise ClassUniverseMismatch(
            f"{len(dets_per_image)} detection lists vs "
            f"{len(truths_per_image)} truth lists"
        )
    buckets = SIZE_BUCKETS if size_buckets is None else size_buckets
    seen = {t.class_id for ts in truths_per_image for t in ts}
    seen |= {d.class_id for ds in dets_per_image for d in ds}
    if class_ids is not None:
        extra = seen - set(class_ids)
        if extra:
            raise ClassUniverseMismatch(f"unexpected class ids {sorted(extra)}")
    gt_classes = sorted({t.class_id for ts in truths_per_image for t in ts})

    per_class: dict[int, ClassMetrics] = {}
    for k in gt_classes:
        ap_by_t = {
            t: average_precision(_class_results(dets_per_image, truths_per_image, k, t))
            for t in IOU_THRESHOLDS
        }
        bucket_ap: dict[str, float | None] = {}
        bucket_ar: dict[str, float | None] = {}
        for name, rng in buckets.items():
            aps, recalls = [], []
            has_gt = any(
                _in_bucket(t, rng) for ts in truths_per_image for t in ts
                if t.class_id == k
            )
            if not has_gt:
                bucket_ap[name] = None
                bucket_ar[name] = None
                continue
            for t in IOU_THRESHOLDS:
                res = _class_results(dets_per_image, truths_per_image, k, t, bucket=rng)
                aps.append(average_precision(res))
                r = _recall(res)
                recalls.append(r if r is not None else 0.0)
            bucket_ap[name] = float(np.mean(aps))
            bucket_ar[name] = float(np.mean(recalls))
        per_class[k] = ClassMetrics(
            map50=ap_by_t[0.5],
            ap_5095=float(np.mean(list(ap_by_t.values()))),
            ap_medium=bucket_ap.get("medium"),
            ap_large=bucket_ap.get("large"),
            ar_medium=bucket_ar.get("medium"),
            ar_large=bucket_ar.get("large"),
            num_truths=sum(
                1 for ts in truths_per_image for t in ts if t.class_id == k
            ),
        )

    def agg(metric):
        vals = [getattr(m, metric) for m in per_class.values()
                if getattr(m, metric) is not None]
        return float(np.mean(vals)) if vals else None

    return EvalReport(
        map50=agg("map50") or 0.0,
        ap_5095=agg("ap_5095") or 0.0,
        ap_medium=agg("ap_medium"),
        ap_large=agg("ap_large"),
        ar_medium=agg("ar_medium"),
        ar_large=agg("ar_large"),
        per_class=per_class,
        num_images=len(truths_per_image),
        num_truths=sum(len(ts) for ts in truths_per_image),
        num_detections=sum(len(ds) for ds in dets_per_image),
    )
