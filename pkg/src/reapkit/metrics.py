"""Attack and detection scoring: ASR, FNR, F1 thresholds, IoU, AP.

Records come either from in-process evaluation (EvalRecord) or from
external detectors via a line-delimited JSON detection file
(DetectionRecord).  AP uses greedy score-ordered matching over the COCO
IoU grid 0.50:0.05:0.95 with all-point interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import Degenerate, EmptyInput, NoCleanDetections, ParseError

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


@dataclass(frozen=True)
class EvalRecord:
    """Per-sign clean/patched evaluation outcome."""

    sign_id: str
    class_name: str
    clean_detected: bool
    patched_detected_as: str  # class name, or None if undetected
    clean_confidence: float = 0.0
    patched_confidence: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.clean_confidence <= 1.0 \
                or not 0.0 <= self.patched_confidence <= 1.0:
            raise ValueError("confidences must lie in [0, 1]")


@dataclass(frozen=True)
class DetectionRecord:
    """One detection (or groundtruth) box for external-detector ingestion."""

    image_id: str
    box: tuple  # (x, y, w, h)
    class_name: str
    score: float = 1.0
    source: str = "clean"

    def __post_init__(self):
        if len(self.box) != 4 or self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError("box must be (x, y, w, h) with positive size")


def asr(records) -> float:
    """Attack success rate over clean-detected signs.

    Success = clean-detected AND (patched undetected OR detected as a
    wrong class).  Signs missed on the clean pass are excluded from the
    denominator.
    """
    clean = [r for r in records if r.clean_detected]
    if not clean:
        raise NoCleanDetections("no record was detected on the clean pass")
    hits = sum(1 for r in clean
               if r.patched_detected_as is None
               or r.patched_detected_as != r.class_name)
    return hits / len(clean)


def fnr(records, source: str = "clean") -> float:
    """Fraction of groundtruth signs with no correct detection."""
    records = list(records)
    if not records:
        raise EmptyInput("no records")
    if source == "clean":
        missed = sum(1 for r in records if not r.clean_detected)
    else:
        missed = sum(1 for r in records
                     if r.patched_detected_as != r.class_name)
    return missed / len(records)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def select_threshold(scores, labels) -> float:
    """Threshold (>= rule) maximizing F1; ties -> lowest threshold.

    Candidates are midpoints of adjacent distinct sorted scores plus the
    extremes, swept exhaustively.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0 or labels.all() or not labels.any():
        raise Degenerate("need both positive and negative examples")
    uniq = np.unique(scores)
    candidates = [uniq[0]]
    candidates += [(a + b) / 2.0 for a, b in zip(uniq[:-1], uniq[1:])]
    candidates.append(uniq[-1])
    best_t, best_f1 = None, -1.0
    for t in candidates:
        pred = scores >= t
        tp = int((pred & labels).sum())
        fp = int((pred & ~labels).sum())
        fn = int((~pred & labels).sum())
        f1 = _f1(tp, fp, fn)
        if f1 > best_f1 + 1e-15:
            best_t, best_f1 = t, f1
    return float(best_t)


def select_threshold_by_fnr(scores, target_fnr: float) -> float:
    """Smallest threshold whose FNR reaches the target (synthetic mode)."""
    scores = np.sort(np.asarray(scores, dtype=float))
    if scores.size == 0:
        raise EmptyInput("no scores")
    n = scores.size
    uniq = np.unique(scores)
    candidates = np.concatenate([[uniq[0] - 1.0],
                                 (uniq[:-1] + uniq[1:]) / 2.0 if len(uniq) > 1
                                 else np.empty(0),
                                 [uniq[-1] + 1.0]])
    for t in candidates:
        miss = np.count_nonzero(scores < t) / n
        if miss >= target_fnr:
            return float(t)
    return float(candidates[-1])


def iou(a, b) -> float:
    """Intersection-over-union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _ap_single(dets, gts, thr: float) -> float:
    """AP at one IoU threshold: greedy matching, all-point interpolation."""
    if not gts:
        return 0.0
    dets = sorted(dets, key=lambda d: -d.score)
    matched = set()
    tps = []
    for d in dets:
        best, best_iou = None, thr
        for gi, g in enumerate(gts):
            if gi in matched or g.image_id != d.image_id \
                    or g.class_name != d.class_name:
                continue
            v = iou(d.box, g.box)
            if v >= best_iou:
                best, best_iou = gi, v
        if best is not None:
            matched.add(best)
            tps.append(1)
        else:
            tps.append(0)
    if not tps:
        return 0.0
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum([1 - t for t in tps])
    recall = tp_cum / len(gts)
    precision = tp_cum / (tp_cum + fp_cum)
    # All-point interpolation: precision envelope from the right.
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, prec_env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def average_precision(dets, gts, iou_thresholds=IOU_THRESHOLDS) -> float:
    """AP for one class averaged over the IoU threshold grid."""
    return float(np.mean([_ap_single(dets, gts, t) for t in iou_thresholds]))


def mean_average_precision(dets, gts, iou_thresholds=IOU_THRESHOLDS) -> float:
    """Mean AP over the classes present in the groundtruth."""
    classes = sorted({g.class_name for g in gts})
    if not classes:
        return 0.0
    aps = []
    for c in classes:
        aps.append(average_precision(
            [d for d in dets if d.class_name == c],
            [g for g in gts if g.class_name == c], iou_thresholds))
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Detection-file and report IO.

def save_detections(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            d = asdict(r)
            d["box"] = list(d["box"])
            d["class"] = d.pop("class_name")
            f.write(json.dumps(d, sort_keys=True) + "\n")


def load_detections(path):
    records = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                records.append(DetectionRecord(
                    image_id=d["image_id"], box=tuple(d["box"]),
                    class_name=d["class"], score=float(d.get("score", 1.0)),
                    source=d.get("source", "clean")))
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(ln, str(exc)) from exc
    return records


def evaluation_report(records_by_class: dict, config_digest: str = "") -> dict:
    """JSON-ready report with per-class and aggregate ASR/FNR."""
    per_class = {}
    pooled = []
    for cls, records in sorted(records_by_class.items()):
        entry = {"n": len(records),
                 "fnr_clean": fnr(records, "clean"),
                 "fnr_patched": fnr(records, "patched")}
        try:
            entry["asr"] = asr(records)
        except NoCleanDetections:
            entry["asr"] = None
        per_class[cls] = entry
        pooled.extend(records)
    report = {"config_digest": config_digest, "per_class": per_class}
    if pooled:
        report["aggregate"] = {
            "n": len(pooled),
            "fnr_clean": fnr(pooled, "clean"),
            "fnr_patched": fnr(pooled, "patched"),
        }
        try:
            report["aggregate"]["asr"] = asr(pooled)
        except NoCleanDetections:
            report["aggregate"]["asr"] = None
    return report
