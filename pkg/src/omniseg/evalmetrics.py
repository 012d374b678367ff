"""Instance AP (mAP / mAP50 / mAP25), semantic mIoU and evaluation-domain label transfer."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .geometry import project_points

AP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class InstancePrediction:
    mask: np.ndarray
    class_id: int
    score: float


@dataclass
class GTInstance:
    mask: np.ndarray
    class_id: int


def mask_iou(a, b) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ContractViolation(f"mask domains differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return 0.0 if union == 0 else np.count_nonzero(a & b) / union


def _greedy_tp(pred_masks, scores, gt_masks, thr):
    """TP flags in descending-score order (stable), matching each prediction to the
    unmatched GT of highest IoU >= thr, ties to the lower GT index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ious = np.array([[mask_iou(p, g) for g in gt_masks] for p in pred_masks]).reshape(len(pred_masks), len(gt_masks))
    taken = np.zeros(len(gt_masks), bool)
    tp = np.zeros(len(order), bool)
    for rank, i in enumerate(order):
        cand = np.where(~taken & (ious[i] >= thr), ious[i], -1.0)
        if len(cand) and cand.max() >= 0:
            j = int(np.argmax(cand))
            taken[j] = True
            tp[rank] = True
    return np.asarray(scores, dtype=np.float64)[order], tp


def ap_from_ranked(tp, n_gt) -> float:
    """Area under the upper envelope of the precision-recall curve (all points)."""
    if n_gt == 0:
        return 0.0
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, bool)
    precision = np.cumsum(tp) / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall steps by 1/n_gt at each true positive
    return float(np.sum(envelope[tp]) / n_gt)


def average_precision(predictions, gts, iou_threshold) -> dict:
    """Per-class AP for one token domain. ``predictions``: InstancePrediction list, ``gts``: GTInstance list."""
    classes = sorted({p.class_id for p in predictions} | {g.class_id for g in gts})
    out = {}
    for c in classes:
        pm = [p.mask for p in predictions if p.class_id == c]
        ps = [p.score for p in predictions if p.class_id == c]
        gm = [g.mask for g in gts if g.class_id == c]
        _, tp = _greedy_tp(pm, ps, gm, iou_threshold)
        out[c] = ap_from_ranked(tp, len(gm))
    return out


class InstanceEvaluator:
    """Pools ranked detections per class over many scenes before computing AP."""

    def __init__(self, thresholds=(0.25,) + AP_THRESHOLDS):
        self.thresholds = tuple(float(t) for t in thresholds)
        self._scores = {}  # class -> list of arrays
        self._tp = {}  # (class, thr) -> list of arrays
        self._ngt = {}

    def add(self, predictions, gts):
        classes = {p.class_id for p in predictions} | {g.class_id for g in gts}
        for c in classes:
            pm = [p.mask for p in predictions if p.class_id == c]
            ps = [p.score for p in predictions if p.class_id == c]
            gm = [g.mask for g in gts if g.class_id == c]
            self._ngt[c] = self._ngt.get(c, 0) + len(gm)
            for t in self.thresholds:
                scores, tp = _greedy_tp(pm, ps, gm, t)
                self._tp.setdefault((c, t), []).append(tp)
            self._scores.setdefault(c, []).append(scores)

    def class_ap(self, thr):
        out = {}
        for c, parts in self._scores.items():
            scores = np.concatenate(parts)
            tp = np.concatenate(self._tp[(c, thr)])
            order = np.argsort(-scores, kind="stable")
            out[c] = ap_from_ranked(tp[order], self._ngt[c])
        return out

    def report(self) -> dict:
        per = {t: self.class_ap(t) for t in self.thresholds}
        classes = sorted(self._scores)
        res = {"classes": classes}
        if not classes:
            res.update(mAP=0.0, mAP50=0.0, mAP25=0.0)
            return res
        res["mAP25"] = float(np.mean([per[0.25][c] for c in classes])) if 0.25 in per else float("nan")
        res["mAP50"] = float(np.mean([per[0.5][c] for c in classes])) if 0.5 in per else float("nan")
        grid = [t for t in self.thresholds if t >= 0.5]
        res["mAP"] = float(np.mean([[per[t][c] for c in classes] for t in grid]))
        # AP is monotone in the threshold; clamp away summation rounding
        res["mAP"] = min(res["mAP"], res["mAP50"])
        res["mAP50"] = min(res["mAP50"], res["mAP25"])
        res["per_class"] = {c: {t: per[t][c] for t in self.thresholds} for c in classes}
        return res


def evaluate_instances(predictions, gts) -> dict:
    """``predictions``/``gts`` for one scene, or lists of per-scene lists."""
    ev = InstanceEvaluator()
    if predictions and isinstance(predictions[0], list) or gts and isinstance(gts[0], list):
        for p, g in zip(predictions, gts):
            ev.add(p, g)
    else:
        ev.add(predictions, gts)
    return ev.report()


def evaluate_semantic(pred, gt, ignore=None) -> dict:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractViolation(f"label domains differ: {pred.shape} vs {gt.shape}")
    if ignore is not None:
        keep = gt != ignore
        pred, gt = pred[keep], gt[keep]
    classes = sorted(set(np.unique(pred).tolist()) | set(np.unique(gt).tolist()))
    per = {}
    for c in classes:
        p, g = pred == c, gt == c
        per[int(c)] = np.count_nonzero(p & g) / np.count_nonzero(p | g)
    return {"mIoU": float(np.mean(list(per.values()))) if per else 0.0, "per_class_iou": per}


def labels_to_mesh(frames, points, instance_classes, tol=0.02):
    """GT labels for mesh points from the smallest view index that sees them.

    Returns (instance ids, class ids, labeled mask); unlabeled points get -1.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inst = np.full(len(pts), -1, dtype=np.int64)
    for f in frames:
        todo = inst < 0
        if not todo.any():
            break
        uvz, behind = project_points(f.intrinsics, f.pose, pts[todo])
        h, w = f.depth.shape
        u = np.round(uvz[:, 0]).astype(np.int64)
        v = np.round(uvz[:, 1]).astype(np.int64)
        ok = ~behind & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        uu, vv = np.where(ok, u, 0), np.where(ok, v, 0)
        d = f.depth[vv, uu]
        ok &= (d > 0) & (np.abs(d - uvz[:, 2]) <= tol)
        idx = np.nonzero(todo)[0][ok]
        inst[idx] = f.gt_instance[vv[ok], uu[ok]]
    labeled = inst >= 0
    cls = np.full(len(pts), -1, dtype=np.int64)
    cls[labeled] = [0 if i == 0 else instance_classes[int(i)] for i in inst[labeled]]
    return inst, cls, labeled


@dataclass
class EvalReport:
    values: dict = field(default_factory=dict)  # flat name -> float

    @classmethod
    def from_results(cls, inst=None, sem=None, **extra):
        vals = {}
        if inst is not None:
            for k in ("mAP", "mAP50", "mAP25"):
                vals[k] = inst[k]
            for c, per in inst.get("per_class", {}).items():
                vals[f"AP25_class{c}"] = per[0.25]
                vals[f"AP50_class{c}"] = per[0.5]
        if sem is not None:
            vals["mIoU"] = sem["mIoU"]
            for c, v in sem["per_class_iou"].items():
                vals[f"IoU_class{c}"] = v
        vals.update(extra)
        return cls(vals)

    def to_text(self):
        return "".join(f"{k} {v:.6f}\n" for k, v in self.values.items())

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.values))
        w.writerow([f"{v:.6f}" for v in self.values.values()])
        return buf.getvalue()
