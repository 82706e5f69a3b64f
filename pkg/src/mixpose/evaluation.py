"""Decoding mixture components into poses, pseudo-box NMS, OKS and OKS-AP."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .types import KeypointSet, MixtureField, PersonAnnotation, SkeletonSpec, box_iou, pseudo_bbox

SCORE_THRESH = 1e-4
NMS_THRESH = 0.7
OKS_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass(frozen=True)
class PosePrediction:
    keypoints: KeypointSet
    score: float
    index: int = 0  # source component, used to break score ties

    @property
    def box(self):
        return pseudo_bbox(self.keypoints)


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_threshold: dict[float, float] = field(default_factory=dict)
    curves: dict[float, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)  # recall, precision

    def metrics(self) -> dict[str, float]:
        out = {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75}
        out.update({f"AP@{t:.2f}": v for t, v in self.per_threshold.items()})
        return out


def decode(field: MixtureField, score_thresh: float = SCORE_THRESH, drop_center: bool = True):
    """One candidate pose per component whose foreground probability reaches ``score_thresh``.

    The trailing auxiliary center keypoint is dropped unless ``drop_center`` is false.
    """
    K = field.K_total - 1 if drop_center else field.K_total
    out = []
    for m in np.flatnonzero(field.o >= score_thresh):
        coords = field.mu[m, :2 * K].reshape(K, 2)
        out.append(PosePrediction(KeypointSet(coords), float(field.o[m]), int(m)))
    return out


def nms(cands: Sequence[PosePrediction], iou_thresh: float = NMS_THRESH) -> list[PosePrediction]:
    """Greedy suppression on pseudo-box IoU; a candidate is dropped when its IoU
    with a kept, higher-ranked one is strictly greater than ``iou_thresh``."""
    order = sorted(cands, key=lambda c: (-c.score, c.index))
    kept, boxes = [], []
    for c in order:
        b = c.box
        if all(box_iou(b, kb) <= iou_thresh for kb in boxes):
            kept.append(c)
            boxes.append(b)
    return kept


def predict(field: MixtureField, score_thresh: float = SCORE_THRESH, iou_thresh: float = NMS_THRESH):
    return nms(decode(field, score_thresh), iou_thresh)


def oks(pred, gt: PersonAnnotation, skeleton: SkeletonSpec) -> float:
    """Mean over labeled keypoints of exp(-d^2 / (2 * area * kappa^2))."""
    coords = pred.coords if isinstance(pred, KeypointSet) else np.asarray(pred, dtype=float).reshape(-1, 2)
    vis = gt.keypoints.visibility
    if not vis.any():
        raise ValueError("OKS needs at least one labeled ground-truth keypoint")
    gtc = gt.keypoints.coords
    K = len(gtc)
    d2 = np.sum((coords[:K] - gtc) ** 2, axis=1)
    kappa = np.asarray(skeleton.kappas[:K])
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.exp(-d2 / (2 * gt.area * kappa ** 2))
    if gt.area <= 0:
        e = (d2 == 0).astype(float)
    return float(np.mean(e[vis]))


def oks_matrix(preds, gts, skeleton) -> np.ndarray:
    return np.array([[oks(p.keypoints, g, skeleton) for g in gts] for p in preds]).reshape(len(preds), len(gts))


def _match(scores_oks: np.ndarray, thr: float) -> np.ndarray:
    """Greedy matching of score-sorted predictions; True where a prediction is a true positive."""
    n_pred, n_gt = scores_oks.shape
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_pred, dtype=bool)
    for i in range(n_pred):
        best, best_j = thr, -1
        for j in range(n_gt):
            if not taken[j] and scores_oks[i, j] >= best:
                best, best_j = scores_oks[i, j], j
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
    return tp


def _interp_ap(tp: np.ndarray, n_gt: int):
    rec_thrs = np.linspace(0.0, 1.0, 101)
    if n_gt == 0 or len(tp) == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, rec_thrs, side="left")
    q = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(q.mean()), recall, precision


def average_precision(preds_per_scene: Sequence[Sequence[PosePrediction]],
                      gts_per_scene: Sequence[Sequence[PersonAnnotation]],
                      skeleton: SkeletonSpec, oks_thresholds=OKS_THRESHOLDS) -> EvalResult:
    """COCO-style keypoint AP with 101-point interpolated precision."""
    if len(preds_per_scene) != len(gts_per_scene):
        raise ValueError("predictions and ground truths are not aligned by scene")
    n_gt = sum(len(g) for g in gts_per_scene)
    scene_data = []
    for preds, gts in zip(preds_per_scene, gts_per_scene):
        order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
        ps = [preds[i] for i in order]
        scene_data.append((np.array([p.score for p in ps]), oks_matrix(ps, gts, skeleton)))
    all_scores = np.concatenate([s for s, _ in scene_data]) if scene_data else np.zeros(0)
    rank = np.argsort(-all_scores, kind="mergesort")
    result = EvalResult(0.0, 0.0, 0.0)
    for thr in oks_thresholds:
        tp = np.concatenate([_match(m, thr) for _, m in scene_data]) if scene_data else np.zeros(0, bool)
        ap, rec, prec = _interp_ap(tp[rank], n_gt)
        result.per_threshold[float(thr)] = ap
        result.curves[float(thr)] = (rec, prec)
    vals = list(result.per_threshold.values())
    result.ap = float(np.mean(vals)) if vals else 0.0
    result.ap50 = result.per_threshold.get(0.5, 0.0)
    result.ap75 = result.per_threshold.get(0.75, 0.0)
    return result


def duplicate_rate(preds_per_scene, gts_per_scene, skeleton: SkeletonSpec, oks_thresh: float = 0.5) -> float:
    """Per-scene duplicate-assignment rate, averaged over scenes.

    Within a scene, each kept prediction is assigned to its best-matching person
    (OKS >= ``oks_thresh``); it is a duplicate when that person was already claimed
    by a higher-scored kept prediction.  A scene's rate is duplicates / assigned
    predictions; scenes with no assigned prediction are skipped.
    """
    rates = []
    for preds, gts in zip(preds_per_scene, gts_per_scene):
        if not gts:
            continue
        claimed = set()
        dup = total = 0
        for p in sorted(preds, key=lambda c: (-c.score, c.index)):
            s = [oks(p.keypoints, g, skeleton) for g in gts]
            j = int(np.argmax(s))
            if s[j] < oks_thresh:
                continue
            total += 1
            if j in claimed:
                dup += 1
            claimed.add(j)
        if total:
            rates.append(dup / total)
    return float(np.mean(rates)) if rates else 0.0


def write_metrics_csv(path, result: EvalResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k, v in result.metrics().items():
            w.writerow([k, repr(float(v))])


def write_pr_csv(path, result: EvalResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "recall", "precision"])
        for thr, (rec, prec) in result.curves.items():
            for r, p in zip(rec, prec):
                w.writerow([f"{thr:.2f}", repr(float(r)), repr(float(p))])
