"""OKS, COCO-style AP/AR over OKS thresholds, and PCKh."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data.coco import PoseInstance

THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MEDIUM_LARGE_SPLIT = 96.0 ** 2
MAX_DETS = 20


class UndefinedOKS(ValueError):
    pass


def oks(pred, gt, area: float, k) -> float:
    """Object keypoint similarity of one prediction against one ground truth.

    ``pred``: [K, >=2]; ``gt``: [K, 3] with visibility in the last column; ``k``: per
    joint falloff constants. Only joints with v > 0 count; raises UndefinedOKS if none do.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    vis = gt[:, 2] > 0
    if not vis.any():
        raise UndefinedOKS("no visible ground-truth keypoints")
    d2 = np.sum((pred[:, :2] - gt[:, :2]) ** 2, axis=1)
    e = d2 / (2.0 * (area + np.spacing(1)) * k ** 2)
    return float(np.mean(np.exp(-e[vis])))


def oks_matrix(preds: list[np.ndarray], gts: list[PoseInstance], k) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            try:
                out[i, j] = oks(p, g.keypoints, g.area, k)
            except UndefinedOKS:
                out[i, j] = 0.0  # such ground truth is ignored by the evaluator
    return out


def greedy_match(ious: np.ndarray, t: float, gt_ignore: np.ndarray | None = None) -> np.ndarray:
    """Rows are predictions in descending confidence. Each takes the best unmatched
    ground truth with OKS >= t; ties go to the lowest index. Ignored ground truth
    must be ordered last; it is only used when no regular match exists.
    Returns, per prediction, the matched column or -1.
    """
    n_d, n_g = ious.shape
    if gt_ignore is None:
        gt_ignore = np.zeros(n_g, dtype=bool)
    taken = np.zeros(n_g, dtype=bool)
    match = np.full(n_d, -1, dtype=np.int64)
    for d in range(n_d):
        best, best_iou = -1, t
        for g in range(n_g):
            if taken[g]:
                continue
            if best >= 0 and not gt_ignore[best] and gt_ignore[g]:
                break
            if ious[d, g] < best_iou or (best >= 0 and ious[d, g] == best_iou):
                continue
            best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            match[d] = best
    return match


def interpolated_ap(tp: np.ndarray, n_pos: int) -> tuple[float, float]:
    """101-point interpolated precision and final recall from a ranked tp vector."""
    tp = np.asarray(tp, dtype=np.float64)
    if len(tp) == 0:
        return 0.0, 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    rc = tps / n_pos
    pr = tps / (tps + fps)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    inds = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.where(inds < len(pr), pr[np.minimum(inds, len(pr) - 1)], 0.0)
    return math.fsum(q) / len(q), float(rc[-1])


def _kp_area(kp: np.ndarray) -> float:
    xy = np.asarray(kp, dtype=np.float64).reshape(-1, 3)[:, :2]
    w, h = np.ptp(xy[:, 0]), np.ptp(xy[:, 1])
    return float(w * h)


@dataclass
class APResult:
    ap: float
    ar: float
    per_threshold: dict[float, tuple[float, float]]
    warnings: list[str] = field(default_factory=list)

    def at(self, t: float) -> float:
        return self.per_threshold[round(t, 2)][0]


def evaluate_ap(gt: dict[int, list[PoseInstance]], preds: list[dict], k, area_range=None,
                thresholds=THRESHOLDS, max_dets: int = MAX_DETS) -> APResult:
    """COCO-style keypoint AP/AR averaged over ``thresholds``.

    ``gt`` maps image id to instances; ``preds`` are result dicts (image_id,
    keypoints flat K*3, score). Ground truth with no labelled joints, or with area
    outside ``area_range``, is ignored: matching it neither helps nor hurts.
    """
    warnings: list[str] = []
    by_img: dict[int, list[dict]] = {}
    for p in preds:
        by_img.setdefault(int(p["image_id"]), []).append(p)
    unknown = set(by_img) - set(gt)
    if unknown:
        warnings.append(f"{len(unknown)} predicted image ids have no ground truth entry")
    lo, hi = area_range if area_range is not None else (-np.inf, np.inf)

    per_img = []
    n_pos = 0
    for iid in gt:
        gts = gt[iid]
        ign = np.array([(g.keypoints[:, 2] > 0).sum() == 0 or not (lo <= g.area <= hi) for g in gts], dtype=bool)
        order_g = np.argsort(ign, kind="mergesort")  # ignored last
        gts = [gts[i] for i in order_g]
        ign = ign[order_g]
        n_pos += int((~ign).sum())
        dts = sorted(by_img.get(iid, []), key=lambda d: -float(d["score"]))[:max_dets]
        kps = [np.asarray(d["keypoints"], dtype=np.float64).reshape(-1, 3) for d in dts]
        ious = oks_matrix(kps, gts, k)
        dt_out = np.array([not (lo <= _kp_area(kp) <= hi) for kp in kps], dtype=bool)
        per_img.append((np.array([float(d["score"]) for d in dts]), ious, ign, dt_out))

    if n_pos == 0:
        warnings.append("no ground-truth instances to evaluate")
        if not any(len(s) for s, *_ in per_img) and not by_img:
            res = {float(t): (1.0, 1.0) for t in thresholds}
            return APResult(1.0, 1.0, res, warnings)
        res = {float(t): (0.0, 0.0) for t in thresholds}
        return APResult(0.0, 0.0, res, warnings)

    res = {}
    for t in thresholds:
        scores, tps = [], []
        for s, ious, ign, dt_out in per_img:
            m = greedy_match(ious, float(t), ign)
            for d in range(len(s)):
                if m[d] >= 0:
                    if ign[m[d]]:
                        continue
                    tps.append(1.0)
                else:
                    if dt_out[d]:
                        continue
                    tps.append(0.0)
                scores.append(s[d])
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
        ap, ar = interpolated_ap(np.asarray(tps)[order], n_pos)
        res[float(t)] = (ap, ar)
    ap = math.fsum(v[0] for v in res.values()) / len(res)
    ar = math.fsum(v[1] for v in res.values()) / len(res)
    return APResult(ap, ar, res, warnings)


def coco_report(gt: dict[int, list[PoseInstance]], preds: list[dict], k, split: float = MEDIUM_LARGE_SPLIT) -> dict:
    full = evaluate_ap(gt, preds, k)
    med = evaluate_ap(gt, preds, k, area_range=(32.0 ** 2, split))
    large = evaluate_ap(gt, preds, k, area_range=(split, np.inf))
    return {
        "AP": full.ap,
        "AP50": full.at(0.5),
        "AP75": full.at(0.75),
        "APM": med.ap,
        "APL": large.ap,
        "AR": full.ar,
        "per_threshold": {f"{t:.2f}": {"AP": a, "AR": r} for t, (a, r) in full.per_threshold.items()},
        "num_images": len(gt),
        "num_gt": sum(len(v) for v in gt.values()),
        "num_predictions": len(preds),
        "warnings": full.warnings,
    }


# ---------------------------------------------------------------------------- PCKh


@dataclass
class PCKhResult:
    mean: float
    per_joint: np.ndarray
    counted: int
    skipped: int
    warnings: list[str] = field(default_factory=list)


def pckh(pred: np.ndarray, gt: np.ndarray, head_lengths, alpha: float = 0.5) -> PCKhResult:
    """Fraction of visible joints closer than ``alpha`` x head length (strictly).

    ``pred``: [N, K, >=2]; ``gt``: [N, K, 3]. Records with non-positive head
    length are skipped with a warning.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    head = np.asarray(head_lengths, dtype=np.float64).reshape(-1)
    if pred.shape[:2] != gt.shape[:2] or len(head) != len(gt):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, heads {head.shape}")
    warnings = []
    ok = head > 0
    skipped = int((~ok).sum())
    if skipped:
        warnings.append(f"skipped {skipped} record(s) with non-positive head length")
    pred, gt, head = pred[ok], gt[ok], head[ok]
    vis = gt[..., 2] > 0
    d = np.linalg.norm(pred[..., :2] - gt[..., :2], axis=-1)
    hit = (d < alpha * head[:, None]) & vis
    n_vis = vis.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(n_vis > 0, hit.sum(axis=0) / np.maximum(n_vis, 1), np.nan)
    total = int(vis.sum())
    mean = float(hit.sum() / total) if total else float("nan")
    return PCKhResult(mean, per_joint, len(gt), skipped, warnings)


def pair_predictions(gt: dict[int, list[PoseInstance]], preds: list[dict], k):
    """Pair each ground-truth person with its best-OKS prediction in the same image.

    Returns (pred [N, K, 3], gt [N, K, 3], head lengths [N]); unmatched ground truth
    gets a prediction of +inf so every joint counts as missed.
    """
    P, G, H = [], [], []
    by_img: dict[int, list[dict]] = {}
    for p in preds:
        by_img.setdefault(int(p["image_id"]), []).append(p)
    for iid, gts in gt.items():
        dts = sorted(by_img.get(iid, []), key=lambda d: -float(d["score"]))
        kps = [np.asarray(d["keypoints"], dtype=np.float64).reshape(-1, 3) for d in dts]
        m = greedy_match(oks_matrix(kps, gts, k).T, 0.0) if kps else np.full(len(gts), -1)
        for j, g in enumerate(gts):
            G.append(g.keypoints)
            H.append(g.head_length if g.head_length is not None else 0.0)
            P.append(kps[m[j]] if m[j] >= 0 else np.full_like(g.keypoints, np.inf))
    K = len(k)
    if not G:
        return np.zeros((0, K, 3)), np.zeros((0, K, 3)), np.zeros(0)
    return np.stack(P), np.stack(G), np.asarray(H)


def pckh_report(gt, preds, k, alpha: float = 0.5, joint_names=None) -> dict:
    p, g, h = pair_predictions(gt, preds, k)
    r = pckh(p, g, h, alpha)
    names = joint_names or [str(i) for i in range(len(r.per_joint))]
    return {
        f"PCKh@{alpha}": r.mean,
        "per_joint": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, r.per_joint)},
        "counted": r.counted,
        "skipped": r.skipped,
        "warnings": r.warnings,
    }
