"""Detection AP under joint label criteria, pose error, mask IoU and confusion counts.

Detections and ground truths are duck-typed records with ``image_id``,
``box`` (x, y, w, h), ``azimuth``, ``subcat`` and ``finer``; detections also
carry ``energy``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import render_bits, wrap_angle
from .inference import box_iou
from .model import azimuth_bin


@dataclass(frozen=True)
class MatchCriterion:
    name: str = "Bounding Box"
    viewpoint_bins: int | None = None
    subcat: bool = False
    finer: bool = False

    def labels_ok(self, det, gt) -> bool:
        if self.viewpoint_bins is not None:
            if det.azimuth is None or gt.azimuth is None:
                return False
            if azimuth_bin(det.azimuth, self.viewpoint_bins) != azimuth_bin(gt.azimuth, self.viewpoint_bins):
                return False
        if self.subcat and det.subcat != gt.subcat:
            return False
        if self.finer and det.finer != gt.finer:
            return False
        return True


def standard_criteria(bins: int = 8) -> list:
    """The five report columns, weakest first."""
    return [
        MatchCriterion("Bounding Box"),
        MatchCriterion("Viewpoint", bins),
        MatchCriterion("Sub-category", None, True),
        MatchCriterion("Sub-category & Viewpoint", bins, True),
        MatchCriterion("All", bins, True, True),
    ]


@dataclass
class PrAp:
    recall: np.ndarray
    precision: np.ndarray
    ap: float | None
    tp: np.ndarray
    n_gt: int


def match_boxes(detections, groundtruth, iou: float = 0.5):
    """Greedy assignment by descending energy.

    Returns (order, matched gt index or -1 per ranked detection). A
    detection whose best-overlapping ground truth is already taken stays
    unmatched.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].energy, i))
    by_image = {}
    for j, g in enumerate(groundtruth):
        by_image.setdefault(g.image_id, []).append(j)
    taken = np.zeros(len(groundtruth), dtype=bool)
    match = np.full(len(order), -1, dtype=np.int64)
    for r, i in enumerate(order):
        d = detections[i]
        best, arg = 0.0, -1
        for j in by_image.get(d.image_id, ()):
            o = box_iou(d.box, groundtruth[j].box)
            if o > best:
                best, arg = o, j
        if arg >= 0 and best > iou and not taken[arg]:
            taken[arg] = True
            match[r] = arg
    return order, match


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all points)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate_ap(detections, groundtruth, criterion: MatchCriterion = MatchCriterion(),
                iou: float = 0.5) -> PrAp:
    detections, groundtruth = list(detections), list(groundtruth)
    order, match = match_boxes(detections, groundtruth, iou)
    tp = np.array([m >= 0 and criterion.labels_ok(detections[i], groundtruth[m])
                   for i, m in zip(order, match)], dtype=bool)
    n_gt = len(groundtruth)
    if n_gt == 0:
        return PrAp(np.zeros(0), np.zeros(0), None, tp, 0)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    return PrAp(recall, precision, average_precision(recall, precision), tp, n_gt)


def true_positive_pairs(detections, groundtruth, iou: float = 0.5) -> list:
    """(detection, ground truth) for every box-level match."""
    detections, groundtruth = list(detections), list(groundtruth)
    order, match = match_boxes(detections, groundtruth, iou)
    return [(detections[i], groundtruth[m]) for i, m in zip(order, match) if m >= 0]


# ---------------------------------------------------------------------------
# continuous pose


def azimuth_error(a: float, b: float) -> float:
    """Circular difference in radians, in [0, pi]."""
    d = wrap_angle(a - b)
    return min(d, 2 * math.pi - d)


def pose_rmse(pairs):
    """RMSE of (azimuth in degrees, elevation in degrees, distance) over (predicted, true) viewpoints."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one matched pair")
    az = np.array([math.degrees(azimuth_error(p.azimuth, t.azimuth)) for p, t in pairs])
    el = np.array([math.degrees(p.elevation - t.elevation) for p, t in pairs])
    dist = np.array([p.distance - t.distance for p, t in pairs])
    rms = lambda x: float(np.sqrt(np.mean(x ** 2)))
    return rms(az), rms(el), rms(dist)


# ---------------------------------------------------------------------------
# segmentation


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def placed_mask(cad, viewpoint, box, image_size, focal) -> np.ndarray:
    """Silhouette in the image frame, projected about the box centre plus the offset."""
    W, H = image_size
    cx = box[0] + box[2] / 2.0 + viewpoint.occ[0]
    cy = box[1] + box[3] / 2.0 + viewpoint.occ[1]
    return render_bits(cad, viewpoint.pose(), (W, H), focal, (cx, cy))


def segmentation_iou(det_cad, det_viewpoint, det_box, image_size, focal, mode: str = "cad-alignment",
                     gt_cad=None, gt_viewpoint=None, gt_box=None, gt_mask=None) -> float:
    pred = placed_mask(det_cad, det_viewpoint, det_box, image_size, focal)
    if mode == "cad-alignment":
        if gt_cad is None or gt_viewpoint is None or gt_box is None:
            raise ValueError("cad-alignment needs the ground-truth CAD, viewpoint and box")
        ref = placed_mask(gt_cad, gt_viewpoint, gt_box, image_size, focal)
    elif mode == "2d-segmentation":
        if gt_mask is None:
            raise ValueError("2d-segmentation needs a ground-truth mask")
        ref = gt_mask
    else:
        raise ValueError(f"unknown segmentation mode {mode!r}")
    return mask_iou(pred, ref)


def confusion_matrix(pairs, n: int) -> np.ndarray:
    """Rows are true sub-category indices, columns predicted, over (true, predicted) pairs."""
    out = np.zeros((n, n), dtype=np.int64)
    for t, p in pairs:
        if t is not None and p is not None:
            out[t, p] += 1
    return out
