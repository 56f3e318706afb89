"""Exhaustive MAP search over consistent label assignments, loss-augmented search and NMS."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import HierarchyConfig, LabelAssignment, WeightVector, enumerate_assignments
from .potentials import EnergyBreakdown, PotentialBundle, total_energy


@dataclass
class Detection:
    region: tuple
    assignment: LabelAssignment
    energy: float
    breakdown: EnergyBreakdown
    image_id: str = ""

    @property
    def is_background(self) -> bool:
        return self.assignment.is_background


@lru_cache(maxsize=64)
def candidate_table(config: HierarchyConfig):
    """Foreground candidates as index arrays (v, s, f); -1 marks an absent label."""
    cands = enumerate_assignments(config)
    v = np.array([c[0] for c in cands], dtype=np.int64)
    s = np.array([-1 if c[1] is None else c[1] for c in cands], dtype=np.int64)
    f = np.array([-1 if c[2] is None else c[2] for c in cands], dtype=np.int64)
    for a in (v, s, f):
        a.setflags(write=False)
    return v, s, f


def score_candidates(bundle: PotentialBundle, w: WeightVector, config: HierarchyConfig) -> np.ndarray:
    """Energies of all candidates, background first (always 0), then enumeration order."""
    v, s, f = candidate_table(config)
    hog, app = bundle.hog, bundle.app
    e = w.block("det")[0] * bundle.det + (w.block("glb.1") @ hog + w.block("loc.1") @ app)[v]
    if config.layers >= 2:
        if bundle.cnt2 is None:
            raise ValueError("bundle lacks layer-2 contour potentials")
        t2 = w.block("glb.2") @ hog + w.block("loc.2") @ app + w.block("cnt.2")[None, :] * bundle.cnt2
        e = e + t2[v, s] + w.block("vw.1")[0]
    if config.layers >= 3:
        if bundle.cnt3 is None:
            raise ValueError("bundle lacks layer-3 contour potentials")
        t3 = w.block("glb.3") @ hog + w.block("loc.3") @ app + w.block("cnt.3")[None, :] * bundle.cnt3
        has_f = f >= 0
        e = e + np.where(has_f, t3[v, np.maximum(f, 0)], 0.0) + w.block("vw.2")[0] + w.block("sb.2")[0]
    return np.concatenate([[0.0], e])


def candidate_assignment(k: int, bundle: PotentialBundle, config: HierarchyConfig) -> LabelAssignment:
    """Assignment of candidate ``k`` (0 = background) with its maximising particles attached."""
    if k == 0:
        return LabelAssignment.background()
    v, s, f = (int(t[k - 1]) for t in candidate_table(config))
    s = None if s < 0 else s
    f = None if f < 0 else f
    cv2 = cv3 = None
    if config.layers >= 2 and bundle.particles is not None:
        cv2 = bundle.particles[v][int(bundle.arg2[v, s])]
        if config.layers >= 3 and f is not None:
            cv3 = bundle.particles[v][int(bundle.arg3[v, f])]
    return LabelAssignment.foreground(v, s, f, config.layers, cv2, cv3)


def _detection(k, bundle, w, config) -> Detection:
    a = candidate_assignment(k, bundle, config)
    br = total_energy(bundle, a, w, config)
    return Detection(bundle.region, a, br.total, br, bundle.image_id)


def infer(bundle: PotentialBundle, w: WeightVector, config: HierarchyConfig) -> Detection:
    """Highest-energy assignment; ties go to the earliest candidate (background first)."""
    return _detection(int(np.argmax(score_candidates(bundle, w, config))), bundle, w, config)


def infer_region(ctx, image, region, w: WeightVector, seed: int = 0, image_id: str = "") -> Detection:
    return infer(ctx.bundle(image, region, seed, image_id), w, ctx.config)


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossSpec:
    """Per-layer mistake costs; the sub-category cost is divided by its training count."""

    viewpoint: float = 0.1
    subcat_base: float = 0.3
    finer: float = 0.1
    counts: tuple = ()

    def __post_init__(self):
        if min(self.viewpoint, self.subcat_base, self.finer) < 0:
            raise ValueError("losses must be non-negative")

    def subcat_cost(self, s: int) -> float:
        K = self.counts[s] if s < len(self.counts) else 1
        return self.subcat_base / max(int(K), 1)

    def full(self, s, config: HierarchyConfig) -> float:
        out = self.viewpoint
        if config.layers >= 2:
            out += self.subcat_cost(s)
        if config.layers >= 3:
            out += self.finer
        return out

    @classmethod
    def zero(cls) -> "LossSpec":
        return cls(0.0, 0.0, 0.0)


def loss(truth: LabelAssignment, pred: LabelAssignment, losses: LossSpec, config: HierarchyConfig) -> float:
    if truth.o == 0:
        return 0.0 if pred.o == 0 else losses.full(pred.s2, config)
    if pred.o == 0:
        return losses.full(truth.s2, config)
    out = losses.viewpoint * (pred.v1 != truth.v1)
    if config.layers >= 2:
        out += losses.subcat_cost(truth.s2) * (pred.s2 != truth.s2)
    if config.layers >= 3:
        out += losses.finer * (pred.f != truth.f)
    return float(out)


def loss_vector(truth: LabelAssignment, losses: LossSpec, config: HierarchyConfig) -> np.ndarray:
    """Loss of every candidate in :func:`score_candidates` order."""
    v, s, f = candidate_table(config)
    if truth.o == 0:
        fg = np.full(len(v), losses.viewpoint)
        if config.layers >= 2:
            fg += np.array([losses.subcat_cost(int(si)) for si in s])
        if config.layers >= 3:
            fg += losses.finer
        return np.concatenate([[0.0], fg])
    fg = losses.viewpoint * (v != truth.v1)
    if config.layers >= 2:
        fg = fg + losses.subcat_cost(truth.s2) * (s != truth.s2)
    if config.layers >= 3:
        tf = -1 if truth.f is None else truth.f
        fg = fg + losses.finer * (f != tf)
    return np.concatenate([[losses.full(truth.s2, config)], fg])


def loss_augmented_infer(bundle: PotentialBundle, truth: LabelAssignment, w: WeightVector,
                         config: HierarchyConfig, losses: LossSpec):
    """Most violating assignment: (assignment, energy + loss, loss)."""
    lv = loss_vector(truth, losses, config)
    total = score_candidates(bundle, w, config) + lv
    k = int(np.argmax(total))
    return candidate_assignment(k, bundle, config), float(total[k]), float(lv[k])


# ---------------------------------------------------------------------------
# per-image driver


def box_iou(a, b) -> float:
    ax0, ay0, aw, ah = (float(t) for t in a)
    bx0, by0, bw, bh = (float(t) for t in b)
    iw = min(ax0 + aw, bx0 + bw) - max(ax0, bx0)
    ih = min(ay0 + ah, by0 + bh) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def nms(detections: list, overlap: float = 0.5) -> list:
    """Greedy suppression by energy; a box is dropped when its IoU with a kept box exceeds ``overlap``."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].energy, i))
    kept = []
    for i in order:
        d = detections[i]
        if all(box_iou(d.region, k.region) <= overlap for k in kept):
            kept.append(d)
    return kept


def detect_bundles(bundles, w: WeightVector, config: HierarchyConfig, overlap: float = 0.5) -> list:
    dets = [infer(b, w, config) for b in bundles]
    return nms([d for d in dets if not d.is_background], overlap)


def detect_image(ctx, image, proposals, w: WeightVector, seed: int = 0, image_id: str = "",
                 overlap: float = 0.5) -> list:
    bundles = [ctx.bundle(image, r, seed, image_id) for r in proposals]
    return detect_bundles(bundles, w, ctx.config, overlap)
