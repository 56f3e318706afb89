"""Potential terms of the hierarchy and the total energy of an assignment.

Contour alignment renders a CAD model at a particle directly at template
resolution: the region's anisotropic resampling to the square template is
folded into separate horizontal and vertical focal lengths, and the render
canvas carries a margin wide enough for every particle's offset so that the
outline is never cut at the region border.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .features import (
    AppearanceVector, compute_hog, contour_hog, hog_batch, read_feature_file, region_key,
)
from .geometry import CadModel, CameraPose, SilhouetteMask, contour_of, pixel_shift, project_mesh, render_bits
from .model import (
    CadRegistry, HierarchyConfig, LabelAssignment, WeightVector, validate_assignment,
)
from .sampling import DistanceReference, ParticleSet, make_rng, sample_particles


@dataclass(eq=False)
class PotentialBundle:
    """Everything the energy needs from one region.

    ``cnt2[v, s]`` / ``cnt3[v, f]`` hold the contour alignment maximised over
    bin ``v``'s particles for the merged model of ``s`` / the model of ``f``;
    ``arg2`` / ``arg3`` the maximising particle indices and ``all2`` /
    ``all3`` the per-particle values the maxima were taken over.
    """

    det: float
    hog: np.ndarray
    app: np.ndarray
    cnt2: np.ndarray | None = None
    cnt3: np.ndarray | None = None
    arg2: np.ndarray | None = None
    arg3: np.ndarray | None = None
    all2: np.ndarray | None = None
    all3: np.ndarray | None = None
    particles: list | None = None
    region: tuple | None = None
    image_id: str = ""


@dataclass
class EnergyBreakdown:
    terms: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))


# ---------------------------------------------------------------------------
# contour alignment


def template_scale(region, config: HierarchyConfig, focal: float):
    """Focal lengths and pixel scale mapping image pixels of ``region`` onto the template."""
    T = config.template
    sx, sy = T / float(region[2]), T / float(region[3])
    return (focal * sx, focal * sy), (sx, sy)


def template_shifts(particles: ParticleSet, scale) -> np.ndarray:
    return np.array([pixel_shift((o[0] * scale[0], o[1] * scale[1])) for o in particles.occs],
                    dtype=np.int64).reshape(-1, 2)


def canvas_margin(particles: ParticleSet, scale) -> int:
    return int(np.abs(template_shifts(particles, scale)).max(initial=0)) + 2


class TemplateMaskMaker:
    """Renders (particle, model) pairs on a padded template canvas for one region."""

    def __init__(self, region, config: HierarchyConfig, focal: float, particles: ParticleSet):
        self.focal, self.scale = template_scale(region, config, focal)
        self.pad = canvas_margin(particles, self.scale)
        self.size = config.template + 2 * self.pad
        self.region = (self.pad, self.pad, config.template, config.template)

    def __call__(self, particle, cad: CadModel) -> SilhouetteMask:
        occ = (particle.occ[0] * self.scale[0], particle.occ[1] * self.scale[1])
        return project_mesh(cad, particle.pose(), occ, (self.size, self.size), self.focal)


def phi_cnt(region_hog, mask_maker, particles, cad: CadModel, region=None, n_cells: int | None = None,
            cell_px: int = 8, bins: int = 9, template: int = 64):
    """Best contour alignment over ``particles``: (value, index of the maximiser).

    Each particle's silhouette outline, clipped to ``region`` (mask
    coordinates), is described by HOG and scored by its inner product with
    the region's HOG divided by the number of HOG cells.
    """
    ref = region_hog.values if hasattr(region_hog, "values") else np.asarray(region_hog)
    n_cells = (template // cell_px) ** 2 if n_cells is None else n_cells
    best, arg = -math.inf, -1
    for k, p in enumerate(particles):
        try:
            mask = mask_maker(p, cad)
        except ValueError:
            continue
        r = region if region is not None else (0, 0, mask.width, mask.height)
        score = float(contour_hog(mask, r, cell_px, bins, template).values @ ref) / n_cells
        if score > best:
            best, arg = score, k
    if arg < 0:
        raise ValueError(f"every particle failed to render model {cad.id!r}")
    return best, arg


def contour_scores(region_hog: np.ndarray, particles: ParticleSet, cad: CadModel, region,
                   config: HierarchyConfig, focal: float) -> np.ndarray:
    """Alignment of every particle in ``particles`` (particle order); -inf where rendering fails.

    Renders once per (azimuth, elevation, distance) and reads each occlusion
    offset as a shifted window of the same outline.
    """
    (fx, fy), scale = template_scale(region, config, focal)
    pad = canvas_margin(particles, scale)
    T = config.template
    S = T + 2 * pad
    shifts = template_shifts(particles, scale)
    n_o = len(particles.occs)
    stack = np.zeros((len(particles), T, T))
    ok = np.ones(len(particles), dtype=bool)
    k = 0
    for a in particles.azimuths:
        for e in particles.elevations:
            for d in particles.distances:
                try:
                    bits = render_bits(cad, CameraPose(a, e, d), (S, S), (fx, fy))
                except ValueError:
                    ok[k:k + n_o] = False
                    k += n_o
                    continue
                outline = contour_of(bits)
                for dx, dy in shifts:
                    stack[k] = outline[pad - dy:pad - dy + T, pad - dx:pad - dx + T]
                    k += 1
    scores = hog_batch(stack, config.cell_px, config.bins) @ region_hog / config.hog_cells
    scores[~ok] = -np.inf
    return scores


# ---------------------------------------------------------------------------
# detector


class LogisticDetector:
    """Linear confidence over appearance vectors, z-scored with training statistics."""

    def __init__(self, weights, bias: float = 0.0, mean=None, scale=None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        self.mean = np.zeros_like(self.weights) if mean is None else np.asarray(mean, dtype=np.float64)
        self.scale = np.ones_like(self.weights) if scale is None else np.asarray(scale, dtype=np.float64)

    def score_features(self, app) -> float:
        x = (np.asarray(app) - self.mean) / self.scale
        return float(x @ self.weights + self.bias)

    def __call__(self, image, region, image_id=None, app=None, provider=None) -> float:
        if app is None:
            app = provider(image, region, image_id).values
        return self.score_features(app.values if isinstance(app, AppearanceVector) else app)

    def to_dict(self) -> dict:
        return {"kind": "logistic", "weights": self.weights.tolist(), "bias": self.bias,
                "mean": self.mean.tolist(), "scale": self.scale.tolist()}


class FileDetector:
    """Precomputed scores, one ``image_id x y w h 1 score`` record per region."""

    def __init__(self, table: dict):
        self.table = table

    @classmethod
    def from_file(cls, path):
        return cls(read_feature_file(path))

    def __call__(self, image, region, image_id=None, app=None, provider=None) -> float:
        key = region_key(image_id, region)
        try:
            return float(self.table[key][0])
        except KeyError:
            raise KeyError(f"no detector score for image {key[0]!r} region {key[1:]}") from None


def detector_from_dict(d: dict):
    if d["kind"] == "logistic":
        return LogisticDetector(d["weights"], d["bias"], d["mean"], d["scale"])
    if d["kind"] == "file":
        return FileDetector.from_file(d["path"])
    raise ValueError(f"unknown detector kind {d['kind']!r}")


def phi_det(image, region, detector, image_id=None, app=None, provider=None) -> float:
    return float(detector(image, region, image_id, app=app, provider=provider))


# ---------------------------------------------------------------------------
# bundles


def region_seed(seed: int, image_id, region) -> int:
    r = make_rng(seed, str(image_id), *[int(round(t)) for t in region])
    return int(r.integers(0, 2 ** 31 - 1))


@dataclass(eq=False)
class FeatureContext:
    """Read-only ingredients for turning a region into a :class:`PotentialBundle`."""

    config: HierarchyConfig
    cads: CadRegistry | None
    refs: DistanceReference | None
    provider: object
    detector: object

    def bundle(self, image, region, seed: int = 0, image_id: str = "",
               discrete: bool = False) -> PotentialBundle:
        cfg = self.config
        region = tuple(int(round(t)) for t in region)
        hog = compute_hog(image, region, cfg.cell_px, cfg.bins, cfg.template).values
        app = self.provider(image, region, image_id).values
        det = phi_det(image, region, self.detector, image_id, app=app, provider=self.provider)
        b = PotentialBundle(det, hog, app, region=region, image_id=str(image_id))
        if cfg.layers < 2:
            return b
        focal = cfg.focal_for(image.shape[1], image.shape[0])
        rseed = region_seed(seed, image_id, region)
        parts = [sample_particles(v, region, self.refs, cfg, rseed) for v in range(cfg.m)]
        if discrete:
            parts = [ps.anchor_only() for ps in parts]
        P = len(parts[0])
        b.all2 = np.empty((cfg.m, cfg.n, P))
        if cfg.layers >= 3:
            b.all3 = np.empty((cfg.m, cfg.n_finer, P))
        for v, ps in enumerate(parts):
            for s in range(cfg.n):
                b.all2[v, s] = contour_scores(hog, ps, self.cads.merged_model(cfg, s), region, cfg, focal)
            if cfg.layers >= 3:
                for f in range(cfg.n_finer):
                    b.all3[v, f] = contour_scores(hog, ps, self.cads.finer_model(cfg, f), region, cfg, focal)
        b.particles = parts
        return _reduce_particles(b, region)


def _reduce_particles(b: PotentialBundle, region) -> PotentialBundle:
    b.arg2 = np.argmax(b.all2, axis=-1)
    b.cnt2 = np.take_along_axis(b.all2, b.arg2[..., None], -1)[..., 0]
    ok = np.isfinite(b.cnt2).all()
    if b.all3 is not None:
        b.arg3 = np.argmax(b.all3, axis=-1)
        b.cnt3 = np.take_along_axis(b.all3, b.arg3[..., None], -1)[..., 0]
        ok = ok and np.isfinite(b.cnt3).all()
    if not ok:
        raise ValueError(f"every particle failed to render in region {region}")
    return b


def anchored(b: PotentialBundle) -> PotentialBundle:
    """The same region restricted to each bin's anchor particle."""
    if b.all2 is None:
        return b
    out = PotentialBundle(b.det, b.hog, b.app, region=b.region, image_id=b.image_id)
    out.all2 = b.all2[..., :1].copy()
    out.all3 = None if b.all3 is None else b.all3[..., :1].copy()
    out.particles = [ps.anchor_only() for ps in b.particles]
    return _reduce_particles(out, b.region)


# ---------------------------------------------------------------------------
# energy


def total_energy(bundle: PotentialBundle, a: LabelAssignment, w: WeightVector,
                 config: HierarchyConfig) -> EnergyBreakdown:
    """Evaluate each weighted term of the energy for assignment ``a``."""
    problem = validate_assignment(a, config)
    if problem is not None:
        raise ValueError(f"invalid assignment: {problem}")
    out = EnergyBreakdown()
    if a.o == 0:
        return out
    v, s, f = a.v1, a.s2, a.f
    out.terms[("det", 0)] = float(w.block("det")[0] * bundle.det)
    out.terms[("glb", 1)] = float(w.block("glb.1")[v] @ bundle.hog)
    out.terms[("loc", 1)] = float(w.block("loc.1")[v] @ bundle.app)
    if config.layers >= 2:
        if bundle.cnt2 is None:
            raise ValueError(f"no contour potential for sub-category {s} at bin {v}")
        out.terms[("glb", 2)] = float(w.block("glb.2")[v, s] @ bundle.hog)
        out.terms[("loc", 2)] = float(w.block("loc.2")[v, s] @ bundle.app)
        out.terms[("cnt", 2)] = float(w.block("cnt.2")[s] * bundle.cnt2[v, s])
        out.terms[("vw", 1)] = float(w.block("vw.1")[0])
    if config.layers >= 3:
        if f is not None:
            if bundle.cnt3 is None:
                raise ValueError(f"no contour potential for finer-sub-category {f} at bin {v}")
            out.terms[("glb", 3)] = float(w.block("glb.3")[v, f] @ bundle.hog)
            out.terms[("loc", 3)] = float(w.block("loc.3")[v, f] @ bundle.app)
            out.terms[("cnt", 3)] = float(w.block("cnt.3")[f] * bundle.cnt3[v, f])
        out.terms[("vw", 2)] = float(w.block("vw.2")[0])
        out.terms[("sb", 2)] = float(w.block("sb.2")[0])
    return out
