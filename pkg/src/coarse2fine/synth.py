"""Procedural shape library and shaded synthetic scenes with exact ground truth.

Two sub-categories with two finer variants each: a "jet" (swept or straight
wings) and a "boat" (deck cabin or mast). Every part is a hexahedron whose
faces are subdivided finely enough that vertex voxelization sees a closed
shell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._raster import scan_fill
from .dataio import Annotation, DatasetManifest, ImageRecord, Proposal, save_manifest, write_pgm
from .geometry import (
    CadModel, CameraPose, SilhouetteMask, default_focal, normalize_mesh, project_points,
    render_bits, save_obj,
)
from .inference import box_iou
from .model import ContinuousViewpoint, azimuth_bin
from .sampling import make_rng

SPACING = 0.035

# corner order: bottom face (z-) counter-clockwise from (-x, -y), then the top face
_HEX_FACES = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7)]


def box_corners(x0, x1, y0, y1, z0, z1) -> np.ndarray:
    return np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                     [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]], dtype=np.float64)


def hexahedron(corners, spacing: float = SPACING):
    """Vertices and triangles of a hexahedron with each face bilinearly subdivided."""
    corners = np.asarray(corners, dtype=np.float64)
    verts, faces = [], []
    base = 0
    for q in _HEX_FACES:
        p00, p10, p11, p01 = corners[list(q)]
        nu = max(1, int(math.ceil(max(np.linalg.norm(p10 - p00), np.linalg.norm(p11 - p01)) / spacing)))
        nv = max(1, int(math.ceil(max(np.linalg.norm(p01 - p00), np.linalg.norm(p11 - p10)) / spacing)))
        u = np.linspace(0.0, 1.0, nu + 1)[None, :, None]
        v = np.linspace(0.0, 1.0, nv + 1)[:, None, None]
        grid = (1 - u) * (1 - v) * p00 + u * (1 - v) * p10 + u * v * p11 + (1 - u) * v * p01
        verts.append(grid.reshape(-1, 3))
        idx = base + np.arange((nv + 1) * (nu + 1)).reshape(nv + 1, nu + 1)
        a, b, c, d = idx[:-1, :-1], idx[:-1, 1:], idx[1:, 1:], idx[1:, :-1]
        faces.append(np.stack([a, b, c], -1).reshape(-1, 3))
        faces.append(np.stack([a, c, d], -1).reshape(-1, 3))
        base += grid.shape[0] * grid.shape[1]
    return np.concatenate(verts), np.concatenate(faces)


def assemble(parts, model_id: str) -> CadModel:
    verts, faces, off = [], [], 0
    for corners in parts:
        v, f = hexahedron(corners)
        verts.append(v)
        faces.append(f + off)
        off += len(v)
    return normalize_mesh(CadModel(np.concatenate(verts), np.concatenate(faces), model_id))


def _swept_wing(root_lead, root_chord, tip_lead, tip_chord, span, z, thick):
    """Two trapezoids meeting on the centreline, as one hexahedron per side."""
    parts = []
    for side in (-1.0, 1.0):
        y0, y1 = (0.0, side * span) if side > 0 else (side * span, 0.0)
        lead0, lead1 = (root_lead, tip_lead) if side > 0 else (tip_lead, root_lead)
        ch0, ch1 = (root_chord, tip_chord) if side > 0 else (tip_chord, root_chord)
        # corners: (-x,y0) (+x,y0) (+x,y1) (-x,y1) with x ranges per span station
        bottom = [[lead0 - ch0, y0, z], [lead0, y0, z], [lead1, y1, z], [lead1 - ch1, y1, z]]
        top = [[p[0], p[1], z + thick] for p in bottom]
        parts.append(np.array(bottom + top))
    return parts


def jet(swept: bool) -> CadModel:
    fuselage = box_corners(-0.45, 0.40, -0.05, 0.05, -0.05, 0.05)
    nose = np.array([[0.40, -0.05, -0.05], [0.60, -0.01, -0.02], [0.60, 0.01, -0.02], [0.40, 0.05, -0.05],
                     [0.40, -0.05, 0.05], [0.60, -0.01, 0.00], [0.60, 0.01, 0.00], [0.40, 0.05, 0.05]])
    fin = np.array([[-0.45, -0.01, 0.05], [-0.30, -0.01, 0.05], [-0.30, 0.01, 0.05], [-0.45, 0.01, 0.05],
                    [-0.50, -0.01, 0.25], [-0.42, -0.01, 0.25], [-0.42, 0.01, 0.25], [-0.50, 0.01, 0.25]])
    if swept:
        wings = _swept_wing(0.20, 0.30, -0.20, 0.10, 0.42, -0.02, 0.03)
        tail = _swept_wing(-0.32, 0.12, -0.44, 0.06, 0.16, 0.0, 0.02)
        name = "jet-swept"
    else:
        wings = [box_corners(-0.08, 0.14, -0.48, 0.48, -0.02, 0.01)]
        tail = [box_corners(-0.44, -0.34, -0.18, 0.18, 0.0, 0.02)]
        name = "jet-straight"
    return assemble([fuselage, nose, fin, *wings, *tail], name)


def boat(mast: bool) -> CadModel:
    # hull narrows to a bow at +x and sits lower at the stern
    hull = np.array([[-0.45, -0.10, -0.06], [0.30, -0.08, -0.08], [0.30, 0.08, -0.08], [-0.45, 0.10, -0.06],
                     [-0.45, -0.16, 0.06], [0.30, -0.16, 0.06], [0.30, 0.16, 0.06], [-0.45, 0.16, 0.06]])
    bow = np.array([[0.30, -0.08, -0.08], [0.55, -0.01, 0.00], [0.55, 0.01, 0.00], [0.30, 0.08, -0.08],
                    [0.30, -0.16, 0.06], [0.60, -0.01, 0.08], [0.60, 0.01, 0.08], [0.30, 0.16, 0.06]])
    if mast:
        parts = [hull, bow,
                 box_corners(-0.40, -0.22, -0.09, 0.09, 0.06, 0.14),
                 box_corners(0.02, 0.06, -0.02, 0.02, 0.06, 0.48),
                 box_corners(-0.30, 0.06, -0.015, 0.015, 0.16, 0.19)]
        name = "boat-mast"
    else:
        parts = [hull, bow,
                 box_corners(-0.38, 0.05, -0.12, 0.12, 0.06, 0.22),
                 box_corners(-0.30, -0.05, -0.09, 0.09, 0.22, 0.28)]
        name = "boat-cabin"
    return assemble(parts, name)


def shape_library() -> dict:
    """finer name -> (sub-category, CadModel)."""
    return {
        "jet-swept": ("jet", jet(True)),
        "jet-straight": ("jet", jet(False)),
        "boat-cabin": ("boat", boat(False)),
        "boat-mast": ("boat", boat(True)),
    }


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SynthSpec:
    n_scenes: int = 10
    seed: int = 0
    split: str = "train"
    image_size: int = 128
    elevation_range: tuple = (0.1, 0.6)
    distance_range: tuple = (2.4, 3.6)
    centre_jitter: float = 12.0
    background_level: float = 110.0
    background_contrast: float = 35.0
    pixel_noise: float = 4.0
    n_jittered: int = 2
    n_negatives: int = 3
    finer: tuple = field(default=("jet-swept", "jet-straight", "boat-cabin", "boat-mast"))

    def __post_init__(self):
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be non-negative")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        lib = set(shape_library_names())
        unknown = [f for f in self.finer if f not in lib]
        if unknown:
            raise ValueError(f"unknown shapes {unknown}")
        subcats = {_SUBCAT[f] for f in self.finer}
        if len(subcats) < 2 or any(sum(_SUBCAT[f] == s for f in self.finer) < 2 for s in subcats):
            raise ValueError("need at least 2 sub-categories with at least 2 finer variants each")
        lo, hi = self.elevation_range
        if not 0 <= lo <= hi <= math.pi / 2:
            raise ValueError("elevation range must lie in [0, pi/2]")
        if not 0 < self.distance_range[0] <= self.distance_range[1]:
            raise ValueError("distance range must be positive")


_SUBCAT = {"jet-swept": "jet", "jet-straight": "jet", "boat-cabin": "boat", "boat-mast": "boat"}


def shape_library_names():
    return tuple(_SUBCAT)


LIGHT = np.array([0.4, -0.5, 0.77])


def face_shades(model: CadModel) -> np.ndarray:
    v = model.vertices[model.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    return 90.0 + 140.0 * np.abs(n @ (LIGHT / np.linalg.norm(LIGHT)))


def shade_object(model: CadModel, pose: CameraPose, size, focal, principal) -> tuple:
    """(intensity image, coverage mask); faces filled far to near."""
    W, H = size
    xs, ys, depth = project_points(model.vertices, pose, focal, principal)
    order = np.argsort(-depth[model.faces].mean(1), kind="stable")
    out = np.zeros((H, W), dtype=np.float64)
    scan_fill(out, xs, ys, np.ascontiguousarray(model.faces[order]), face_shades(model)[order])
    mask = render_bits(model, pose, (W, H), focal, principal)
    return out, mask


def background(rng, size, level, contrast) -> np.ndarray:
    W, H = size
    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (H, W)), 3.0, mode="wrap")
    noise /= max(noise.std(), 1e-12)
    return level + contrast * noise


def jitter_box(rng, box, size, min_iou: float, tries: int = 200):
    x, y, w, h = box
    W, H = size
    for _ in range(tries):
        nw = int(round(w * rng.uniform(0.85, 1.15)))
        nh = int(round(h * rng.uniform(0.85, 1.15)))
        nx = int(round(x + w * rng.uniform(-0.12, 0.12)))
        ny = int(round(y + h * rng.uniform(-0.12, 0.12)))
        nx, ny = max(0, min(nx, W - nw)), max(0, min(ny, H - nh))
        cand = (nx, ny, min(nw, W - nx), min(nh, H - ny))
        if cand[2] >= 16 and cand[3] >= 16 and box_iou(cand, box) >= min_iou and cand != tuple(box):
            return cand
    return None


def negative_box(rng, box, size, max_iou: float, tries: int = 200):
    W, H = size
    for _ in range(tries):
        w = int(rng.integers(24, W // 2 + 1))
        h = int(rng.integers(24, H // 2 + 1))
        cand = (int(rng.integers(0, W - w + 1)), int(rng.integers(0, H - h + 1)), w, h)
        if box_iou(cand, box) < max_iou:
            return cand
    return None


def render_scene(spec: SynthSpec, k: int, models: dict):
    """Image, mask, annotation and proposals of scene ``k``."""
    rng = make_rng(spec.seed, spec.split, k)
    S = spec.image_size
    focal = default_focal(S, S)
    while True:
        finer = spec.finer[int(rng.integers(len(spec.finer)))]
        subcat, cad = models[finer]
        pose = CameraPose(rng.uniform(0.0, 2 * math.pi), rng.uniform(*spec.elevation_range),
                          rng.uniform(*spec.distance_range))
        principal = (S / 2.0 + rng.uniform(-1, 1) * spec.centre_jitter,
                     S / 2.0 + rng.uniform(-1, 1) * spec.centre_jitter)
        obj, mask = shade_object(cad, pose, (S, S), focal, principal)
        bx, by, bw, bh = SilhouetteMask(mask).bbox()
        # keep the object clear of the frame so its box is exact
        if bw >= 12 and bh >= 12 and bx > 0 and by > 0 and bx + bw < S and by + bh < S:
            break
    img = background(rng, (S, S), spec.background_level, spec.background_contrast)
    img[mask] = obj[mask]
    img = img + rng.normal(0.0, spec.pixel_noise, img.shape)
    box = (bx, by, bw, bh)
    occ = (principal[0] - (bx + bw / 2.0), principal[1] - (by + bh / 2.0))
    vp = ContinuousViewpoint(pose.azimuth, pose.elevation, pose.distance, occ)
    props = [box]
    for _ in range(spec.n_jittered):
        j = jitter_box(rng, box, (S, S), 0.6)
        if j is not None:
            props.append(j)
    for _ in range(spec.n_negatives):
        n = negative_box(rng, box, (S, S), 0.3)
        if n is not None:
            props.append(n)
    return img, mask, vp, box, subcat, finer, props


def write_library(out_dir, names=None) -> dict:
    """Save the OBJ files; returns finer -> (sub-category, path relative to ``out_dir``)."""
    out_dir = Path(out_dir)
    (out_dir / "cads").mkdir(parents=True, exist_ok=True)
    lib = shape_library()
    out = {}
    for f in names or lib:
        s, model = lib[f]
        save_obj(model, out_dir / "cads" / f"{f}.obj")
        out[f] = (s, f"cads/{f}.obj")
    return out


def generate_synthetic(spec: SynthSpec, out_dir, bins: int = 8) -> DatasetManifest:
    """Render ``spec.n_scenes`` scenes under ``out_dir/<split>`` and write its manifest.

    The CAD library goes to ``out_dir/cads`` and is shared by all splits.
    """
    out_dir = Path(out_dir)
    split_dir = out_dir / spec.split
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    cads = write_library(out_dir, spec.finer)
    lib = shape_library()
    models = {f: lib[f] for f in spec.finer}
    m = DatasetManifest(root=split_dir)
    m.cads = {f: (s, f"../{p}") for f, (s, p) in cads.items()}
    S = spec.image_size
    for k in range(spec.n_scenes):
        img, mask, vp, box, subcat, finer, props = render_scene(spec, k, models)
        iid = f"{spec.split}{k:05d}"
        write_pgm(split_dir / "images" / f"{iid}.pgm", img)
        write_pgm(split_dir / "images" / f"{iid}_mask.pgm", mask.astype(np.float64) * 255)
        m.images[iid] = ImageRecord(iid, f"images/{iid}.pgm", S, S, f"images/{iid}_mask.pgm")
        m.annotations.append(Annotation(iid, box, 1, azimuth_bin(vp.azimuth, bins), vp, subcat, finer))
        m.proposals.extend(Proposal(iid, p) for p in props)
    save_manifest(m, split_dir / "manifest.txt")
    return m
