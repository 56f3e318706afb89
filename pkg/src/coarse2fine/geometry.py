"""Triangle meshes, the spherical pinhole camera, silhouettes and voxel merging.

Conventions
-----------
Object frame: x points to the object's front, z up. A camera at azimuth ``a``
and elevation ``e`` sits at ``d * (sin a cos e, -cos a cos e, sin e)`` looking
at the origin with zero roll, so azimuth 0 is a side view with the front on
the right of the image and azimuth pi/2 looks at the front.

Image frame: pixel (i, j) is row i, column j and covers the unit square whose
centre is (j + 0.5, i + 0.5). The principal point is the viewport centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._raster import scan_fill

TAU = 2.0 * math.pi
NEAR_PLANE = 1e-6


def wrap_angle(a: float) -> float:
    """Wrap to [0, 2pi), rounded to 1e-12 rad so a and a + 2pi agree bit-for-bit."""
    w = round(math.fmod(float(a), TAU), 12)
    if w < 0:
        w = round(w + TAU, 12)
    if w >= TAU:
        w = 0.0
    return w


@dataclass(frozen=True, eq=False)
class CadModel:
    vertices: np.ndarray
    faces: np.ndarray
    id: str = ""

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(v) < 3:
            raise ValueError(f"mesh {self.id!r} needs at least 3 vertices, got {len(v)}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError(f"mesh {self.id!r} has face indices outside [0, {len(v)})")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def with_id(self, new_id: str) -> "CadModel":
        return CadModel(self.vertices, self.faces, new_id)


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        if not (self.distance > 0 and math.isfinite(self.distance)):
            raise ValueError(f"camera distance must be positive, got {self.distance}")
        if not (-1e-12 <= self.elevation <= math.pi / 2 + 1e-12):
            raise ValueError(f"elevation {self.elevation} outside [0, pi/2]")
        object.__setattr__(self, "azimuth", wrap_angle(self.azimuth))
        object.__setattr__(self, "elevation", float(min(max(self.elevation, 0.0), math.pi / 2)))
        object.__setattr__(self, "distance", float(self.distance))


@dataclass(frozen=True, eq=False)
class SilhouetteMask:
    bits: np.ndarray
    contour: np.ndarray = field(default=None)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        contour = contour_of(bits) if self.contour is None else np.asarray(self.contour, dtype=bool)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "contour", contour)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def bbox(self):
        """Tight (x, y, w, h) pixel rectangle of the silhouette, or None when empty."""
        rows = np.flatnonzero(self.bits.any(axis=1))
        cols = np.flatnonzero(self.bits.any(axis=0))
        if len(rows) == 0:
            return None
        return (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Per-cell count of source models having at least one vertex in the cell."""

    resolution: int
    counts: np.ndarray
    n_models: int = 1
    tau: float = 1.0

    @property
    def threshold(self) -> int:
        return max(1, math.ceil(self.tau * self.n_models - 1e-9))

    @property
    def occupancy(self) -> np.ndarray:
        return self.counts >= self.threshold

    def occupied_cells(self) -> np.ndarray:
        return np.argwhere(self.occupancy)


# ---------------------------------------------------------------------------
# meshes


def normalize_mesh(model: CadModel) -> CadModel:
    """Centre the bounding box on the origin and scale its diagonal to 1."""
    lo, hi = model.bounds
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0.0 or not math.isfinite(diag):
        raise ValueError(f"mesh {model.id!r} is degenerate (zero extent)")
    centre = 0.5 * (lo + hi)
    return CadModel((model.vertices - centre) / diag, model.faces, model.id)


def camera_frame(pose: CameraPose):
    """Rows of the returned matrix are the camera right, up and forward axes."""
    a, e = pose.azimuth, pose.elevation
    ca, sa, ce, se = math.cos(a), math.sin(a), math.cos(e), math.sin(e)
    # up = right x forward, written out
    return np.array([[ca, sa, 0.0],
                     [-sa * se, ca * se, ce],
                     [-sa * ce, ca * ce, -se]])


def default_focal(width: int, height: int) -> float:
    # a unit-diagonal object at distance 3 spans half the viewport
    return 1.5 * min(width, height)


def project_points(vertices, pose: CameraPose, focal, principal):
    """Pixel coordinates (x, y) and camera depths of object-frame points."""
    fx, fy = (focal, focal) if np.isscalar(focal) else focal
    cam = np.asarray(vertices, dtype=np.float64) @ camera_frame(pose).T
    depth = cam[:, 2] + pose.distance
    if depth.min() <= NEAR_PLANE:
        raise ValueError(
            f"camera at distance {pose.distance} is inside the model; the mesh crosses the image plane"
        )
    xs = principal[0] + fx * cam[:, 0] / depth
    ys = principal[1] - fy * cam[:, 1] / depth
    return xs, ys, depth


def rasterize(xs, ys, faces, width: int, height: int) -> np.ndarray:
    """Binary coverage of every projected triangle (back faces included)."""
    out = np.zeros((height, width), dtype=np.uint8)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if len(faces):
        scan_fill(out, np.ascontiguousarray(xs), np.ascontiguousarray(ys), faces,
                  np.ones(len(faces), dtype=np.uint8))
    return out.astype(bool)


def contour_of(bits: np.ndarray) -> np.ndarray:
    """On-pixels with at least one 4-neighbour off (outside the frame counts as off)."""
    p = np.pad(bits, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return bits & ~interior


def shift_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate by whole pixels (+x right, +y down), filling with zeros."""
    out = np.zeros_like(img)
    H, W = img.shape
    if abs(dx) >= W or abs(dy) >= H:
        return out
    src_y = slice(max(0, -dy), min(H, H - dy))
    dst_y = slice(max(0, dy), min(H, H + dy))
    src_x = slice(max(0, -dx), min(W, W - dx))
    dst_x = slice(max(0, dx), min(W, W + dx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def pixel_shift(occ) -> tuple[int, int]:
    return int(np.rint(occ[0])), int(np.rint(occ[1]))


def render_bits(model: CadModel, pose: CameraPose, viewport, focal=None, principal=None) -> np.ndarray:
    width, height = viewport
    if focal is None:
        focal = default_focal(width, height)
    if principal is None:
        principal = (width / 2.0, height / 2.0)
    xs, ys, _ = project_points(model.vertices, pose, focal, principal)
    return rasterize(xs, ys, model.faces, width, height)


def project_mesh(model: CadModel, pose: CameraPose, occ=(0.0, 0.0), viewport=(64, 64),
                 focal=None) -> SilhouetteMask:
    """Perspective silhouette of ``model`` translated by ``occ`` pixels.

    The translation is applied after rasterisation and rounded to whole
    pixels; parts moved outside the viewport are lost.
    """
    width, height = viewport
    if width < 8 or height < 8:
        raise ValueError(f"viewport {viewport} smaller than 8x8")
    bits = render_bits(model, pose, (width, height), focal)
    dx, dy = pixel_shift(occ)
    if dx or dy:
        bits = shift_image(bits, dx, dy)
    return SilhouetteMask(bits)


# ---------------------------------------------------------------------------
# voxels


def voxelize(model, resolution: int = 32) -> VoxelGrid:
    """Mark every cell of the [-1/2, 1/2]^3 grid that holds at least one vertex."""
    if resolution < 2:
        raise ValueError("voxel resolution must be >= 2")
    verts = model.vertices if isinstance(model, CadModel) else np.asarray(model, dtype=np.float64)
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    if len(verts) == 0:
        raise ValueError("cannot voxelize an empty vertex list")
    idx = np.clip(np.floor((verts + 0.5) * resolution).astype(np.int64), 0, resolution - 1)
    counts = np.zeros((resolution,) * 3, dtype=np.int64)
    counts[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return VoxelGrid(resolution, counts, 1, 1.0)


def voxel_counts(models, resolution: int = 32, tau: float = 0.5) -> VoxelGrid:
    total = np.zeros((resolution,) * 3, dtype=np.int64)
    for m in models:
        total += voxelize(m, resolution).counts
    return VoxelGrid(resolution, total, len(models), tau)


def voxel_surface(kept: np.ndarray, model_id: str = "") -> CadModel:
    """Exposed cell faces of a boolean voxel set, each quad split into two triangles."""
    r = kept.shape[0]
    corners = []
    offsets = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
    for ax in range(3):
        u, v = (ax + 1) % 3, (ax + 2) % 3
        for sign in (1, -1):
            neighbour = np.zeros_like(kept)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if sign > 0:
                src[ax], dst[ax] = slice(1, None), slice(None, -1)
            else:
                src[ax], dst[ax] = slice(None, -1), slice(1, None)
            neighbour[tuple(dst)] = kept[tuple(src)]
            cells = np.argwhere(kept & ~neighbour)
            if len(cells) == 0:
                continue
            order = offsets if sign > 0 else offsets[::-1]
            quad = np.repeat(cells[:, None, :], 4, axis=1)
            quad[:, :, ax] += 1 if sign > 0 else 0
            quad[:, :, u] += order[:, 0]
            quad[:, :, v] += order[:, 1]
            corners.append(quad)
    if not corners:
        raise ValueError("empty voxel set has no surface")
    quads = np.concatenate(corners)
    lattice, inverse = np.unique(quads.reshape(-1, 3), axis=0, return_inverse=True)
    q = inverse.reshape(-1, 4)
    faces = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])
    return CadModel(lattice / r - 0.5, faces, model_id)


def merge_cad_models(models, resolution: int = 32, tau: float = 0.5, model_id: str = "") -> CadModel:
    """Coarse model: surface of cells holding vertices of at least ceil(tau*K) of the K models."""
    if not models:
        raise ValueError("need at least one model to merge")
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"merge fraction must lie in (0, 1], got {tau}")
    grid = voxel_counts(models, resolution, tau)
    kept = grid.occupancy
    if not kept.any():
        raise ValueError(
            f"no voxel is shared by {grid.threshold} of {len(models)} models; lower the merge fraction"
        )
    return voxel_surface(kept, model_id)


# ---------------------------------------------------------------------------
# I/O


def load_obj(path, model_id: str | None = None) -> CadModel:
    """Read ``v`` and ``f`` records; polygons are fan-split into triangles."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    k = int(tok.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed OBJ record {line!r}") from exc
    return CadModel(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3),
                    Path(path).stem if model_id is None else model_id)


def save_obj(model: CadModel, path) -> None:
    lines = [f"# {model.id}"]
    lines += ["v %.17g %.17g %.17g" % tuple(v) for v in model.vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in model.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def save_voxels(grid: VoxelGrid, path) -> None:
    cells = grid.occupied_cells()
    lines = [f"resolution {grid.resolution}"] + ["%d %d %d" % tuple(c) for c in cells]
    Path(path).write_text("\n".join(lines) + "\n")


def load_voxels(path) -> VoxelGrid:
    lines = Path(path).read_text().split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "resolution":
        raise ValueError(f"{path}:1: expected 'resolution <n>'")
    r = int(head[1])
    counts = np.zeros((r, r, r), dtype=np.int64)
    for line in lines[1:]:
        if line.strip():
            x, y, z = (int(t) for t in line.split())
            counts[x, y, z] = 1
    return VoxelGrid(r, counts)
