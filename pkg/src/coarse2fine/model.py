"""Label spaces of the three-layer hierarchy, joint assignments and the blocked weight vector.

The energy of an assignment is linear in the weights, E(x, y; w) = <w, psi(x, y)>,
where psi drops the region's detector score, HOG and appearance vectors into
the blocks selected by the labels. The background hypothesis maps to the
zero vector, so its energy is always 0.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TAU, CadModel, CameraPose, merge_cad_models, wrap_angle


@dataclass(frozen=True)
class HierarchyConfig:
    subcategories: tuple
    finer: tuple
    m: int = 8
    layers: int = 3
    sample_counts: tuple = (5, 3, 2, 2)
    sigma_a: float | None = None
    sigma_e: float = 0.0
    mu_e: float = 0.0
    occ_factor: float = 0.15
    C: float = 1.0
    focal: float | None = None
    template: int = 64
    cell_px: int = 8
    bins: int = 9
    merge_tau: float = 0.5
    voxel_resolution: int = 32

    def __post_init__(self):
        object.__setattr__(self, "subcategories", tuple(self.subcategories))
        object.__setattr__(self, "finer", tuple(tuple(f) for f in self.finer))
        object.__setattr__(self, "sample_counts", tuple(int(c) for c in self.sample_counts))
        if self.m < 2:
            raise ValueError("need at least 2 azimuth bins")
        if self.layers not in (1, 2, 3):
            raise ValueError(f"layers must be 1, 2 or 3, got {self.layers}")
        if len(self.finer) != len(self.subcategories):
            raise ValueError("one finer-sub-category list per sub-category is required")
        if any(len(f) == 0 for f in self.finer):
            raise ValueError("every sub-category needs at least one finer-sub-category")
        names = self.finer_names
        if len(set(names)) != len(names):
            raise ValueError("finer-sub-category names must be unique")
        if len(self.sample_counts) != 4 or min(self.sample_counts) < 1:
            raise ValueError("sample_counts must be four positive integers (az, el, dist, occ)")

    @property
    def n(self) -> int:
        return len(self.subcategories)

    @property
    def finer_names(self) -> tuple:
        return tuple(f for group in self.finer for f in group)

    @property
    def n_finer(self) -> int:
        return len(self.finer_names)

    @property
    def finer_subcat(self) -> np.ndarray:
        return np.array([s for s, group in enumerate(self.finer) for _ in group], dtype=np.int64)

    def finer_of(self, s: int) -> list[int]:
        return [f for f, sf in enumerate(self.finer_subcat) if sf == s]

    def subcat_index(self, name: str) -> int:
        return self.subcategories.index(name)

    def finer_index(self, name: str) -> int:
        return self.finer_names.index(name)

    @property
    def n_particles(self) -> int:
        return math.prod(self.sample_counts)

    @property
    def azimuth_sigma(self) -> float:
        # a third of one azimuth section
        return (TAU / self.m) / 3.0 if self.sigma_a is None else self.sigma_a

    def bin_center(self, v: int) -> float:
        return v * TAU / self.m

    @property
    def hog_dim(self) -> int:
        return (self.template // self.cell_px) ** 2 * self.bins

    @property
    def hog_cells(self) -> int:
        return (self.template // self.cell_px) ** 2

    def focal_for(self, width: int, height: int) -> float:
        return 1.5 * min(width, height) if self.focal is None else self.focal

    def truncated(self, layers: int) -> "HierarchyConfig":
        return HierarchyConfig(**{**self.to_dict(), "layers": layers})

    def to_dict(self) -> dict:
        return {
            "subcategories": list(self.subcategories),
            "finer": [list(f) for f in self.finer],
            "m": self.m, "layers": self.layers, "sample_counts": list(self.sample_counts),
            "sigma_a": self.sigma_a, "sigma_e": self.sigma_e, "mu_e": self.mu_e,
            "occ_factor": self.occ_factor, "C": self.C, "focal": self.focal,
            "template": self.template, "cell_px": self.cell_px, "bins": self.bins,
            "merge_tau": self.merge_tau, "voxel_resolution": self.voxel_resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchyConfig":
        return cls(**d)


def azimuth_bin(azimuth: float, m: int) -> int:
    """Bin whose centre is nearest; bin 0 spans [-pi/m, pi/m)."""
    return int(math.floor(wrap_angle(azimuth) / (TAU / m) + 0.5)) % m


@dataclass(frozen=True)
class ContinuousViewpoint:
    azimuth: float
    elevation: float
    distance: float
    occ: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError(f"distance must be positive, got {self.distance}")
        if not (-1e-12 <= self.elevation <= math.pi / 2 + 1e-12):
            raise ValueError(f"elevation {self.elevation} outside [0, pi/2]")
        object.__setattr__(self, "azimuth", wrap_angle(self.azimuth))
        object.__setattr__(self, "elevation", float(min(max(self.elevation, 0.0), math.pi / 2)))
        object.__setattr__(self, "distance", float(self.distance))
        object.__setattr__(self, "occ", (float(self.occ[0]), float(self.occ[1])))

    def pose(self) -> CameraPose:
        return CameraPose(self.azimuth, self.elevation, self.distance)

    def mirrored(self) -> "ContinuousViewpoint":
        """Viewpoint of a left-right symmetric object seen in the flipped image."""
        return ContinuousViewpoint(math.pi - self.azimuth, self.elevation, self.distance,
                                   (-self.occ[0], self.occ[1]))


@dataclass(frozen=True)
class LabelAssignment:
    """Joint hypothesis for one region. ``None`` plays the background label."""

    o: int
    v1: int | None = None
    v2: int | None = None
    v3: int | None = None
    s2: int | None = None
    s3: int | None = None
    f: int | None = None
    cv2: ContinuousViewpoint | None = field(default=None, compare=False)
    cv3: ContinuousViewpoint | None = field(default=None, compare=False)

    @classmethod
    def background(cls) -> "LabelAssignment":
        return cls(0)

    @classmethod
    def foreground(cls, v: int, s: int | None = None, f: int | None = None, layers: int = 3,
                   cv2=None, cv3=None) -> "LabelAssignment":
        return cls(
            1, v,
            v if layers >= 2 else None,
            v if layers >= 3 else None,
            s if layers >= 2 else None,
            s if layers >= 3 else None,
            f if layers >= 3 else None,
            cv2 if layers >= 2 else None,
            cv3 if layers >= 3 else None,
        )

    @property
    def is_background(self) -> bool:
        return self.o == 0

    @property
    def labels(self) -> tuple:
        return (self.o, self.v1, self.s2, self.f)

    @property
    def viewpoint(self) -> ContinuousViewpoint | None:
        """Finest available continuous viewpoint."""
        return self.cv3 if self.cv3 is not None else self.cv2


def validate_assignment(a: LabelAssignment, config: HierarchyConfig) -> str | None:
    """Name of the first violated invariant, or None when the assignment is valid."""
    if a.o not in (0, 1):
        return "object label"
    labels = (a.v1, a.v2, a.v3, a.s2, a.s3, a.f)
    if a.o == 0:
        if any(x is not None for x in labels) or a.cv2 is not None or a.cv3 is not None:
            return "background purity"
        return None
    L = config.layers
    if a.v1 is None:
        return "missing viewpoint"
    if not 0 <= a.v1 < config.m:
        return "viewpoint range"
    deeper = {2: (a.v2, a.s2, a.cv2), 3: (a.v3, a.s3, a.f, a.cv3)}
    for layer, vals in deeper.items():
        if layer > L and any(x is not None for x in vals):
            return "layer depth"
    if L >= 2:
        if a.v2 != a.v1:
            return "viewpoint consistency"
        if a.s2 is None:
            return "missing sub-category"
        if not 0 <= a.s2 < config.n:
            return "sub-category range"
    if L >= 3:
        if a.v3 != a.v2:
            return "viewpoint consistency"
        if a.s3 != a.s2:
            return "sub-category consistency"
        if a.f is not None:
            if not 0 <= a.f < config.n_finer:
                return "finer range"
            if config.finer_subcat[a.f] != a.s3:
                return "finer membership"
    return None


def enumerate_assignments(config: HierarchyConfig) -> list[tuple]:
    """Foreground label triples (v, s, f) in search order; background precedes them all.

    For each sub-category its finer labels come first and the background finer
    label (None) last.
    """
    out = []
    for v in range(config.m):
        if config.layers == 1:
            out.append((v, None, None))
            continue
        for s in range(config.n):
            if config.layers == 2:
                out.append((v, s, None))
                continue
            for f in config.finer_of(s):
                out.append((v, s, f))
            out.append((v, s, None))
    return out


# ---------------------------------------------------------------------------
# weights

FROZEN_BLOCKS = ("vw.1", "vw.2", "sb.2")


@dataclass(frozen=True)
class WeightLayout:
    """Named blocks of the flat parameter vector."""

    blocks: tuple  # (name, offset, shape)
    config_hash: str

    @classmethod
    def build(cls, config: HierarchyConfig, app_dim: int) -> "WeightLayout":
        H, A, m, n, nf = config.hog_dim, app_dim, config.m, config.n, config.n_finer
        spec = [("det", (1,)), ("glb.1", (m, H)), ("loc.1", (m, A))]
        if config.layers >= 2:
            spec += [("glb.2", (m, n, H)), ("loc.2", (m, n, A)), ("cnt.2", (n,)), ("vw.1", (1,))]
        if config.layers >= 3:
            spec += [("glb.3", (m, nf, H)), ("loc.3", (m, nf, A)), ("cnt.3", (nf,)),
                     ("vw.2", (1,)), ("sb.2", (1,))]
        blocks, off = [], 0
        for name, shape in spec:
            blocks.append((name, off, shape))
            off += math.prod(shape)
        return cls(tuple(blocks), structure_hash(config, app_dim))

    @property
    def size(self) -> int:
        name, off, shape = self.blocks[-1]
        return off + math.prod(shape)

    def slice(self, name: str) -> tuple[slice, tuple]:
        for b, off, shape in self.blocks:
            if b == name:
                return slice(off, off + math.prod(shape)), shape
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(b == name for b, _, _ in self.blocks)

    def learnable_mask(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        for name in FROZEN_BLOCKS:
            if self.has(name):
                mask[self.slice(name)[0]] = False
        return mask


def structure_hash(config: HierarchyConfig, app_dim: int) -> str:
    key = {"m": config.m, "layers": config.layers, "subcategories": list(config.subcategories),
           "finer": [list(f) for f in config.finer], "hog_dim": config.hog_dim, "app_dim": app_dim}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


class WeightVector:
    """Flat float64 coefficients with named block views."""

    MAGIC = b"COARSE2FINE-WEIGHTS 1\n"

    def __init__(self, layout: WeightLayout, values=None):
        self.layout = layout
        self.values = np.zeros(layout.size) if values is None else np.asarray(values, dtype=np.float64)
        if self.values.shape != (layout.size,):
            raise ValueError(f"expected {layout.size} coefficients, got {self.values.shape}")

    def block(self, name: str) -> np.ndarray:
        sl, shape = self.layout.slice(name)
        return self.values[sl].reshape(shape)

    def copy(self) -> "WeightVector":
        return WeightVector(self.layout, self.values.copy())

    def __eq__(self, other):
        return (isinstance(other, WeightVector) and self.layout == other.layout
                and np.array_equal(self.values, other.values))

    def to_bytes(self) -> bytes:
        header = {
            "config_hash": self.layout.config_hash,
            "dtype": "<f8",
            "length": self.layout.size,
            "blocks": [[name, off, math.prod(shape), list(shape)] for name, off, shape in self.layout.blocks],
        }
        return self.MAGIC + json.dumps(header).encode() + b"\n" + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightVector":
        if not data.startswith(cls.MAGIC):
            raise ValueError("not a coarse2fine weight file")
        rest = data[len(cls.MAGIC):]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        blocks = tuple((name, off, tuple(shape)) for name, off, _, shape in header["blocks"])
        layout = WeightLayout(blocks, header["config_hash"])
        values = np.frombuffer(rest[nl + 1:], dtype=header["dtype"]).astype(np.float64)
        if len(values) != header["length"]:
            raise ValueError(f"weight file truncated: {len(values)} of {header['length']} values")
        return cls(layout, values)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightVector":
        return cls.from_bytes(Path(path).read_bytes())


def accumulate_features(out: np.ndarray, layout: WeightLayout, bundle, a: LabelAssignment,
                        config: HierarchyConfig, scale: float = 1.0) -> None:
    """Add ``scale * psi(bundle, a)`` into ``out`` in place."""
    if a.o == 0:
        return
    H, A = len(bundle.hog), len(bundle.app)
    if H != config.hog_dim or layout.slice("loc.1")[1][-1] != A:
        raise ValueError(f"feature dimensions ({H}, {A}) do not match the weight layout")

    def put(name, index, vec):
        sl, shape = layout.slice(name)
        stride = shape[-1] if len(shape) > 1 else 1
        flat = int(np.ravel_multi_index(index, shape[:-1])) if len(shape) > 1 else index[0]
        start = sl.start + flat * stride
        out[start:start + np.size(vec)] += scale * np.asarray(vec)

    v, s, f = a.v1, a.s2, a.f
    put("det", (0,), bundle.det)
    put("glb.1", (v,), bundle.hog)
    put("loc.1", (v,), bundle.app)
    if config.layers >= 2:
        if bundle.cnt2 is None:
            raise ValueError("bundle lacks layer-2 contour potentials")
        put("glb.2", (v, s), bundle.hog)
        put("loc.2", (v, s), bundle.app)
        put("cnt.2", (s,), bundle.cnt2[v, s])
        put("vw.1", (0,), 1.0)
    if config.layers >= 3:
        if f is not None:
            if bundle.cnt3 is None:
                raise ValueError("bundle lacks layer-3 contour potentials")
            put("glb.3", (v, f), bundle.hog)
            put("loc.3", (v, f), bundle.app)
            put("cnt.3", (f,), bundle.cnt3[v, f])
        put("vw.2", (0,), 1.0)
        put("sb.2", (0,), 1.0)


def joint_feature_map(bundle, a: LabelAssignment, config: HierarchyConfig,
                      layout: WeightLayout) -> np.ndarray:
    out = np.zeros(layout.size)
    accumulate_features(out, layout, bundle, a, config)
    return out


# ---------------------------------------------------------------------------
# examples and CAD registry


@dataclass(frozen=True)
class TrainingExample:
    image_id: str
    region: tuple
    o: int
    viewpoint: ContinuousViewpoint | None = None
    subcat: str | None = None
    finer: str | None = None
    mirrored: bool = False  # region refers to the left-right flipped image

    def assignment(self, config: HierarchyConfig) -> LabelAssignment:
        if self.o == 0:
            return LabelAssignment.background()
        v = azimuth_bin(self.viewpoint.azimuth, config.m)
        s = config.subcat_index(self.subcat) if self.subcat is not None else None
        f = config.finer_index(self.finer) if self.finer is not None else None
        return LabelAssignment.foreground(v, s, f, config.layers, self.viewpoint, self.viewpoint)


@dataclass(eq=False)
class CadRegistry:
    """One model per finer-sub-category and one merged model per sub-category."""

    finer: dict
    merged: dict

    @classmethod
    def build(cls, finer_models: dict, config: HierarchyConfig) -> "CadRegistry":
        missing = [f for f in config.finer_names if f not in finer_models]
        if missing:
            raise ValueError(f"no CAD model for finer-sub-categories {missing}")
        merged = {}
        for s, name in enumerate(config.subcategories):
            members = [finer_models[f] for f in config.finer[s]]
            merged[name] = merge_cad_models(members, config.voxel_resolution, config.merge_tau,
                                            model_id=f"merged:{name}")
        return cls(dict(finer_models), merged)

    def finer_model(self, config: HierarchyConfig, f: int) -> CadModel:
        return self.finer[config.finer_names[f]]

    def merged_model(self, config: HierarchyConfig, s: int) -> CadModel:
        return self.merged[config.subcategories[s]]
