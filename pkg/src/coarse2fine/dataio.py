"""Dataset manifests, grayscale images and sliding-window proposals.

Manifest grammar, one whitespace-separated record per line (``#`` starts a
comment, ``-`` marks an absent field)::

    IMG  image_id path width height [mask_path]
    ANN  image_id x y w h o v_bin azimuth elevation distance occ_dx occ_dy subcat finer
    PROP image_id x y w h
    CAD  finer subcat path

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .model import ContinuousViewpoint


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    mask: str | None = None


@dataclass(frozen=True)
class Annotation:
    image_id: str
    box: tuple
    o: int = 1
    v_bin: int | None = None
    viewpoint: ContinuousViewpoint | None = None
    subcat: str | None = None
    finer: str | None = None

    @property
    def azimuth(self):
        return None if self.viewpoint is None else self.viewpoint.azimuth


@dataclass(frozen=True)
class Proposal:
    image_id: str
    box: tuple


@dataclass
class DatasetManifest:
    images: dict = field(default_factory=dict)
    annotations: list = field(default_factory=list)
    proposals: list = field(default_factory=list)
    cads: dict = field(default_factory=dict)  # finer -> (subcat, path)
    root: Path = Path(".")

    def __eq__(self, other):
        return (isinstance(other, DatasetManifest) and self.images == other.images
                and self.annotations == other.annotations and self.proposals == other.proposals
                and self.cads == other.cads)

    def validate(self) -> None:
        for a in self.annotations:
            if a.image_id not in self.images:
                raise ValueError(f"annotation references unknown image {a.image_id!r}")
            _check_labels(a, self.cads)
        for p in self.proposals:
            if p.image_id not in self.images:
                raise ValueError(f"proposal references unknown image {p.image_id!r}")

    def image_path(self, image_id: str) -> Path:
        return self.root / self.images[image_id].path

    def load_image(self, image_id: str) -> np.ndarray:
        return read_pgm(self.image_path(image_id))

    def cad_path(self, finer: str) -> Path:
        return self.root / self.cads[finer][1]

    def annotations_of(self, image_id: str) -> list:
        return [a for a in self.annotations if a.image_id == image_id]

    def proposals_of(self, image_id: str) -> list:
        return [p.box for p in self.proposals if p.image_id == image_id]

    def hierarchy(self):
        """(sub-categories, finer lists) in first-appearance order of the CAD records."""
        subcats, finer = [], {}
        for f, (s, _) in self.cads.items():
            if s not in finer:
                subcats.append(s)
                finer[s] = []
            finer[s].append(f)
        return tuple(subcats), tuple(tuple(finer[s]) for s in subcats)


def _check_labels(a: Annotation, cads: dict) -> None:
    if a.finer is not None:
        if a.finer not in cads:
            raise ValueError(f"annotation references unknown finer-sub-category {a.finer!r}")
        if a.subcat is not None and cads[a.finer][0] != a.subcat:
            raise ValueError(f"finer-sub-category {a.finer!r} does not belong to {a.subcat!r}")
    if a.subcat is not None and cads and a.subcat not in {s for s, _ in cads.values()}:
        raise ValueError(f"annotation references unknown sub-category {a.subcat!r}")


def _opt(tok: str, conv):
    return None if tok == "-" else conv(tok)


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _box(tokens):
    return tuple(int(t) for t in tokens)


def parse_record(parts: list, m: DatasetManifest) -> None:
    tag = parts[0]
    if tag == "IMG":
        if len(parts) not in (5, 6):
            raise ValueError(f"IMG expects 4 or 5 fields, got {len(parts) - 1}")
        mask = parts[5] if len(parts) == 6 else None
        m.images[parts[1]] = ImageRecord(parts[1], parts[2], int(parts[3]), int(parts[4]), mask)
    elif tag == "ANN":
        if len(parts) != 15:
            raise ValueError(f"ANN expects 14 fields, got {len(parts) - 1}")
        o = int(parts[6])
        if o not in (0, 1):
            raise ValueError(f"object label must be 0 or 1, got {o}")
        az, el, dist = (_opt(t, float) for t in parts[8:11])
        occ = (_opt(parts[11], float) or 0.0, _opt(parts[12], float) or 0.0)
        vp = None if az is None else ContinuousViewpoint(az, el or 0.0, dist or 1.0, occ)
        m.annotations.append(Annotation(parts[1], _box(parts[2:6]), o, _opt(parts[7], int), vp,
                                        _opt(parts[13], str), _opt(parts[14], str)))
    elif tag == "PROP":
        if len(parts) != 6:
            raise ValueError(f"PROP expects 5 fields, got {len(parts) - 1}")
        m.proposals.append(Proposal(parts[1], _box(parts[2:6])))
    elif tag == "CAD":
        if len(parts) != 4:
            raise ValueError(f"CAD expects 3 fields, got {len(parts) - 1}")
        m.cads[parts[1]] = (parts[2], parts[3])
    else:
        raise ValueError(f"unknown record tag {tag!r}")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    m = DatasetManifest(root=path.parent)
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            parse_record(parts, m)
        except (ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    # labels are checked once every CAD record is known
    for a in m.annotations:
        try:
            _check_labels(a, m.cads)
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from exc
    m.validate()
    return m


def format_manifest(m: DatasetManifest) -> str:
    lines = []
    for f, (s, p) in m.cads.items():
        lines.append(f"CAD {f} {s} {p}")
    for r in m.images.values():
        lines.append(" ".join(["IMG", r.image_id, r.path, str(r.width), str(r.height)]
                              + ([r.mask] if r.mask else [])))
    for a in m.annotations:
        vp = a.viewpoint
        vals = [a.image_id, *a.box, a.o, a.v_bin,
                *(("-",) * 5 if vp is None else (vp.azimuth, vp.elevation, vp.distance, *vp.occ)),
                a.subcat, a.finer]
        lines.append("ANN " + " ".join(_fmt(v) for v in vals))
    for p in m.proposals:
        lines.append("PROP " + " ".join(_fmt(v) for v in (p.image_id, *p.box)))
    return "\n".join(lines) + ("\n" if lines else "")


def save_manifest(m: DatasetManifest, path) -> None:
    Path(path).write_text(format_manifest(m))


# ---------------------------------------------------------------------------
# images


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def write_pgm(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def grid_proposals(image_size, scales, strides) -> list:
    """Sliding windows per (scale, stride), clipped to the image, in row-major order.

    ``scales`` holds side lengths or (w, h) pairs; ``strides`` one stride per
    scale or a single value.
    """
    W, H = image_size
    scales = [(s, s) if np.isscalar(s) else tuple(s) for s in scales]
    strides = [strides] * len(scales) if np.isscalar(strides) else list(strides)
    if len(strides) != len(scales):
        raise ValueError("need one stride per scale")
    out = []
    for (w, h), st in zip(scales, strides):
        if st <= 0 or w <= 0 or h <= 0:
            raise ValueError("scales and strides must be positive")
        for y in range(0, max(H - h, 0) + 1, st):
            for x in range(0, max(W - w, 0) + 1, st):
                out.append((x, y, min(w, W - x), min(h, H - y)))
    return out


# ---------------------------------------------------------------------------
# detections


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    box: tuple
    energy: float
    v_bin: int | None
    viewpoint: ContinuousViewpoint | None
    subcat: str | None
    finer: str | None

    @property
    def azimuth(self):
        return None if self.viewpoint is None else self.viewpoint.azimuth


def format_detections(records) -> str:
    lines = []
    for d in records:
        vp = d.viewpoint
        cont = ("-",) * 5 if vp is None else (vp.azimuth, vp.elevation, vp.distance, *vp.occ)
        vals = [d.image_id, *d.box, float(d.energy), d.v_bin, *cont, d.subcat, d.finer]
        lines.append(" ".join(_fmt(v) for v in vals))
    return "\n".join(lines) + ("\n" if lines else "")


def write_detections(path, records) -> None:
    Path(path).write_text(format_detections(records))


def read_detections(path) -> list:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        p = line.split()
        if not p or p[0].startswith("#"):
            continue
        try:
            if len(p) != 14:
                raise ValueError(f"expected 14 fields, got {len(p)}")
            az = _opt(p[7], float)
            vp = None if az is None else ContinuousViewpoint(az, float(p[8]), float(p[9]),
                                                             (float(p[10]), float(p[11])))
            out.append(DetectionRecord(p[0], _box(p[1:5]), float(p[5]), _opt(p[6], int), vp,
                                       _opt(p[12], str), _opt(p[13], str)))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
