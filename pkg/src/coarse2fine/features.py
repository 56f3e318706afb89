"""HOG descriptors for image regions and projected contours, and appearance providers.

Every region is resampled to a square canonical template before description,
so descriptors of differently sized proposals share one length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._hog import cell_hist

TEMPLATE = 64
CELL_PX = 8
BINS = 9
HYS_CLIP = 0.2
NORM_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class HogDescriptor:
    values: np.ndarray
    cells_x: int
    cells_y: int
    bins: int

    def __len__(self):
        return len(self.values)

    def dot(self, other: "HogDescriptor") -> float:
        return float(self.values @ other.values)


@dataclass(frozen=True, eq=False)
class AppearanceVector:
    values: np.ndarray
    provider_id: str


def _check_region(shape, region):
    x, y, w, h = (int(round(t)) for t in region)
    if w <= 0 or h <= 0:
        raise ValueError(f"empty region {region}")
    if x < 0 or y < 0 or x + w > shape[1] or y + h > shape[0]:
        raise ValueError(f"region {region} not inside image of size {shape[1]}x{shape[0]}")
    return x, y, w, h


def _axis_taps(n_src: int, n_dst: int):
    # pixel-centre aligned source coordinates, clamped to the valid range
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, pos - lo


def resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize; a constant image stays exactly constant."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape == (out_h, out_w):
        return img.copy()
    lo, hi, t = _axis_taps(img.shape[0], out_h)
    a, b = img[lo], img[hi]
    rows = a + t[:, None] * (b - a)
    lo, hi, t = _axis_taps(img.shape[1], out_w)
    a, b = rows[:, lo], rows[:, hi]
    return a + t[None, :] * (b - a)


def crop_resample(image: np.ndarray, region, size: int = TEMPLATE) -> np.ndarray:
    x, y, w, h = _check_region(image.shape, region)
    return resample(image[y:y + h, x:x + w], size, size)


def cell_histograms(images: np.ndarray, cell_px: int = CELL_PX, bins: int = BINS) -> np.ndarray:
    """Unnormalised orientation histograms, shape (N, cells_y, cells_x, bins).

    Centred [-1, 0, 1] gradients with replicated borders; unsigned orientation
    in [0, pi); each pixel splits its magnitude linearly between the two
    nearest bin centres.
    """
    imgs = np.ascontiguousarray(images, dtype=np.float64)
    N, H, W = imgs.shape
    if H % cell_px or W % cell_px:
        raise ValueError(f"template {W}x{H} is not a multiple of the {cell_px}px cell")
    out = np.zeros((N, H // cell_px, W // cell_px, bins))
    return cell_hist(imgs, cell_px, bins, out)


def normalize_blocks(hist: np.ndarray) -> np.ndarray:
    """L2-hys over non-overlapping 2x2-cell blocks; output keeps cell-major order."""
    N, cy, cx, bins = hist.shape
    if cy % 2 or cx % 2:
        raise ValueError(f"{cx}x{cy} cells cannot be tiled by 2x2 blocks")
    blocks = hist.reshape(N, cy // 2, 2, cx // 2, 2, bins).transpose(0, 1, 3, 2, 4, 5)
    blocks = blocks.reshape(N, cy // 2, cx // 2, 4 * bins)
    v = blocks / np.sqrt((blocks ** 2).sum(-1, keepdims=True) + NORM_EPS ** 2)
    v = np.minimum(v, HYS_CLIP)
    v = v / np.sqrt((v ** 2).sum(-1, keepdims=True) + NORM_EPS ** 2)
    v = v.reshape(N, cy // 2, cx // 2, 2, 2, bins).transpose(0, 1, 3, 2, 4, 5)
    return v.reshape(N, cy * cx * bins)


def hog_batch(images: np.ndarray, cell_px: int = CELL_PX, bins: int = BINS) -> np.ndarray:
    """Descriptors of a stack of template-sized images, shape (N, D)."""
    return normalize_blocks(cell_histograms(images, cell_px, bins))


def compute_hog(image: np.ndarray, region, cell_px: int = CELL_PX, bins: int = BINS,
                template: int = TEMPLATE) -> HogDescriptor:
    x, y, w, h = _check_region(np.shape(image), region)
    if w < cell_px or h < cell_px:
        raise ValueError(f"region {region} smaller than one {cell_px}px cell")
    patch = crop_resample(np.asarray(image, dtype=np.float64), region, template)
    n = template // cell_px
    return HogDescriptor(hog_batch(patch[None], cell_px, bins)[0], n, n, bins)


def clip_to_region(img: np.ndarray, region) -> np.ndarray:
    """Region-sized copy of ``img``; parts of the region outside the frame read as zero."""
    x, y, w, h = (int(round(t)) for t in region)
    out = np.zeros((h, w), dtype=np.float64)
    H, W = img.shape
    x0, y0, x1, y1 = max(x, 0), max(y, 0), min(x + w, W), min(y + h, H)
    if x1 > x0 and y1 > y0:
        out[y0 - y:y1 - y, x0 - x:x1 - x] = img[y0:y1, x0:x1]
    return out


def contour_hog(mask, region, cell_px: int = CELL_PX, bins: int = BINS,
                template: int = TEMPLATE) -> HogDescriptor:
    """HOG of the silhouette outline restricted to ``region``."""
    canvas = clip_to_region(mask.contour.astype(np.float64), region)
    h, w = canvas.shape
    return compute_hog(canvas, (0, 0, w, h), cell_px, bins, template)


# ---------------------------------------------------------------------------
# local appearance


def _gabor(size: int, sigma: float, wavelength: float, theta: float) -> np.ndarray:
    r = (size - 1) / 2.0
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    xr = xx * math.cos(theta) + yy * math.sin(theta)
    k = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2)) * np.cos(2 * math.pi * xr / wavelength)
    return k - k.mean()


class FilterBankProvider:
    """Oriented zero-mean Gabor bank plus one smoothing kernel, average-pooled on a grid.

    Intensities are read on a [0, 1] scale. Zero-mean kernels see the region
    with its mean removed, so a constant region gives exactly zero response
    for them.
    """

    provider_id = "filterbank"

    def __init__(self, size: int = 32, grid: int = 8, orientations: int = 4):
        self.size = size
        self.grid = grid
        self.kernels = [
            _gabor(ks, sigma, lam, math.pi * k / orientations)
            for ks, sigma, lam in ((7, 1.5, 4.0), (11, 2.5, 7.0))
            for k in range(orientations)
        ]
        g = np.exp(-np.square(np.mgrid[-3:4, -3:4]).sum(0) / (2 * 1.5 ** 2))
        self.dc_kernel = g / g.sum()

    @property
    def dim(self) -> int:
        return (len(self.kernels) + 1) * self.grid ** 2

    def _pool(self, resp: np.ndarray) -> np.ndarray:
        g, s = self.grid, self.size // self.grid
        return resp.reshape(g, s, g, s).mean(axis=(1, 3)).ravel()

    def __call__(self, image, region, image_id=None) -> AppearanceVector:
        patch = crop_resample(np.asarray(image, dtype=np.float64), region, self.size) / 255.0
        centred = patch - patch.mean()
        out = [self._pool(np.abs(ndimage.correlate(centred, k, mode="nearest")))
               for k in self.kernels]
        out.append(self._pool(ndimage.correlate(patch, self.dc_kernel, mode="nearest")))
        return AppearanceVector(np.concatenate(out), self.provider_id)


def region_key(image_id, region):
    return (str(image_id),) + tuple(int(round(t)) for t in region)


def read_feature_file(path) -> dict:
    """Parse ``image_id x y w h dim v1 ... vdim`` records."""
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            dim = int(parts[5])
            vals = np.array([float(t) for t in parts[6:]])
            if len(vals) != dim:
                raise ValueError(f"declared dim {dim}, found {len(vals)} values")
            key = region_key(parts[0], [int(t) for t in parts[1:5]])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        table[key] = vals
    return table


def write_feature_file(path, table: dict) -> None:
    lines = []
    for key, vals in table.items():
        vals = np.atleast_1d(vals)
        lines.append(" ".join([str(key[0])] + [str(k) for k in key[1:]] + [str(len(vals))]
                              + ["%.17g" % v for v in vals]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


class FileFeatureProvider:
    """Precomputed vectors keyed by (image id, region)."""

    def __init__(self, table: dict, provider_id: str = "file"):
        self.table = table
        self.provider_id = provider_id
        dims = {len(v) for v in table.values()}
        if len(dims) > 1:
            raise ValueError(f"feature file mixes dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    @classmethod
    def from_file(cls, path):
        return cls(read_feature_file(path), provider_id=f"file:{Path(path).name}")

    def lookup(self, image_id, region) -> np.ndarray:
        key = region_key(image_id, region)
        try:
            return self.table[key]
        except KeyError:
            raise KeyError(f"no precomputed features for image {key[0]!r} region {key[1:]}") from None

    def __call__(self, image, region, image_id=None) -> AppearanceVector:
        return AppearanceVector(self.lookup(image_id, region).copy(), self.provider_id)


def local_appearance(image, region, provider, image_id=None) -> AppearanceVector:
    return provider(image, region, image_id)
