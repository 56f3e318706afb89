"""Shared builders for small random hierarchies."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings
from scipy import ndimage

from coarse2fine.features import AppearanceVector, crop_resample
from coarse2fine.geometry import CadModel, normalize_mesh
from coarse2fine.model import CadRegistry, HierarchyConfig, LabelAssignment, WeightLayout, WeightVector
from coarse2fine.potentials import FeatureContext, LogisticDetector, PotentialBundle
from coarse2fine.sampling import DistanceReference

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

BOX_FACES = np.array([
    [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
    [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
])


def box_mesh(lo, hi, model_id="box"):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    return CadModel(corners, BOX_FACES.copy(), model_id)


def random_cad(rng, model_id="cad", parts=2):
    """Union of jittered boxes, normalized."""
    verts, faces = [], []
    for k in range(parts):
        c = rng.uniform(-0.3, 0.3, 3)
        half = rng.uniform(0.05, 0.4, 3)
        b = box_mesh(c - half, c + half)
        v = b.vertices + rng.normal(0, 0.02, b.vertices.shape)
        faces.append(b.faces + 8 * k)
        verts.append(v)
    return normalize_mesh(CadModel(np.vstack(verts), np.vstack(faces), model_id))


class StatsProvider:
    """Cheap appearance: mean and spread of a small resampled patch."""

    provider_id = "stats"
    dim = 3

    def __call__(self, image, region, image_id=None):
        p = crop_resample(np.asarray(image, float), region, 8) / 255.0
        return AppearanceVector(np.array([p.mean(), p.std(), p[:4].mean() - p[4:].mean()]), self.provider_id)


def tiny_config(layers=3, m=4, counts=(3, 2, 1, 2), template=16, cell_px=4):
    return HierarchyConfig(("a", "b"), (("a0", "a1"), ("b0", "b1")), m=m, layers=layers,
                           sample_counts=counts, sigma_e=0.15, mu_e=0.3, template=template,
                           cell_px=cell_px, voxel_resolution=16)


def tiny_context(rng, config=None):
    config = tiny_config() if config is None else config
    cads = {f: random_cad(rng, f) for f in config.finer_names}
    registry = CadRegistry.build(cads, config)
    refs = DistanceReference(rng.uniform(15, 30, 4), rng.uniform(15, 30, 4), rng.uniform(2.5, 3.5, 4))
    provider = StatsProvider()
    det = LogisticDetector(rng.normal(size=provider.dim), float(rng.normal()))
    return FeatureContext(config, registry, refs, provider, det)


def random_image(rng, size=48):
    img = ndimage.gaussian_filter(rng.uniform(0, 255, (size, size)), 1.5)
    return (img - img.min()) / (np.ptp(img) + 1e-9) * 255.0


def random_region(rng, size=48):
    w, h = rng.integers(16, 33, 2)
    x, y = rng.integers(0, size - w + 1), rng.integers(0, size - h + 1)
    return (int(x), int(y), int(w), int(h))


def random_weights(rng, config, app_dim=3, scale=1.0):
    layout = WeightLayout.build(config, app_dim)
    w = WeightVector(layout, rng.normal(0, scale, layout.size) * layout.learnable_mask())
    return w


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_problem(rng, n_examples=4, m=4, finer_per_subcat=1, app_dim=3):
    """Render-free learning problem: random potentials, m bins, 2 sub-categories.

    Positives get a HOG bump in a label-specific coordinate so the labels are learnable.
    """
    finer = tuple(tuple(f"{s}{k}" for k in range(finer_per_subcat)) for s in "ab")
    cfg = HierarchyConfig(("a", "b"), finer, m=m, template=16, cell_px=8)
    layout = WeightLayout.build(cfg, app_dim)
    bundles, truths = [], []
    for i in range(n_examples):
        hog = rng.uniform(0, 0.3, cfg.hog_dim)
        if i % 4 == 3:
            truth = LabelAssignment.background()
        else:
            v, s = int(rng.integers(m)), int(rng.integers(2))
            f = cfg.finer_of(s)[int(rng.integers(finer_per_subcat))]
            hog[(v * 3 + s) % cfg.hog_dim] += 1.0
            truth = LabelAssignment.foreground(v, s, f)
        b = PotentialBundle(float(rng.normal()), hog, rng.normal(size=app_dim),
                            cnt2=rng.uniform(0, 0.25, (m, 2)), cnt3=rng.uniform(0, 0.25, (m, cfg.n_finer)))
        bundles.append(b)
        truths.append(truth)
    return cfg, layout, bundles, truths


# ---------------------------------------------------------------------------
# acceptance verdicts, printed once at the end of the run

VERDICTS = []


def verdict(name: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    VERDICTS.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
