import numpy as np
import pytest

from coarse2fine.dataio import load_manifest, read_pgm
from coarse2fine.evaluation import placed_mask
from coarse2fine.geometry import SilhouetteMask, default_focal, load_obj, normalize_mesh
from coarse2fine.inference import box_iou
from coarse2fine.model import azimuth_bin
from coarse2fine.synth import SynthSpec, generate_synthetic, shape_library


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthSpec(n_scenes=6, seed=3), out)
    return out, load_manifest(out / "train" / "manifest.txt")


def test_same_seed_gives_identical_files(dataset, tmp_path):
    out, _ = dataset
    generate_synthetic(SynthSpec(n_scenes=6, seed=3), tmp_path)
    files = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    for f in files:
        assert (out / f).read_bytes() == (tmp_path / f).read_bytes()


def test_other_seed_differs(dataset, tmp_path):
    out, _ = dataset
    generate_synthetic(SynthSpec(n_scenes=6, seed=4), tmp_path)
    assert (out / "train/manifest.txt").read_bytes() != (tmp_path / "train/manifest.txt").read_bytes()


def test_single_scene(tmp_path):
    m = generate_synthetic(SynthSpec(n_scenes=1, split="test"), tmp_path)
    assert len(m.annotations) == 1 and len(m.proposals) >= 1
    assert m.proposals[0].box == m.annotations[0].box


def test_boxes_are_mask_bounds(dataset):
    _, m = dataset
    for a in m.annotations:
        mask = read_pgm(m.root / m.images[a.image_id].mask) > 127
        assert SilhouetteMask(mask).bbox() == a.box


def test_ground_truth_reprojects_onto_the_mask(dataset):
    _, m = dataset
    for a in m.annotations:
        rec = m.images[a.image_id]
        mask = read_pgm(m.root / rec.mask) > 127
        cad = load_obj(m.cad_path(a.finer))
        again = placed_mask(cad, a.viewpoint, a.box, (rec.width, rec.height), default_focal(rec.width, rec.height))
        np.testing.assert_array_equal(again, mask)


def test_labels_and_proposals_are_consistent(dataset):
    _, m = dataset
    lib = shape_library()
    for a in m.annotations:
        assert lib[a.finer][0] == a.subcat
        assert a.v_bin == azimuth_bin(a.azimuth, 8)
        props = m.proposals_of(a.image_id)
        assert all(box_iou(p, a.box) >= 0.6 or box_iou(p, a.box) < 0.3 for p in props)
        assert sum(box_iou(p, a.box) < 0.3 for p in props) >= 1


def test_variants_are_distinct_shapes():
    lib = shape_library()
    verts = {f: m.vertices for f, (_, m) in lib.items()}
    names = list(verts)
    for i, f in enumerate(names):
        np.testing.assert_allclose(normalize_mesh(lib[f][1]).vertices, verts[f], atol=1e-12)
        for g in names[i + 1:]:
            assert verts[f].shape != verts[g].shape or not np.allclose(verts[f], verts[g])


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(finer=("jet-swept", "jet-straight", "boat-cabin"))
    with pytest.raises(ValueError):
        SynthSpec(finer=("jet-swept", "unicorn"))
    with pytest.raises(ValueError):
        SynthSpec(n_scenes=-1)
