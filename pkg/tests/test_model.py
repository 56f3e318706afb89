import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coarse2fine.geometry import TAU
from coarse2fine.model import (
    ContinuousViewpoint, HierarchyConfig, LabelAssignment, TrainingExample, WeightLayout, WeightVector,
    azimuth_bin, enumerate_assignments, joint_feature_map, validate_assignment,
)
from coarse2fine.potentials import PotentialBundle

from conftest import tiny_config


def config(layers=3, m=8):
    return HierarchyConfig(("car", "bus"), (("suv", "sedan", "coupe"), ("city",)), m=m, layers=layers)


def bundle(cfg, rng, app_dim=5):
    return PotentialBundle(float(rng.normal()), rng.normal(size=cfg.hog_dim), rng.normal(size=app_dim),
                           cnt2=rng.normal(size=(cfg.m, cfg.n)), cnt3=rng.normal(size=(cfg.m, cfg.n_finer)))


def test_config_validation():
    with pytest.raises(ValueError):
        HierarchyConfig(("a",), (("x",),), m=1)
    with pytest.raises(ValueError):
        HierarchyConfig(("a",), (("x",),), layers=4)
    with pytest.raises(ValueError):
        HierarchyConfig(("a", "b"), (("x",),))
    with pytest.raises(ValueError):
        HierarchyConfig(("a", "b"), (("x",), ("x",)))
    assert config().n_particles == 60


def test_config_round_trips_through_dict():
    cfg = config()
    assert HierarchyConfig.from_dict(cfg.to_dict()) == cfg


def test_valid_assignment_passes():
    cfg = config()
    a = LabelAssignment(1, 3, 3, 3, 0, 0, cfg.finer_index("sedan"))
    assert validate_assignment(a, cfg) is None


@pytest.mark.parametrize("a, problem", [
    (LabelAssignment(1, 3, 4, 4, 0, 0, 0), "viewpoint consistency"),
    (LabelAssignment(0, None, None, None, 1, None, None), "background purity"),
    (LabelAssignment(1, 3, 3, 3, 0, 1, 0), "sub-category consistency"),
    (LabelAssignment(1, 3, 3, 3, 1, 1, 0), "finer membership"),
    (LabelAssignment(1, 9, 9, 9, 0, 0, 0), "viewpoint range"),
    (LabelAssignment(2), "object label"),
])
def test_violations_are_named(a, problem):
    assert validate_assignment(a, config()) == problem


def test_enumeration_count():
    for layers, per_bin in ((1, 1), (2, 2), (3, (1 + 3) + (1 + 1))):
        cfg = config(layers)
        cands = enumerate_assignments(cfg)
        assert len(cands) == cfg.m * per_bin
        assert len(set(cands)) == len(cands)


def test_enumeration_order_puts_finer_none_last():
    cands = enumerate_assignments(config())
    assert cands[:6] == [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, None), (0, 1, 3), (0, 1, None)]


def test_every_enumerated_assignment_is_valid():
    for layers in (1, 2, 3):
        cfg = config(layers)
        for v, s, f in enumerate_assignments(cfg):
            assert validate_assignment(LabelAssignment.foreground(v, s, f, layers), cfg) is None


@given(az=st.floats(-20, 20), m=st.integers(2, 36))
def test_azimuth_bin_is_nearest_centre(az, m):
    v = azimuth_bin(az, m)
    d = lambda c: min(abs(az - c) % TAU, TAU - abs(az - c) % TAU)
    assert d(v * TAU / m) <= min(d(k * TAU / m) for k in range(m)) + 1e-9


def test_azimuth_bin_edges_are_centred():
    assert azimuth_bin(0.0, 8) == 0
    assert azimuth_bin(TAU - 0.01, 8) == 0
    assert azimuth_bin(math.pi / 8 + 1e-9, 8) == 1


def test_viewpoint_wraps_and_validates():
    assert ContinuousViewpoint(-0.5, 0.1, 2.0).azimuth == pytest.approx(TAU - 0.5)
    with pytest.raises(ValueError):
        ContinuousViewpoint(0.0, 0.1, -2.0)
    with pytest.raises(ValueError):
        ContinuousViewpoint(0.0, -0.3, 2.0)


def test_weight_layout_is_a_function_of_config():
    a = WeightLayout.build(config(), 7)
    b = WeightLayout.build(config(), 7)
    assert a == b
    H, m = config().hog_dim, 8
    assert a.size == 1 + m * (H + 7) + m * 2 * (H + 7) + 2 + 1 + m * 4 * (H + 7) + 4 + 2
    assert WeightLayout.build(config(), 8).config_hash != a.config_hash


def test_weight_serialization_is_bit_exact(tmp_path):
    layout = WeightLayout.build(config(), 4)
    w = WeightVector(layout, np.random.default_rng(0).normal(size=layout.size) * 1e-300)
    assert WeightVector.from_bytes(w.to_bytes()) == w
    w.save(tmp_path / "w.bin")
    back = WeightVector.load(tmp_path / "w.bin")
    assert back == w and back.values.tobytes() == w.values.tobytes()


def test_truncated_weight_file_rejected():
    layout = WeightLayout.build(config(), 4)
    data = WeightVector(layout).to_bytes()
    with pytest.raises(ValueError):
        WeightVector.from_bytes(data[:-8])
    with pytest.raises(ValueError):
        WeightVector.from_bytes(b"junk" + data)


def test_background_maps_to_zero_vector(rng):
    cfg = config()
    layout = WeightLayout.build(cfg, 5)
    assert not joint_feature_map(bundle(cfg, rng), LabelAssignment.background(), cfg, layout).any()


def test_viewpoint_blocks_are_disjoint(rng):
    cfg = config()
    layout = WeightLayout.build(cfg, 5)
    b = bundle(cfg, rng)
    p = joint_feature_map(b, LabelAssignment.foreground(1, 0, 0), cfg, layout)
    q = joint_feature_map(b, LabelAssignment.foreground(2, 0, 0), cfg, layout)
    shared = (p != 0) & (q != 0)
    allowed = np.zeros(layout.size, bool)
    for name in ("det", "cnt.2", "cnt.3", "vw.1", "vw.2", "sb.2"):
        allowed[layout.slice(name)[0]] = True
    assert not (shared & ~allowed).any()
    for name in ("glb.1", "glb.2", "glb.3"):
        sl = layout.slice(name)[0]
        assert p[sl].any() and q[sl].any() and not (p[sl] * q[sl]).any()


def test_feature_dimension_mismatch_rejected(rng):
    cfg = config()
    layout = WeightLayout.build(cfg, 6)
    with pytest.raises(ValueError):
        joint_feature_map(bundle(cfg, rng, 5), LabelAssignment.foreground(0, 0, 0), cfg, layout)


def test_training_example_assignment():
    cfg = tiny_config()
    vp = ContinuousViewpoint(TAU / 4 + 0.1, 0.3, 3.0)
    ex = TrainingExample("i", (0, 0, 10, 10), 1, vp, "b", "b1")
    a = ex.assignment(cfg)
    assert a.labels == (1, 1, 1, 3) and a.cv3 == vp
    assert TrainingExample("i", (0, 0, 10, 10), 0).assignment(cfg) == LabelAssignment.background()
