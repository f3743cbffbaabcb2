import json

import numpy as np
import pytest

from icp_attack.data import (
    SHAPE_KINDS,
    ManifestError,
    generate_scene,
    generate_shape,
    load_manifest,
    make_pair,
    synthetic_route,
    synthetic_suite,
    write_manifest,
)
from icp_attack.geometry import Pose, log_se3, pose_error
from icp_attack.icp import icp_profile, run_icp
from icp_attack.pointcloud import PointCloud, estimate_normals, write_ply


@pytest.mark.parametrize("kind", SHAPE_KINDS)
def test_shapes_are_planar_unit_and_deterministic(kind):
    a = generate_shape(kind, seed=3)
    assert np.all(a.points[:, 2] == 0.0)
    assert np.linalg.norm(a.points, axis=1).max() == pytest.approx(1.0)
    assert np.array_equal(a.points, generate_shape(kind, seed=3).points)


def test_ring_is_on_unit_circle():
    r = generate_shape("ring", density=500, seed=0)
    np.testing.assert_allclose(np.linalg.norm(r.points, axis=1), 1.0, atol=1e-12)


def test_rectangle_normals_axis_aligned():
    r = estimate_normals(generate_shape("rectangle", density=200, seed=1), planar=True)
    # corners mix two walls; the rest are exactly axis aligned
    aligned = np.isclose(np.abs(r.normals).max(axis=1), 1.0, atol=1e-6)
    assert aligned.mean() > 0.95
    assert np.unique(np.round(r.points[aligned][:, :2], 6), axis=0).shape[0] > 100


def test_shape_validation():
    with pytest.raises(ValueError):
        generate_shape("hexagon")
    with pytest.raises(ValueError):
        generate_shape("ring", density=0)


def test_shapenet_pair_shape_and_determinism():
    shape = generate_shape("cross", seed=2)
    a, b = make_pair(shape, seed=7), make_pair(shape, seed=7)
    assert len(a.scan) == 2048
    assert np.array_equal(a.scan.points, b.scan.points)
    assert np.array_equal(a.ground_truth.matrix(), b.ground_truth.matrix())
    assert a.map.has_normals and a.planar


def test_pair_ground_truth_convention():
    shape = generate_shape("L-shape", seed=5)
    p = make_pair(shape, seed=1, noise_sigma=0.0)
    mapped = p.ground_truth.apply(p.scan.points)
    d = np.linalg.norm(mapped[:, None] - shape.points[None], axis=2).min(axis=1)
    assert d.max() < 1e-12


def test_noiseless_identity_pair_recovers_identity():
    shape = generate_shape("rectangle", seed=0)
    p = make_pair(shape, seed=0, noise_sigma=0.0, ground_truth=Pose.identity())
    res = run_icp(p.scan, p.map, icp_profile("shapenet"))
    assert np.abs(log_se3(res.estimate)).max() < 1e-6


def test_noiseless_pairs_consistent_over_100_shapes():
    kinds = [k for k in SHAPE_KINDS if k != "ring"]
    worst = 0.0
    for i in range(100):
        shape = generate_shape(kinds[i % len(kinds)], density=300, seed=100 + i)
        p = make_pair(shape, seed=i, noise_sigma=0.0, sample_size=512)
        res = run_icp(p.scan, p.map, icp_profile("shapenet"))
        worst = max(worst, pose_error(res.estimate, p.ground_truth).planar_norm)
    assert worst < 1e-3


def test_boreas_pose_ranges():
    scene = generate_scene("rectangle", seed=0, scale=5.0, spacing=0.5)
    for s in range(20):
        T = make_pair(scene, "boreas", seed=s).ground_truth
        xi = log_se3(T)
        assert np.all(np.abs(T.translation) <= 0.3 + 1e-12)
        assert np.all(np.abs(np.degrees(xi[3:])) <= 10.5)


def test_map_too_small_and_bad_profile():
    shape = generate_shape("rectangle", density=50, seed=0)
    with pytest.raises(ValueError):
        make_pair(shape, seed=0)
    with pytest.raises(ValueError):
        make_pair(shape, "kitti", seed=0, sample_size=10)


def test_suite_cycles_kinds():
    pairs = synthetic_suite(8, seed=1)
    assert [p.id.rsplit("-", 1)[0] for p in pairs[:4]] == ["rectangle", "L-shape", "cross", "room-with-alcoves"]
    assert len({p.id for p in pairs}) == 8


def test_route_layout():
    pairs, poly = synthetic_route(segments=6, repeats=3)
    assert len(pairs) == 18
    sparse = [p for p in pairs if "room" in p.id]
    assert len(sparse) == 3 and {p.location[0] for p in sparse} == {12.0}
    assert poly.tolist() == [[0.0, 0.0], [20.0, 0.0]]
    with pytest.raises(ValueError):
        synthetic_route(segments=4, sparse_segment=4)


# --- manifests ---------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    pairs = synthetic_suite(3, seed=0)
    path = write_manifest(pairs, tmp_path, route=[[0, 0], [1, 0]])
    back = load_manifest(path)
    assert not back.errors and len(back) == 3
    assert back.route.tolist() == [[0.0, 0.0], [1.0, 0.0]]
    for a, b in zip(pairs, back):
        assert a.id == b.id
        assert np.array_equal(b.scan.points, a.scan.points.astype(np.float32))
        assert np.array_equal(b.map.points, a.map.points.astype(np.float32))
        np.testing.assert_allclose(b.ground_truth.matrix(), a.ground_truth.matrix(), atol=1e-12)


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"units": "m", "profile": "boreas", "entries": []}))
    m = load_manifest(p)
    assert len(m) == 0 and m.profile == "boreas" and m.units == "m"


def test_bad_entries_are_collected(tmp_path):
    pairs = synthetic_suite(1, seed=0)
    path = write_manifest(pairs, tmp_path)
    doc = json.loads(path.read_text())
    good = doc["entries"][0]
    skew = dict(good, id="skew", T_qp=[1, 0.5, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1])
    missing = dict(good, id="missing", scan="nowhere.ply")
    nan_cloud = pairs[0].scan.points.copy()
    nan_cloud[0, 0] = np.nan
    write_ply(PointCloud(nan_cloud), tmp_path / "nan.ply")
    nan = dict(good, id="nan", scan="nan.ply")
    doc["entries"] += [skew, missing, nan]
    path.write_text(json.dumps(doc))
    m = load_manifest(path)
    assert [p.id for p in m] == [good["id"]]
    reasons = dict(m.errors)
    assert "pose" in reasons["skew"]
    assert "missing file" in reasons["missing"]
    assert "non-finite" in reasons["nan"]


def test_malformed_manifest(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(ManifestError):
        load_manifest(p)
