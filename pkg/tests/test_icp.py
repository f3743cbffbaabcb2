import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import box_scene
from icp_attack.data import generate_shape, make_pair
from icp_attack.geometry import Pose, exp_se3, log_se3, pose_error
from icp_attack.icp import (
    FULL_MASK,
    PLANAR_MASK,
    AssociationEmptyError,
    DegenerateGeometryError,
    IcpConfig,
    MapModel,
    associate,
    cauchy_cost,
    cauchy_weight,
    icp_profile,
    icp_step,
    run_icp,
    solve_step,
)
from icp_attack.pointcloud import PointCloud, estimate_normals


def wall(n=200, x=0.0, seed=0):
    rng = np.random.default_rng(seed)
    yz = rng.uniform(-1, 1, (n, 2))
    pts = np.c_[np.full(n, x), yz]
    return PointCloud(pts, np.tile([1.0, 0, 0], (n, 1)))


def test_profiles():
    s, b = icp_profile("shapenet"), icp_profile("boreas")
    assert (s.cauchy_k, s.trim_distance, s.max_iterations, s.dof_mask) == (0.15, 0.3, 150, PLANAR_MASK)
    assert (b.cauchy_k, b.trim_distance, b.max_iterations, b.dof_mask) == (1.0, 5.0, 100, FULL_MASK)
    assert s.tolerance == b.tolerance == 1e-4
    assert icp_profile("shapenet", max_iterations=7).max_iterations == 7
    with pytest.raises(ValueError):
        icp_profile("kitti")


@pytest.mark.parametrize(
    "kw", [{"tolerance": 0}, {"trim_distance": -1}, {"cauchy_k": 0}, {"dof_mask": (False,) * 6}]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        IcpConfig(**kw)


def test_cauchy_weight_values():
    k = 0.15
    assert cauchy_weight(0.0, k) == 1.0
    assert cauchy_weight(k, k) == 0.5
    assert cauchy_weight(3 * k, k) == pytest.approx(0.1)


@given(st.floats(-1e3, 1e3), st.floats(1e-3, 10))
def test_cauchy_weight_range(r, k):
    w = cauchy_weight(r, k)
    assert 0.0 < w <= 1.0 or (w == 0.0 and abs(r / k) > 1e150)


def test_associate_self_match():
    cloud = estimate_normals(PointCloud(box_scene().points))
    corr = associate(cloud, MapModel(cloud), Pose.identity(), 0.3)
    assert np.array_equal(corr.map_idx, corr.scan_idx)
    assert np.all(corr.distance == 0)


def test_associate_trim_boundary():
    mp = wall()
    d = 0.3 + 0.01
    scan = np.array([[d, 0.0, 0.0], [0.05, 0.1, 0.2]])
    scan[0, 1:] = mp.points[0, 1:]
    corr = associate(scan, MapModel(mp), Pose.identity(), 0.3)
    assert list(corr.scan_idx) == [1]
    with pytest.raises(AssociationEmptyError):
        associate(scan[:1], MapModel(mp), Pose.identity(), 0.3)


def test_associate_matches_brute_force():
    rng = np.random.default_rng(1)
    mp = estimate_normals(PointCloud(rng.uniform(-1, 1, (600, 3))))
    scan = rng.uniform(-1, 1, (300, 3))
    T = exp_se3([0.05, -0.02, 0.03, 0.02, -0.01, 0.05])
    corr = associate(scan, MapModel(mp), T, 0.2)
    x = T.apply(scan)
    d = np.linalg.norm(x[:, None] - mp.points[None], axis=2)
    keep = np.flatnonzero(d.min(axis=1) <= 0.2)
    assert np.array_equal(corr.scan_idx, keep)
    assert np.array_equal(corr.map_idx, np.argmin(d[keep], axis=1))


def test_step_on_aligned_data_is_zero():
    cloud = estimate_normals(PointCloud(box_scene().points))
    corr = associate(cloud, MapModel(cloud), Pose.identity(), 1.0)
    _, delta = icp_step(corr, Pose.identity(), 1.0, FULL_MASK)
    np.testing.assert_allclose(delta, 0.0, atol=1e-15)


def test_step_closed_form_single_wall():
    mp = wall()
    scan = mp.points + [0.2, 0.0, 0.0]
    corr = associate(scan, MapModel(mp), Pose.identity(), 1.0)
    mask = (True, False, False, False, True, True)  # x, pitch, yaw are observable
    _, delta = icp_step(corr, Pose.identity(), 5.0, mask)
    np.testing.assert_allclose(delta, [-0.2, 0, 0, 0, 0, 0], atol=1e-12)


def test_corridor_is_degenerate():
    mp = wall()
    scan = mp.points + [0.1, 0.0, 0.0]
    corr = associate(scan, MapModel(mp), Pose.identity(), 1.0)
    with pytest.raises(DegenerateGeometryError):
        icp_step(corr, Pose.identity(), 1.0, FULL_MASK)
    with pytest.raises(DegenerateGeometryError) as info:
        run_icp(scan, mp, IcpConfig(dof_mask=FULL_MASK))
    assert info.value.iteration == 0


def test_step_matches_weighted_lstsq():
    rng = np.random.default_rng(2)
    mp = estimate_normals(PointCloud(box_scene(seed=2).points))
    scan = exp_se3([0.03, -0.02, 0.01, 0.01, 0.02, -0.015]).apply(mp.points)
    scan = scan + rng.normal(0, 0.01, scan.shape)
    corr = associate(scan, MapModel(mp), Pose.identity(), 0.5)
    s = solve_step(corr, 0.05, FULL_MASK)
    sw = np.sqrt(s.weights)
    ref, *_ = np.linalg.lstsq(sw[:, None] * corr.jacobian, -sw * corr.residuals, rcond=None)
    np.testing.assert_allclose(s.delta, ref, atol=1e-12)


def test_residual_jacobian_by_finite_differences():
    rng = np.random.default_rng(3)
    mp = estimate_normals(PointCloud(box_scene(seed=3).points))
    scan = mp.points + rng.normal(0, 0.02, mp.points.shape)
    T = exp_se3([0.02, 0.01, -0.03, 0.01, -0.02, 0.03])
    corr = associate(scan, MapModel(mp), T, 0.5)
    h = 1e-7
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        xp = exp_se3(e).apply(corr.x)
        xm = exp_se3(-e).apply(corr.x)
        num = np.einsum("ij,ij->i", corr.n, xp - xm) / (2 * h)
        np.testing.assert_allclose(num, corr.jacobian[:, k], atol=1e-7)


def test_cost_non_increasing_with_frozen_associations():
    rng = np.random.default_rng(4)
    mp = estimate_normals(PointCloud(box_scene(seed=4).points))
    scan = exp_se3([0.05, -0.04, 0.02, 0.03, -0.02, 0.05]).apply(mp.points)
    scan = scan + rng.normal(0, 0.01, scan.shape)
    corr0 = associate(scan, MapModel(mp), Pose.identity(), 0.5)
    p = scan[corr0.scan_idx]
    T, k = Pose.identity(), 0.05

    def cost(T):
        return cauchy_cost(np.einsum("ij,ij->i", corr0.n, T.apply(p) - corr0.q), k)

    prev = cost(T)
    for _ in range(15):
        x = T.apply(p)
        corr = type(corr0)(corr0.scan_idx, corr0.map_idx, x, corr0.q, corr0.n, corr0.distance)
        T, _ = icp_step(corr, T, k, FULL_MASK)
        now = cost(T)
        assert now <= prev + 1e-12
        prev = now


def test_noisy_identity_scan():
    shape = generate_shape("L-shape", seed=1)
    pair = make_pair(shape, "shapenet", seed=2, ground_truth=Pose.identity())
    res = run_icp(pair.scan, pair.map, icp_profile("shapenet"))
    assert res.converged
    assert pose_error(res.estimate, Pose.identity()).planar_norm < 0.05


def test_recovers_shapenet_transforms(rectangle_pair):
    res = run_icp(rectangle_pair.scan, rectangle_pair.map, icp_profile("shapenet"))
    assert res.converged and res.iterations <= 150
    assert pose_error(res.estimate, rectangle_pair.ground_truth).planar_norm < 0.02
    assert res.last_update_norm < 1e-4


def test_zero_iterations_returns_initial_guess(rectangle_pair):
    guess = exp_se3([0.01, 0, 0, 0, 0, 0.02])
    res = run_icp(rectangle_pair.scan, rectangle_pair.map, icp_profile("shapenet", max_iterations=0, initial_guess=guess))
    assert not res.converged and res.iterations == 0
    assert res.estimate.allclose(guess)


def test_deterministic_and_masked(rectangle_pair):
    cfg = icp_profile("shapenet", initial_guess=exp_se3([0.01, -0.01, 0, 0, 0, 0.05]))
    a = run_icp(rectangle_pair.scan, rectangle_pair.map, cfg)
    b = run_icp(rectangle_pair.scan, rectangle_pair.map, cfg)
    assert a.to_dict() == b.to_dict()
    xi = log_se3(a.estimate @ cfg.initial_guess.inverse())
    assert np.all(xi[[2, 3, 4]] == 0.0)


def test_equivariance_under_rigid_motion(rectangle_pair):
    S = exp_se3([0.3, -0.2, 0.0, 0.0, 0.0, 0.7])
    cfg = icp_profile("shapenet")
    a = run_icp(rectangle_pair.scan, rectangle_pair.map, cfg)
    b = run_icp(rectangle_pair.scan.transformed(S), rectangle_pair.map.transformed(S), cfg)
    assert b.estimate.allclose(S @ a.estimate @ S.inverse(), atol=1e-6)


def test_full_dof_on_box():
    rng = np.random.default_rng(5)
    mp = box_scene(n_side=20, seed=5)
    T = exp_se3([0.05, -0.08, 0.04, 0.05, -0.04, 0.08])
    scan = T.inverse().apply(mp.points) + rng.normal(0, 0.005, mp.points.shape)
    res = run_icp(scan, mp, icp_profile("boreas", cauchy_k=0.1, trim_distance=0.5))
    assert res.converged
    assert np.abs(pose_error(res.estimate, T).xi).max() < 5e-3


def test_result_json_fields(rectangle_pair):
    doc = run_icp(rectangle_pair.scan, rectangle_pair.map, icp_profile("shapenet")).to_dict()
    assert set(doc) == {"pose", "iterations", "converged", "final_cost", "correspondence_count"}
    assert len(doc["pose"]) == 16


def test_trim_everything_raises_with_iteration(rectangle_pair):
    far = rectangle_pair.scan.points + [10.0, 0, 0]
    with pytest.raises(AssociationEmptyError) as info:
        run_icp(far, rectangle_pair.map, icp_profile("shapenet"))
    assert info.value.iteration == 0
