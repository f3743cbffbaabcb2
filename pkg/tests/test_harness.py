import json

import numpy as np
import pytest

from icp_attack import harness
from icp_attack.attack import AttackConfig, baseline_uniform
from icp_attack.data import generate_shape, make_pair
from icp_attack.geometry import PoseError
from icp_attack.harness import (
    compute_allowance,
    planar_translation_error,
    route_map,
    run_benchmark,
    snap_to_polyline,
)
from icp_attack.pointcloud import PointCloud

FAST = AttackConfig(lam=0.1, beta=1000, steps=8)


def test_planar_translation_error():
    assert planar_translation_error(PoseError(np.array([3.0, 4.0, 12.0]), np.ones(3))) == 5.0
    assert planar_translation_error(PoseError(np.zeros(3), np.zeros(3))) == 0.0
    assert planar_translation_error(PoseError(np.array([0.07, 0, 0]), np.zeros(3))) == pytest.approx(0.07)


def test_allowance_zero_inside_bound():
    c = PointCloud(np.zeros((5, 3)))
    assert compute_allowance([baseline_uniform(c, 0.1, 0), baseline_uniform(c, 0.3, 1)]) == 0.0


def test_allowance_order_statistic():
    o = np.random.default_rng(0).uniform(0, 0.2, 100_000)
    got = compute_allowance([o[:40_000], o[40_000:]])
    s = np.sort(o)
    # linear interpolation between the bracketing order statistics
    h = 0.997 * (len(o) - 1)
    lo = int(np.floor(h))
    assert got == pytest.approx(s[lo] + (h - lo) * (s[lo + 1] - s[lo]), rel=1e-12)
    assert got == pytest.approx(0.1994, abs=5e-4)


def test_allowance_validation():
    with pytest.raises(ValueError):
        compute_allowance([])
    with pytest.raises(ValueError):
        compute_allowance([np.zeros(3)], quantile=0.0)


def test_snap_to_polyline():
    poly = [[0, 0], [4, 0], [4, 3]]
    s, foot = snap_to_polyline([[1, 1], [5, 1], [10, 10], [-2, 0]], poly)
    np.testing.assert_allclose(s, [1, 5, 7, 0])
    np.testing.assert_allclose(foot, [[1, 0], [4, 1], [4, 3], [0, 0]])


def test_snap_matches_dense_sampling():
    rng = np.random.default_rng(3)
    poly = rng.uniform(-5, 5, (5, 2))
    pts = rng.uniform(-6, 6, (50, 2))
    seg = np.diff(poly, axis=0)
    t = np.linspace(0, 1, 20001)
    dense = np.vstack([a + t[:, None] * d for a, d in zip(poly[:-1], seg)])
    arc = np.concatenate(
        [np.linalg.norm(d) * t + np.linalg.norm(seg[:i], axis=1).sum() for i, d in enumerate(seg)]
    )
    nearest = np.argmin(np.linalg.norm(pts[:, None] - dense[None], axis=2), axis=1)
    s, _ = snap_to_polyline(pts, poly)
    np.testing.assert_allclose(s, arc[nearest], atol=2e-3)


@pytest.fixture(scope="module")
def tiny_pairs():
    out = []
    for i, kind in enumerate(("rectangle", "cross", "L-shape")):
        shape = generate_shape(kind, density=150, seed=20 + i)
        out.append(make_pair(shape, seed=i, sample_size=250, pair_id=f"{kind}-{i}"))
    return out


@pytest.fixture(scope="module")
def tiny_table(tiny_pairs):
    return run_benchmark(tiny_pairs, [0.1], FAST, seed=4)


def test_benchmark_rows_are_consistent(tiny_table, tiny_pairs):
    rows = [r for r in tiny_table.rows if r.lam == 0.1]
    assert [r.method for r in rows] == ["original", "uniform", "normal", "attack"]
    for r in rows:
        assert r.samples_used + r.samples_dropped == len(tiny_pairs)
        assert (r.pct_attack_larger is None) == (r.method == "attack")
        if r.pct_attack_larger is not None:
            assert 0.0 <= r.pct_attack_larger <= 1.0
    # every method is scored on the same pairs
    assert all(set(e) == set(harness.METHODS) for e in tiny_table.errors[0.1].values())


def test_benchmark_is_reproducible(tiny_table, tiny_pairs):
    again = run_benchmark(list(reversed(tiny_pairs)), [0.1], FAST, seed=4)
    assert again.to_json() == tiny_table.to_json()


def test_benchmark_outputs(tmp_path, tiny_table):
    json_path, csv_path = tiny_table.write(tmp_path / "t.json")
    doc = json.loads(json_path.read_text())
    assert doc["rows"][0]["lambda"] == 0.1
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("lambda,method") and len(lines) == 5


def test_zero_bound_attack_matches_original(tiny_pairs):
    cfg = AttackConfig(beta=1e4, steps=5, step_size=1e-4)
    tab = run_benchmark(tiny_pairs[:1], [0.0], cfg)
    assert tab.mean("attack", 0.0) == pytest.approx(tab.mean("original", 0.0), abs=2e-3)


def test_drop_is_method_consistent(tiny_pairs, tiny_table, monkeypatch):
    real = harness._baseline_task

    def flaky(args):
        out = real(args)
        if args[0].id.startswith("cross"):
            for v in out.values():
                v["normal"] = harness._Outcome(None, False)
        return out

    monkeypatch.setattr(harness, "_baseline_task", flaky)
    tab = run_benchmark(tiny_pairs, [0.1], FAST, seed=4)
    expected = sorted(set(tiny_table.dropped[0.1]) | {"cross-1"})
    assert tab.dropped[0.1] == expected
    assert all(r.samples_used == 3 - len(expected) and r.samples_dropped == len(expected) for r in tab.rows)
    assert "cross-1" not in tab.errors[0.1]


def test_benchmark_rejects_bad_input(tiny_pairs):
    with pytest.raises(ValueError):
        run_benchmark([], [0.1])
    with pytest.raises(ValueError):
        run_benchmark([tiny_pairs[0], tiny_pairs[0]], [0.1], FAST)


def test_all_dropped_is_an_error(tiny_pairs, monkeypatch):
    monkeypatch.setattr(harness, "_attack_task", lambda a: {"original": harness._Outcome(None, False), "attack": {}})
    with pytest.raises(RuntimeError):
        run_benchmark(tiny_pairs, [0.1], FAST)


def _located(pair, loc, pid):
    return make_pair(pair.map, seed=0, sample_size=250, pair_id=pid, location=loc)


def test_route_single_location(tiny_pairs, monkeypatch):
    pair = _located(tiny_pairs[0], (2.0, 1.0), "only")
    rep = route_map([pair], FAST, cap=6.0)
    direct = harness._route_task((pair, FAST))
    assert len(rep.entries) == 1
    assert rep.entries[0].raw_error == direct.error
    assert rep.entries[0].location == (2.0, 1.0)


def test_route_cap(tiny_pairs, monkeypatch):
    monkeypatch.setattr(harness, "_route_task", lambda a: harness._Outcome(9.2, True))
    pairs = [_located(tiny_pairs[0], (0.0, 0.0), "a"), _located(tiny_pairs[0], (3.0, 0.0), "b")]
    rep = route_map(pairs, FAST, cap=6.0)
    for e in rep.entries:
        assert e.worst_error == 6.0 and e.raw_error == 9.2 and e.cap_applied
    assert [e.bin for e in rep.entries] == [0, 3]


def test_route_bins_average_repeats(tiny_pairs, monkeypatch):
    errs = {"a": 1.0, "b": 3.0, "c": 10.0}
    monkeypatch.setattr(harness, "_route_task", lambda a: harness._Outcome(errs[a[0].id], True))
    pairs = [
        _located(tiny_pairs[0], (0.2, 0.1), "a"),
        _located(tiny_pairs[0], (0.4, -0.1), "b"),
        _located(tiny_pairs[0], (5.5, 0.0), "c"),
    ]
    rep = route_map(pairs, FAST, cap=6.0, polyline=[[0, 0], [10, 0]])
    assert [(e.bin, e.raw_error, e.samples) for e in rep.entries] == [(0, 2.0, 2), (5, 10.0, 1)]
    assert json.loads(rep.to_json())["cap"] == 6.0


def test_route_requires_locations(tiny_pairs):
    with pytest.raises(ValueError):
        route_map(tiny_pairs, FAST, cap=6.0)
