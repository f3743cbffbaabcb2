"""Synthetic localization pairs and manifest-driven ingestion.

Convention: ``ground_truth`` (T_QP) maps scan-frame points into the map
frame, so a scan is built from map-frame samples by applying T_QP^-1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import (
    BOREAS_POSE_RANGES,
    SHAPENET_POSE_RANGES,
    Pose,
    PoseValidationError,
    sample_random_pose,
)
from .pointcloud import (
    PointCloud,
    add_gaussian_noise,
    estimate_normals,
    normalize_to_unit,
    read_cloud,
    write_cloud,
)

log = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "L-shape", "cross", "ring", "room-with-alcoves")
# A ring leaves yaw unobservable, so it is kept out of benchmark suites.
SUITE_KINDS = ("rectangle", "L-shape", "cross", "room-with-alcoves")
DEFAULT_DENSITY = 600.0


@dataclass(frozen=True)
class PairProfile:
    name: str
    pose_ranges: dict
    sample_size: int | None
    noise_sigma: float


PAIR_PROFILES = {
    "shapenet": PairProfile("shapenet", SHAPENET_POSE_RANGES, 2048, 0.025),
    "boreas": PairProfile("boreas", BOREAS_POSE_RANGES, None, 0.0),
}


@dataclass(frozen=True, eq=False)
class LocalizationPair:
    scan: PointCloud
    map: PointCloud
    ground_truth: Pose
    id: str = "pair"
    location: tuple[float, float] | None = None
    profile: str = "shapenet"

    @property
    def planar(self) -> bool:
        return bool(np.ptp(self.map.points[:, 2]) == 0.0)


# --- shapes -----------------------------------------------------------------


def _outline(kind: str, rng: np.random.Generator) -> list[np.ndarray]:
    """Polylines (vertex arrays) describing the shape boundary.

    All are closed loops except the two walls of the room-with-alcoves.
    """
    if kind == "rectangle":
        w, h = 1.0, rng.uniform(0.4, 0.9)
        return [np.array([[-w, -h], [w, -h], [w, h], [-w, h]])]
    if kind == "L-shape":
        a, b = rng.uniform(0.35, 0.6, size=2)
        return [np.array([[-1, -1], [1, -1], [1, -1 + 2 * a], [-1 + 2 * b, -1 + 2 * a], [-1 + 2 * b, 1], [-1, 1]])]
    if kind == "cross":
        a, b = rng.uniform(0.25, 0.45, size=2)
        return [
            np.array(
                [[-a, -1], [a, -1], [a, -b], [1, -b], [1, b], [a, b],
                 [a, 1], [-a, 1], [-a, b], [-1, b], [-1, -b], [-a, -b]]
            )
        ]
    if kind == "ring":
        return []
    if kind == "room-with-alcoves":
        # Open-ended long room. Along its axis it is constrained only by the
        # slanted sides of a few shallow alcoves.
        L, H = 1.0, rng.uniform(0.18, 0.28)
        n_alc = int(rng.integers(1, 3))
        centres = np.sort(rng.uniform(-0.6, 0.6, size=n_alc))
        lines = [np.array([[-L, -H], [L, -H]])]
        top = [[-L, H]]
        for c in centres:
            depth = rng.uniform(0.06, 0.1)
            slant = depth / np.tan(np.deg2rad(rng.uniform(30.0, 45.0)))
            back = 0.06
            top += [[c - back / 2 - slant, H], [c - back / 2, H + depth],
                    [c + back / 2, H + depth], [c + back / 2 + slant, H]]
        top.append([L, H])
        lines.append(np.array(top))
        return lines
    raise ValueError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")


def _sample_polyline(verts: np.ndarray, density: float, offset: float, closed: bool = True) -> np.ndarray:
    if closed:
        verts = np.vstack([verts, verts[:1]])
    seg = np.diff(verts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    n = max(int(round(density * total)), 1)
    s = (offset + np.arange(n)) * (total / n)
    k = np.searchsorted(cum, s, side="right") - 1
    frac = (s - cum[k]) / seg_len[k]
    return verts[k] + frac[:, None] * seg[k]


def generate_shape(kind: str, density: float = DEFAULT_DENSITY, seed=0) -> PointCloud:
    """Evenly spaced boundary samples of a 2D shape (z = 0), unit-normalised."""
    if density <= 0:
        raise ValueError("density must be positive")
    rng = np.random.default_rng(seed)
    outlines = _outline(kind, rng)
    offset = rng.uniform(0.0, 1.0)
    if kind == "ring":
        n = max(int(round(density * 2 * np.pi)), 3)
        ang = (offset + np.arange(n)) * (2 * np.pi / n)
        xy = np.c_[np.cos(ang), np.sin(ang)]
    else:
        is_closed = kind != "room-with-alcoves"
        xy = np.vstack([_sample_polyline(v, density, offset, is_closed) for v in outlines])
    pts = np.c_[xy, np.zeros(len(xy))]
    return normalize_to_unit(PointCloud(pts))


def generate_scene(
    kind: str,
    seed=0,
    scale: float = 20.0,
    height: float = 3.0,
    spacing: float = 0.25,
) -> PointCloud:
    """A 3D scene in meters: the shape outline as vertical walls over a floor.

    The floor makes z, roll and pitch observable, so full 6-DOF ICP is well
    posed. Walls and floor are sampled on a grid of ``spacing``.
    """
    if scale <= 0 or height <= 0 or spacing <= 0:
        raise ValueError("scale, height and spacing must be positive")
    outline = generate_shape(kind, density=scale / spacing, seed=seed).points[:, :2] * scale
    layers = np.arange(spacing / 2, height, spacing)
    walls = np.c_[np.tile(outline, (len(layers), 1)), np.repeat(layers, len(outline))]
    g = np.arange(-scale, scale + spacing / 2, spacing)
    fx, fy = np.meshgrid(g, g, indexing="ij")
    floor = np.c_[fx.ravel(), fy.ravel()]
    floor = floor[np.linalg.norm(floor, axis=1) <= scale]
    floor = np.c_[floor, np.zeros(len(floor))]
    return PointCloud(np.vstack([walls, floor]))


# --- pairs ------------------------------------------------------------------


def with_map_normals(cloud: PointCloud, k: int = 10) -> PointCloud:
    if cloud.has_normals:
        return cloud
    planar = bool(np.ptp(cloud.points[:, 2]) == 0.0)
    return estimate_normals(cloud, k=k, planar=planar)


def make_pair(
    map_cloud: PointCloud,
    profile: str = "shapenet",
    seed=0,
    *,
    sample_size: int | None = None,
    noise_sigma: float | None = None,
    ground_truth: Pose | None = None,
    pair_id: str = "pair",
    location=None,
) -> LocalizationPair:
    """Subsample, add noise, and move a map into a random scan frame.

    The scan carries no normals.
    """
    try:
        prof = PAIR_PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown pair profile {profile!r}") from None
    map_cloud = with_map_normals(map_cloud)
    planar = bool(np.ptp(map_cloud.points[:, 2]) == 0.0)
    n = prof.sample_size if sample_size is None else sample_size
    sigma = prof.noise_sigma if noise_sigma is None else noise_sigma
    m = len(map_cloud)
    if n is None:
        n = m
    if n > m:
        raise ValueError(f"map has {m} points, cannot sample {n}")

    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(m, size=n, replace=False))
    src = add_gaussian_noise(PointCloud(map_cloud.points[idx]), sigma, seed=rng, planar=planar)
    T = ground_truth if ground_truth is not None else sample_random_pose(seed=rng, **prof.pose_ranges)
    scan = src.transformed(T.inverse())
    loc = None if location is None else (float(location[0]), float(location[1]))
    return LocalizationPair(scan, map_cloud, T, pair_id, loc, profile)


def synthetic_suite(
    count: int,
    seed=0,
    kinds=SUITE_KINDS,
    profile: str = "shapenet",
    density: float = DEFAULT_DENSITY,
) -> list[LocalizationPair]:
    """``count`` pairs cycling through ``kinds``, one shape per pair."""
    seeds = np.random.SeedSequence(seed).spawn(count)
    pairs = []
    for i, ss in enumerate(seeds):
        shape_seed, pair_seed = ss.spawn(2)
        kind = kinds[i % len(kinds)]
        shape = generate_shape(kind, density, np.random.default_rng(shape_seed))
        pairs.append(
            make_pair(shape, profile, np.random.default_rng(pair_seed), pair_id=f"{kind}-{i:04d}")
        )
    return pairs


RICH_KINDS = ("rectangle", "L-shape", "cross")


def synthetic_route(
    segments: int = 16,
    repeats: int = 2,
    sparse_segment: int | None = None,
    spacing: float = 4.0,
    seed=0,
    density: float = DEFAULT_DENSITY,
) -> tuple[list[LocalizationPair], np.ndarray]:
    """Pairs along a straight route with one landmark-sparse segment.

    Every segment gets its own shape; the sparse one is a room-with-alcoves,
    the others cycle through the landmark-rich kinds. Repeats at a segment
    share the shape and sit 0.2 m apart laterally. Returns the pairs and the
    route polyline (meters).
    """
    if segments < 1 or repeats < 1:
        raise ValueError("segments and repeats must be >= 1")
    sparse = segments // 2 if sparse_segment is None else sparse_segment
    if not 0 <= sparse < segments:
        raise ValueError("sparse_segment out of range")
    seg_seeds = np.random.SeedSequence(seed).spawn(segments)
    pairs = []
    for i, ss in enumerate(seg_seeds):
        kind = "room-with-alcoves" if i == sparse else RICH_KINDS[i % len(RICH_KINDS)]
        shape_seed, *pair_seeds = ss.spawn(repeats + 1)
        shape = generate_shape(kind, density, np.random.default_rng(shape_seed))
        for j, ps in enumerate(pair_seeds):
            loc = (i * spacing, 0.2 * (j - (repeats - 1) / 2))
            pairs.append(
                make_pair(shape, "shapenet", np.random.default_rng(ps),
                          pair_id=f"seg{i:03d}-{kind}-r{j}", location=loc)
            )
    polyline = np.array([[0.0, 0.0], [(segments - 1) * spacing, 0.0]])
    return pairs, polyline


# --- manifests ---------------------------------------------------------------


class ManifestError(ValueError):
    pass


@dataclass
class ManifestLoad:
    pairs: list[LocalizationPair]
    errors: list[tuple[str, str]]
    profile: str
    units: str
    route: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def _check_cloud(cloud: PointCloud, what: str) -> None:
    if len(cloud) == 0:
        raise ManifestError(f"{what} is empty")
    if not np.all(np.isfinite(cloud.points)):
        raise ManifestError(f"{what} has non-finite coordinates")


def _load_entry(entry: dict, base: Path, profile: str) -> LocalizationPair:
    try:
        pid = str(entry["id"])
        scan_path, map_path = base / entry["scan"], base / entry["map"]
        T = Pose.from_list(entry["T_qp"])
    except KeyError as exc:
        raise ManifestError(f"missing field {exc}") from None
    except PoseValidationError as exc:
        raise ManifestError(f"pose validation: {exc}") from None
    for p in (scan_path, map_path):
        if not p.exists():
            raise ManifestError(f"missing file {p}")
    scan, map_cloud = read_cloud(scan_path), read_cloud(map_path)
    _check_cloud(scan, "scan")
    _check_cloud(map_cloud, "map")
    if map_cloud.has_normals:
        nrm = map_cloud.normals / np.linalg.norm(map_cloud.normals, axis=1, keepdims=True)
        map_cloud = PointCloud(map_cloud.points, nrm)
    loc = entry.get("location")
    loc = None if loc is None else (float(loc[0]), float(loc[1]))
    return LocalizationPair(scan, with_map_normals(map_cloud), T, pid, loc, profile)


def iter_manifest(path) -> Iterator[tuple[str, LocalizationPair | ManifestError]]:
    """Yield (entry id, pair or error) one entry at a time."""
    path = Path(path)
    doc = json.loads(path.read_text())
    profile = doc.get("profile", "shapenet")
    for i, entry in enumerate(doc.get("entries", [])):
        eid = str(entry.get("id", i)) if isinstance(entry, dict) else str(i)
        try:
            yield eid, _load_entry(entry, path.parent, profile)
        except (ManifestError, ValueError, OSError) as exc:
            yield eid, exc if isinstance(exc, ManifestError) else ManifestError(str(exc))


def load_manifest(path) -> ManifestLoad:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    pairs, errors = [], []
    for eid, item in iter_manifest(path):
        if isinstance(item, Exception):
            log.warning("manifest entry %s rejected: %s", eid, item)
            errors.append((eid, str(item)))
        else:
            pairs.append(item)
    route = doc.get("route")
    if route is not None:
        route = np.asarray(route, dtype=float)
        if route.ndim != 2 or route.shape[1] != 2 or len(route) < 1:
            raise ManifestError(f"{path}: route must be a list of [x, y] vertices")
    return ManifestLoad(
        pairs, errors, doc.get("profile", "shapenet"), doc.get("units", "normalized"), route
    )


def write_manifest(
    pairs,
    out_dir,
    profile: str = "shapenet",
    units: str = "normalized",
    name: str = "manifest.json",
    route=None,
) -> Path:
    """Write clouds as PLY plus a manifest referencing them.

    ``route`` optionally stores a polyline used to bin pair locations.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for pair in pairs:
        scan_name, map_name = f"{pair.id}_scan.ply", f"{pair.id}_map.ply"
        write_cloud(pair.scan, out / scan_name)
        write_cloud(pair.map, out / map_name)
        entry = {"id": pair.id, "scan": scan_name, "map": map_name, "T_qp": pair.ground_truth.to_list()}
        if pair.location is not None:
            entry["location"] = list(pair.location)
        entries.append(entry)
    doc = {"units": units, "profile": profile, "entries": entries}
    if route is not None:
        doc["route"] = np.asarray(route, dtype=float).tolist()
    path = out / name
    path.write_text(json.dumps(doc, indent=2))
    return path
