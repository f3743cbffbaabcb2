"""Point-cloud container, exact nearest-neighbour index and helpers.

Planar (2D) clouds are stored as 3D with ``z = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_NORMAL_K = 10
DEFAULT_INTERP_K = 3
INTERP_EPS = 1e-8
# Exact zero test used by the sign-unification rule.
ZERO_COMPONENT = 1e-12


def _frozen(a: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return None
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    # True where the normal came from a rank-deficient neighbourhood.
    degenerate: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.degenerate is not None:
            object.__setattr__(self, "degenerate", _frozen(np.asarray(self.degenerate, dtype=bool)))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def with_points(self, points: np.ndarray) -> PointCloud:
        """Same normals, new coordinates."""
        return PointCloud(points, self.normals, self.degenerate)

    def subset(self, idx) -> PointCloud:
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.degenerate is None else self.degenerate[idx],
        )

    def transformed(self, T) -> PointCloud:
        normals = None if self.normals is None else T.rotate(self.normals)
        return PointCloud(T.apply(self.points), normals, self.degenerate)


class SpatialIndex:
    """Exact k-d tree nearest-neighbour search; ties go to the lowest index."""

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
        if len(pts) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (distances, indices) of the closest indexed point."""
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if len(self.points) == 1:
            d = np.linalg.norm(q - self.points[0], axis=1)
            return d, np.zeros(len(q), dtype=np.intp)
        d, i = self._tree.query(q, k=2)
        dist, idx = d[:, 0].copy(), i[:, 0].copy()
        for row in np.flatnonzero(d[:, 1] == d[:, 0]):
            cand = self._tree.query_ball_point(q[row], dist[row] * (1 + 1e-12) + 1e-300)
            cand = np.asarray(cand)
            cd = np.linalg.norm(self.points[cand] - q[row], axis=1)
            idx[row] = cand[cd == cd.min()].min()
        return dist, idx

    def knn(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        k = min(k, len(self.points))
        d, i = self._tree.query(q, k=k)
        if k == 1:
            d, i = d[:, None], i[:, None]
        return d, i


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def unify_normal_signs(normals: np.ndarray) -> np.ndarray:
    """Flip so x > 0; if x == 0 then y > 0; if both are zero then z > 0."""
    n = np.array(normals, dtype=float)
    x0 = np.abs(n[:, 0]) < ZERO_COMPONENT
    y0 = np.abs(n[:, 1]) < ZERO_COMPONENT
    key = np.where(~x0, n[:, 0], np.where(~y0, n[:, 1], n[:, 2]))
    n[key < 0] *= -1.0
    return n


def estimate_normals(
    cloud: PointCloud, k: int = DEFAULT_NORMAL_K, planar: bool = False
) -> PointCloud:
    """PCA normals from the ``k`` nearest neighbours of each point.

    With ``planar=True`` the fit is done in the x-y plane and normals have
    zero z-component. Degenerate neighbourhoods get ``+z`` and are flagged.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(cloud) < k:
        raise ValueError(f"cloud has {len(cloud)} points, fewer than k={k}")
    pts = cloud.points
    _, nbr = SpatialIndex(pts).knn(pts, k)
    dims = 2 if planar else 3
    local = pts[nbr][:, :, :dims]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    evals, evecs = np.linalg.eigh(cov)
    top = evals[:, -1]
    scale = np.maximum(top, 1e-300)
    if planar:
        degenerate = top <= 1e-24
    else:
        degenerate = evals[:, 1] <= 1e-10 * scale
    normals = np.zeros_like(pts)
    normals[:, :dims] = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = [0.0, 0.0, 1.0]
    return PointCloud(pts, unify_normal_signs(normals), degenerate)


def farthest_point_sampling(
    cloud: PointCloud, m: int, seed=0, start: int | None = None
) -> np.ndarray:
    """Greedy farthest-point subsample of ``m`` indices.

    The first index is ``start`` if given, otherwise drawn from ``seed``.
    """
    pts = cloud.points
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= {n}, got {m}")
    first = int(np.random.default_rng(seed).integers(n)) if start is None else int(start)
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = first
    mind = np.linalg.norm(pts - pts[first], axis=1)
    mind[first] = -1.0  # never re-pick, even among duplicates
    for j in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[j] = nxt
        mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
        mind[chosen[: j + 1]] = -1.0
    return chosen


def interpolate_vectors(
    source_points: PointCloud,
    source_values: np.ndarray,
    targets: PointCloud,
    k: int = DEFAULT_INTERP_K,
) -> np.ndarray:
    """Inverse-distance weighted average of the ``k`` nearest source values.

    A target that coincides with sources (distance <= eps) takes their value.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    values = np.asarray(source_values, dtype=float)
    src = source_points.points if isinstance(source_points, PointCloud) else np.asarray(source_points)
    tgt = targets.points if isinstance(targets, PointCloud) else np.asarray(targets)
    if len(values) != len(src):
        raise ValueError("one value per source point required")
    d, i = SpatialIndex(src).knn(tgt, k)
    w = 1.0 / np.maximum(d, INTERP_EPS)
    hit = d <= INTERP_EPS
    rows = hit.any(axis=1)
    w[rows] = hit[rows].astype(float)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkj->nj", w, values[i])


def normalize_to_unit(cloud: PointCloud) -> PointCloud:
    """Centre on the centroid and scale so the farthest point has radius 1."""
    pts = cloud.points
    if len(pts) == 0:
        raise ValueError("empty cloud")
    centred = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centred, axis=1).max()
    if radius == 0.0:
        raise ValueError("all points identical; cannot normalise")
    return PointCloud(centred / radius, cloud.normals, cloud.degenerate)


def add_gaussian_noise(
    cloud: PointCloud, sigma: float, seed=0, planar: bool = False
) -> PointCloud:
    """Independent N(0, sigma^2) per coordinate (x, y only when planar)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return cloud
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=cloud.points.shape)
    if planar:
        noise[:, 2] = 0.0
    return cloud.with_points(cloud.points + noise)


# --- I/O ------------------------------------------------------------------


def write_csv(cloud: PointCloud, path) -> None:
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, data.astype(np.float32), delimiter=",", fmt="%.9g")


def read_csv(path) -> PointCloud:
    data = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float32).astype(float)
    if data.shape[1] not in (3, 6):
        raise ValueError(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")
    return PointCloud(data[:, :3], data[:, 3:] if data.shape[1] == 6 else None)


_PLY_FIELDS = ("x", "y", "z", "nx", "ny", "nz")


def write_ply(cloud: PointCloud, path, normals: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with float32 fields.

    ``normals`` overrides the cloud's normals (used to store displacements).
    """
    extra = cloud.normals if normals is None else np.asarray(normals)
    data = cloud.points if extra is None else np.hstack([cloud.points, extra])
    names = _PLY_FIELDS[: data.shape[1]]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(data)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.astype("<f4").tobytes())


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        count, props, fmt = None, [], None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element" and tok[1] == "vertex":
                count = int(tok[2])
            elif tok[0] == "property":
                if tok[1] != "float":
                    raise ValueError(f"{path}: only float properties supported")
                props.append(tok[2])
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian" or count is None:
            raise ValueError(f"{path}: unsupported PLY layout")
        raw = np.frombuffer(fh.read(4 * count * len(props)), dtype="<f4")
    data = raw.reshape(count, len(props)).astype(float)
    col = {p: j for j, p in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    nrm = data[:, [col["nx"], col["ny"], col["nz"]]] if "nx" in col else None
    return PointCloud(pts, nrm)


def read_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in (".csv", ".txt"):
        return read_csv(path)
    raise ValueError(f"unsupported cloud format: {path}")


def write_cloud(cloud: PointCloud, path) -> None:
    if Path(path).suffix.lower() == ".ply":
        write_ply(cloud, path)
    else:
        write_csv(cloud, path)
