"""Point-to-plane ICP with a trim filter and Cauchy IRLS weights.

Residuals are ``r_i = n_i . (T p_i - q_i)`` against the nearest map point
``q_i`` and its normal ``n_i``. Each iteration solves the weighted normal
equations for a twist ``delta`` and updates ``T <- exp(delta) @ T``.
Convergence is declared when ``||delta|| < tolerance``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import Pose, exp_se3
from .pointcloud import PointCloud, SpatialIndex, estimate_normals

MAX_CONDITION = 1e12
PLANAR_MASK = (True, True, False, False, False, True)
FULL_MASK = (True,) * 6


class IcpError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


class AssociationEmptyError(IcpError):
    """No scan point survived the trim filter."""


class DegenerateGeometryError(IcpError):
    """The weighted normal equations are singular or ill-conditioned."""


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 100
    tolerance: float = 1e-4
    trim_distance: float = 5.0
    cauchy_k: float = 1.0
    dof_mask: tuple[bool, ...] = FULL_MASK
    initial_guess: Pose = field(default_factory=Pose.identity)

    def __post_init__(self) -> None:
        mask = tuple(bool(m) for m in self.dof_mask)
        object.__setattr__(self, "dof_mask", mask)
        if len(mask) != 6 or not any(mask):
            raise ValueError("dof_mask needs six entries with at least one free DOF")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not (self.tolerance > 0 and self.trim_distance > 0 and self.cauchy_k > 0):
            raise ValueError("tolerance, trim_distance and cauchy_k must be positive")

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(self.dof_mask)

    def replace(self, **changes) -> IcpConfig:
        return replace(self, **changes)


PROFILES = {
    "shapenet": IcpConfig(
        max_iterations=150, tolerance=1e-4, trim_distance=0.3, cauchy_k=0.15, dof_mask=PLANAR_MASK
    ),
    "boreas": IcpConfig(
        max_iterations=100, tolerance=1e-4, trim_distance=5.0, cauchy_k=1.0, dof_mask=FULL_MASK
    ),
}


def icp_profile(name: str, **overrides) -> IcpConfig:
    try:
        base = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown ICP profile {name!r}; choose from {sorted(PROFILES)}") from None
    return base.replace(**overrides) if overrides else base


@dataclass(frozen=True)
class IcpResult:
    estimate: Pose
    iterations: int
    converged: bool
    final_cost: float | None
    correspondence_count: int
    last_update_norm: float | None = None

    def to_dict(self) -> dict:
        return {
            "pose": self.estimate.to_list(),
            "iterations": self.iterations,
            "converged": self.converged,
            "final_cost": self.final_cost,
            "correspondence_count": self.correspondence_count,
        }


@dataclass(frozen=True, eq=False)
class Correspondences:
    scan_idx: np.ndarray  # indices into the scan of the kept points
    map_idx: np.ndarray
    x: np.ndarray  # transformed scan points, (n, 3)
    q: np.ndarray  # matched map points
    n: np.ndarray  # matched map normals
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.scan_idx)

    @property
    def residuals(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.n, self.x - self.q)

    @property
    def jacobian(self) -> np.ndarray:
        """(n, 6) rows [n_i, x_i x n_i] for left perturbations."""
        return np.hstack([self.n, np.cross(self.x, self.n)])


class MapModel:
    """A map cloud with normals and its spatial index."""

    def __init__(self, cloud: PointCloud, normal_k: int | None = None):
        if not cloud.has_normals:
            planar = bool(np.ptp(cloud.points[:, 2]) == 0.0)
            cloud = estimate_normals(cloud, **({"k": normal_k} if normal_k else {}), planar=planar)
        self.cloud = cloud
        self.index = SpatialIndex(cloud)
        self.points = cloud.points
        self.normals = cloud.normals


def _as_map(map_cloud) -> MapModel:
    return map_cloud if isinstance(map_cloud, MapModel) else MapModel(map_cloud)


def associate(
    scan: PointCloud | np.ndarray,
    map_model: MapModel | PointCloud,
    current: Pose,
    trim_distance: float,
) -> Correspondences:
    """Match each transformed scan point to its nearest map point.

    Pairs farther apart than ``trim_distance`` are dropped.
    """
    mm = _as_map(map_model)
    pts = scan.points if isinstance(scan, PointCloud) else np.asarray(scan, dtype=float)
    x = current.apply(pts)
    dist, idx = mm.index.nearest(x)
    keep = np.flatnonzero(dist <= trim_distance)
    if keep.size == 0:
        raise AssociationEmptyError("no correspondences within trim distance")
    m = idx[keep]
    return Correspondences(keep, m, x[keep], mm.points[m], mm.normals[m], dist[keep])


def cauchy_weight(residual, k: float):
    r = np.asarray(residual, dtype=float) / k
    out = 1.0 / (1.0 + r * r)
    return float(out) if out.ndim == 0 else out


def cauchy_cost(residual, k: float) -> float:
    r = np.asarray(residual, dtype=float) / k
    return float(0.5 * k * k * np.sum(np.log1p(r * r)))


@dataclass(frozen=True, eq=False)
class StepSolve:
    """Everything about one Gauss-Newton solve that the backward pass needs."""

    weights: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray  # full (n, 6)
    factor: tuple  # Cholesky factor of the free-DOF system
    free: np.ndarray
    delta: np.ndarray  # full 6-vector, zeros on masked DOFs


def solve_step(corr: Correspondences, cauchy_k: float, dof_mask: Sequence[bool]) -> StepSolve:
    free = np.flatnonzero(dof_mask)
    if len(corr) < free.size:
        raise DegenerateGeometryError(
            f"{len(corr)} correspondences for {free.size} free DOF"
        )
    r = corr.residuals
    J = corr.jacobian
    w = cauchy_weight(r, cauchy_k)
    Jf = J[:, free]
    A = Jf.T @ (w[:, None] * Jf)
    b = Jf.T @ (w * r)
    ev = np.linalg.eigvalsh(A)
    if ev[0] <= 0.0 or ev[-1] / ev[0] > MAX_CONDITION:
        raise DegenerateGeometryError("ill-conditioned normal equations")
    factor = cho_factor(A)
    delta = np.zeros(6)
    delta[free] = -cho_solve(factor, b)
    return StepSolve(w, r, J, factor, free, delta)


def icp_step(
    corr: Correspondences, current: Pose, cauchy_k: float, dof_mask: Sequence[bool]
) -> tuple[Pose, np.ndarray]:
    """One IRLS Gauss-Newton update; returns (updated pose, twist update)."""
    s = solve_step(corr, cauchy_k, dof_mask)
    return exp_se3(s.delta) @ current, s.delta


@dataclass(frozen=True, eq=False)
class TapeEntry:
    pose: Pose  # estimate before this iteration's update
    corr: Correspondences
    solve: StepSolve


def iterate_icp(scan_points: np.ndarray, mm: MapModel, config: IcpConfig, tape=None) -> IcpResult:
    """Core loop shared by :func:`run_icp` and the taped forward pass."""
    T = config.initial_guess
    corr = None
    delta_norm = None
    converged = False
    it = 0
    for it in range(config.max_iterations):
        try:
            corr = associate(scan_points, mm, T, config.trim_distance)
            s = solve_step(corr, config.cauchy_k, config.dof_mask)
        except IcpError as exc:
            raise type(exc)(str(exc), iteration=it) from exc
        if tape is not None:
            tape.append(TapeEntry(T, corr, s))
        T = exp_se3(s.delta) @ T
        delta_norm = float(np.linalg.norm(s.delta))
        if delta_norm < config.tolerance:
            converged = True
            break
    iterations = 0 if corr is None else it + 1
    if corr is None:
        return IcpResult(T, 0, False, None, 0, None)
    x = T.apply(scan_points[corr.scan_idx])
    cost = cauchy_cost(np.einsum("ij,ij->i", corr.n, x - corr.q), config.cauchy_k)
    return IcpResult(T, iterations, converged, cost, len(corr), delta_norm)


def run_icp(scan: PointCloud | np.ndarray, map_cloud, config: IcpConfig) -> IcpResult:
    """Align ``scan`` to ``map_cloud``; returns the scan-to-map estimate."""
    pts = scan.points if isinstance(scan, PointCloud) else np.asarray(scan, dtype=float)
    return iterate_icp(pts, _as_map(map_cloud), config)
