"""Reverse-mode derivative of the final ICP pose error w.r.t. scan points.

The forward pass is the ordinary ICP loop, truncated at ``K`` iterations,
with every iteration's correspondences and Gauss-Newton solve recorded on a
tape. The backward pass walks the tape in reverse:

* pose adjoints are carried as left-perturbation 6-vectors,
* ``T_{j+1} = exp(delta_j) T_j`` is differentiated through the SE(3)
  adjoint and left Jacobian,
* each linear solve ``A delta = -b`` is differentiated implicitly by one
  extra back-substitution with the stored Cholesky factor,
* Cauchy weights are differentiated through their residuals (optional),
* correspondences and trim decisions are treated as constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .geometry import Pose, exp_se3, log_se3, pose_error, se3_adjoint, se3_left_jacobian
from .icp import IcpConfig, IcpError, IcpResult, MapModel, TapeEntry, iterate_icp
from .losses import adversarial_loss, adversarial_loss_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradientConfig:
    unroll_iterations: int = 25
    icp: IcpConfig = field(default_factory=IcpConfig)
    fd_epsilon: float = 1e-5
    differentiate_weights: bool = True

    def __post_init__(self) -> None:
        if self.unroll_iterations < 1:
            raise ValueError("unroll_iterations must be >= 1")

    @property
    def forward_config(self) -> IcpConfig:
        return self.icp.replace(max_iterations=self.unroll_iterations)


@dataclass(eq=False)
class Tape:
    entries: list[TapeEntry]
    scan_points: np.ndarray
    result: IcpResult
    cauchy_k: float
    differentiate_weights: bool = True

    def __len__(self) -> int:
        return len(self.entries)

    def signature(self) -> tuple:
        """Discrete state of the forward pass (associations and stopping)."""
        return tuple(
            (e.corr.scan_idx.tobytes(), e.corr.map_idx.tobytes()) for e in self.entries
        )


def icp_forward_with_tape(scan, map_cloud, config: GradientConfig) -> tuple[IcpResult, Tape]:
    pts = getattr(scan, "points", scan)
    pts = np.asarray(pts, dtype=float)
    mm = map_cloud if isinstance(map_cloud, MapModel) else MapModel(map_cloud)
    entries: list[TapeEntry] = []
    result = iterate_icp(pts, mm, config.forward_config, tape=entries)
    return result, Tape(entries, pts, result, config.icp.cauchy_k, config.differentiate_weights)


def pose_adjoint_to_points(tape: Tape, eps_bar: np.ndarray) -> np.ndarray:
    """Pull a left-perturbation adjoint of the final pose back to the scan."""
    cauchy_k = tape.cauchy_k
    grad = np.zeros_like(tape.scan_points)
    for entry in reversed(tape.entries):
        s, corr = entry.solve, entry.corr
        delta = s.delta
        delta_bar = se3_left_jacobian(delta).T @ eps_bar
        eps_prev = se3_adjoint(exp_se3(delta)).T @ eps_bar

        u = np.zeros(6)
        u[s.free] = cho_solve(s.factor, delta_bar[s.free])
        J, r, w = s.jacobian, s.residuals, s.weights
        c = J @ u
        e = r + J @ delta
        r_bar = -w * c
        if tape.differentiate_weights:
            w_bar = -c * e
            r_bar += w_bar * (-2.0 * r / cauchy_k**2) * w * w
        J_bar = -w[:, None] * (e[:, None] * u + c[:, None] * delta)
        x_bar = r_bar[:, None] * corr.n + np.cross(corr.n, J_bar[:, 3:])

        eps_prev[:3] += x_bar.sum(axis=0)
        eps_prev[3:] += np.cross(corr.x, x_bar).sum(axis=0)
        # x = C p + t, so p_bar = C^T x_bar.
        grad[corr.scan_idx] += x_bar @ entry.pose.rotation
        eps_bar = eps_prev
    return grad


def pose_error_gradient(
    tape: Tape, T_gt: Pose, loss_weights, scalar_form: bool = False
) -> np.ndarray:
    """(N, 3) gradient of the adversarial loss w.r.t. the scan points."""
    xi = log_se3(tape.result.estimate @ T_gt.inverse())
    g_xi = adversarial_loss_grad(xi, loss_weights, scalar_form)
    if not np.any(g_xi):
        return np.zeros_like(tape.scan_points)
    # d xi = J_l(xi)^-1 eps for a left perturbation eps of the final estimate.
    eps_bar = np.linalg.solve(se3_left_jacobian(xi).T, g_xi)
    return pose_adjoint_to_points(tape, eps_bar)


@dataclass
class GradientCheckReport:
    coordinates: list[tuple[int, int]]
    analytic: list[float]
    numeric: list[float]
    relative_errors: list[float]
    excluded: int
    tolerance: float
    required_fraction: float = 0.95

    @property
    def checked(self) -> int:
        return len(self.relative_errors)

    @property
    def pass_fraction(self) -> float:
        if not self.relative_errors:
            return 0.0
        return float(np.mean(np.asarray(self.relative_errors) <= self.tolerance))

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.pass_fraction >= self.required_fraction

    def to_dict(self) -> dict:
        return {
            "coordinates": [list(c) for c in self.coordinates],
            "analytic": self.analytic,
            "numeric": self.numeric,
            "relative_errors": self.relative_errors,
            "excluded": self.excluded,
            "checked": self.checked,
            "pass_fraction": self.pass_fraction,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(
    scan,
    map_cloud,
    config: GradientConfig,
    T_gt: Pose,
    loss_weights,
    sample_coordinates: int,
    seed=0,
    tolerance: float = 1e-3,
    scalar_form: bool = False,
    gradient: np.ndarray | None = None,
) -> GradientCheckReport:
    """Central differences on randomly chosen scan coordinates.

    Probes whose +/- evaluations change the association pattern or the
    iteration count are excluded. ``gradient`` overrides the analytic
    gradient (used to self-test the harness).
    """
    mm = map_cloud if isinstance(map_cloud, MapModel) else MapModel(map_cloud)
    pts = np.asarray(getattr(scan, "points", scan), dtype=float)
    _, tape = icp_forward_with_tape(pts, mm, config)
    if gradient is None:
        gradient = pose_error_gradient(tape, T_gt, loss_weights, scalar_form)
    base_sig = tape.signature()

    rng = np.random.default_rng(seed)
    n_coord = pts.size
    picks = rng.choice(n_coord, size=min(sample_coordinates, n_coord), replace=False)
    eps = config.fd_epsilon

    def probe(p: np.ndarray):
        try:
            res, t = icp_forward_with_tape(p, mm, config)
        except IcpError:
            return None
        if t.signature() != base_sig:
            return None
        return adversarial_loss(pose_error(res.estimate, T_gt), loss_weights, scalar_form)

    coords, ana, num, rel = [], [], [], []
    excluded = 0
    for flat in picks:
        i, j = divmod(int(flat), 3)
        plus, minus = pts.copy(), pts.copy()
        plus[i, j] += eps
        minus[i, j] -= eps
        fp, fm = probe(plus), probe(minus)
        if fp is None or fm is None:
            excluded += 1
            continue
        fd = (fp - fm) / (2.0 * eps)
        coords.append((i, j))
        ana.append(float(gradient[i, j]))
        num.append(float(fd))
        rel.append(relative_error(gradient[i, j], fd))
    if excluded:
        log.info("gradient check: %d probes crossed an association boundary", excluded)
    return GradientCheckReport(coords, ana, num, rel, excluded, tolerance)
