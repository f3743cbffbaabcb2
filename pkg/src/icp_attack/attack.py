"""Worst-case scan perturbations against point-to-plane ICP.

The adversarial scan is optimized directly, per pair, by momentum gradient
descent on ``alpha * L_adv + beta * L_rec`` with gradients taken through an
unrolled ICP solve. Two heuristic baselines are provided for comparison.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LocalizationPair
from .geometry import PoseError, pose_error
from .gradients import GradientConfig, icp_forward_with_tape, pose_error_gradient
from .icp import IcpConfig, IcpError, MapModel, icp_profile, run_icp
from .losses import (
    adversarial_loss,
    adversarial_loss_grad,
    reconstruction_loss,
    reconstruction_loss_grad,
    softshrink,
)
from .pointcloud import PointCloud, estimate_normals, unify_normal_signs, write_ply

__all__ = [
    "AttackConfig",
    "PerturbationResult",
    "SampleDropped",
    "adversarial_loss",
    "adversarial_loss_grad",
    "softshrink",
    "reconstruction_loss",
    "total_loss",
    "optimize_perturbation",
    "baseline_uniform",
    "baseline_normal",
    "evaluate_perturbation",
]

log = logging.getLogger(__name__)

OVERSHOOT_LEVELS = (0.5, 0.9, 0.99, 0.997, 1.0)
# Scan normals are estimated on noisy scans; at 2048 points and sigma=0.025
# forty neighbours span roughly four noise standard deviations.
SCAN_NORMAL_K = 40
MAX_CONSECUTIVE_FAILURES = 3


class SampleDropped(RuntimeError):
    """ICP did not converge on the unperturbed scan."""


def _default_unroll() -> GradientConfig:
    return GradientConfig(unroll_iterations=25, icp=icp_profile("shapenet"))


@dataclass(frozen=True)
class AttackConfig:
    lam: float = 0.1
    alpha: float = 1.0
    beta: float = 10.0
    w: tuple[float, ...] = (1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    steps: int = 50
    step_size: float | None = None  # defaults to 0.05 * lam
    momentum: float = 0.9
    unroll: GradientConfig = field(default_factory=_default_unroll)
    seed: int = 0
    scalar_form: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", tuple(float(v) for v in self.w))
        if len(self.w) != 6:
            raise ValueError("w needs six weights")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def effective_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 0.05 * self.lam if self.lam > 0 else 1e-3

    @property
    def eval_icp(self) -> IcpConfig:
        return self.unroll.icp

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "alpha": self.alpha,
            "beta": self.beta,
            "w": list(self.w),
            "steps": self.steps,
            "step_size": self.effective_step,
            "momentum": self.momentum,
            "unroll_iterations": self.unroll.unroll_iterations,
            "seed": self.seed,
            "scalar_form": self.scalar_form,
        }


@dataclass(frozen=True, eq=False)
class PerturbationResult:
    original: PointCloud
    adversarial: PointCloud
    lam: float
    method: str
    pose_error_before: PoseError | None = None
    pose_error_after: PoseError | None = None
    converged_before: bool | None = None
    converged_after: bool | None = None
    loss_trace: tuple[float, ...] = ()
    warning: str | None = None

    @property
    def displacements(self) -> np.ndarray:
        return self.adversarial.points - self.original.points

    @property
    def overshoots(self) -> np.ndarray:
        return np.maximum(np.linalg.norm(self.displacements, axis=1) - self.lam, 0.0)

    @property
    def overshoot_quantiles(self) -> dict[float, float]:
        o = self.overshoots
        return {q: float(np.quantile(o, q)) for q in OVERSHOOT_LEVELS}

    def to_dict(self) -> dict:
        def err(e):
            return None if e is None else e.to_list()

        return {
            "method": self.method,
            "lambda": self.lam,
            "points": len(self.original),
            "pose_error_before": err(self.pose_error_before),
            "pose_error_after": err(self.pose_error_after),
            "converged_before": self.converged_before,
            "converged_after": self.converged_after,
            "overshoot_quantiles": {str(k): v for k, v in self.overshoot_quantiles.items()},
            "max_displacement": float(np.linalg.norm(self.displacements, axis=1).max()),
            "loss_trace": list(self.loss_trace),
            "warning": self.warning,
        }

    def save(self, out_dir, stem: str) -> None:
        """JSON summary plus a PLY of the adversarial scan with displacements
        stored in the normal slots."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        write_ply(self.adversarial, out / f"{stem}.ply", normals=self.displacements)


def total_loss(err: PoseError, original, adversarial, config: AttackConfig) -> float:
    l_adv = adversarial_loss(err, config.w, config.scalar_form) if config.alpha else 0.0
    l_rec = reconstruction_loss(original, adversarial, config.lam) if config.beta else 0.0
    return config.alpha * l_adv + config.beta * l_rec


def _unit_rows(g: np.ndarray) -> np.ndarray:
    """Scale a per-point gradient so its largest row has unit norm."""
    peak = np.linalg.norm(g, axis=1).max()
    return g / peak if peak > 0 else g


def optimize_perturbation(
    pair: LocalizationPair, config: AttackConfig, map_model: MapModel | None = None
) -> PerturbationResult:
    """Per-scan momentum descent on the total loss.

    The step direction is the total-loss gradient rescaled so the most
    sensitive point moves ``step_size`` per unit of velocity. A forward
    failure reverts the iterate and halves the step; three consecutive
    failures end the run with a warning. The best-by-loss iterate is kept.
    """
    mm = map_model or MapModel(pair.map)
    eval_cfg = config.eval_icp
    X = np.asarray(pair.scan.points, dtype=float)
    base = run_icp(X, mm, eval_cfg)
    if not base.converged:
        raise SampleDropped(f"{pair.id}: ICP did not converge on the unperturbed scan")
    err_before = pose_error(base.estimate, pair.ground_truth)

    X_adv = X.copy()
    prev = X_adv
    velocity = np.zeros_like(X)
    step = config.effective_step
    best_loss, best_X = np.inf, X_adv
    trace: list[float] = []
    failures, warning = 0, None

    for it in range(config.steps + 1):
        try:
            res, tape = icp_forward_with_tape(X_adv, mm, config.unroll)
        except IcpError as exc:
            failures += 1
            log.debug("%s: forward failed at step %d: %s", pair.id, it, exc)
            if failures >= MAX_CONSECUTIVE_FAILURES:
                warning = f"stopped after {failures} consecutive ICP failures"
                break
            step /= 2.0
            velocity[:] = 0.0
            X_adv = prev
            continue
        failures = 0
        err = pose_error(res.estimate, pair.ground_truth)
        loss = total_loss(err, X, X_adv, config)
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_X = loss, X_adv
        if it == config.steps:
            break
        grad = config.beta * reconstruction_loss_grad(X, X_adv, config.lam)
        if config.alpha:
            grad += config.alpha * pose_error_gradient(
                tape, pair.ground_truth, config.w, config.scalar_form
            )
        velocity = config.momentum * velocity + _unit_rows(grad)
        prev = X_adv
        X_adv = X_adv - step * velocity

    adv_cloud = pair.scan.with_points(best_X)
    after = _evaluate(adv_cloud, pair, mm, eval_cfg)
    return PerturbationResult(
        pair.scan,
        adv_cloud,
        config.lam,
        "attack",
        err_before,
        after[0],
        True,
        after[1],
        tuple(trace),
        warning,
    )


def _evaluate(cloud: PointCloud, pair: LocalizationPair, mm: MapModel, cfg: IcpConfig):
    try:
        res = run_icp(cloud, mm, cfg)
    except IcpError as exc:
        log.debug("%s: evaluation ICP failed: %s", pair.id, exc)
        return None, False
    return pose_error(res.estimate, pair.ground_truth), res.converged


def evaluate_perturbation(
    result: PerturbationResult,
    pair: LocalizationPair,
    icp_config: IcpConfig,
    map_model: MapModel | None = None,
) -> PerturbationResult:
    """Fill in before/after pose errors by running full ICP."""
    mm = map_model or MapModel(pair.map)
    before = _evaluate(result.original, pair, mm, icp_config)
    after = _evaluate(result.adversarial, pair, mm, icp_config)
    return PerturbationResult(
        result.original,
        result.adversarial,
        result.lam,
        result.method,
        before[0],
        after[0],
        before[1],
        after[1],
        result.loss_trace,
        result.warning,
    )


def baseline_uniform(scan: PointCloud, lam: float, seed=0) -> PerturbationResult:
    """Translate the whole scan by ``lam`` at a random angle in the x-y plane."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    angle = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi)
    shift = lam * np.array([np.cos(angle), np.sin(angle), 0.0])
    return PerturbationResult(scan, scan.with_points(scan.points + shift), lam, "uniform")


def baseline_normal(scan: PointCloud, lam: float, normal_k: int = SCAN_NORMAL_K) -> PerturbationResult:
    """Move each point by ``lam`` along its sign-unified planar normal.

    Normals missing from ``scan`` are estimated from the unperturbed scan.
    Points whose normal is parallel to z are left in place.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if not scan.has_normals:
        planar = bool(np.ptp(scan.points[:, 2]) == 0.0)
        scan = estimate_normals(scan, k=min(normal_k, len(scan)), planar=planar)
    n = np.array(scan.normals, dtype=float)
    n[:, 2] = 0.0
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 1e-9
    direction = np.zeros_like(n)
    direction[ok] = unify_normal_signs(n[ok] / norm[ok, None])
    return PerturbationResult(scan, scan.with_points(scan.points + lam * direction), lam, "normal")
