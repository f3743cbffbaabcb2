"""Adversarial and reconstruction losses with their gradients."""

from __future__ import annotations

import numpy as np

from .geometry import PoseError


def _split_weights(w):
    w = np.asarray(w, dtype=float).reshape(6)
    return w[:3], w[3:]


def adversarial_loss(err: PoseError, w, scalar_form: bool = False) -> float:
    """``-||w_t * rho|| - ||w_r * phi||``.

    ``scalar_form`` uses the inner products ``-|w_t . rho| - |w_r . phi|``
    instead of the elementwise-weighted norms.
    """
    wt, wr = _split_weights(w)
    if scalar_form:
        return -abs(float(wt @ err.rho)) - abs(float(wr @ err.phi))
    return -float(np.linalg.norm(wt * err.rho)) - float(np.linalg.norm(wr * err.phi))


def adversarial_loss_grad(xi, w, scalar_form: bool = False) -> np.ndarray:
    """Gradient of :func:`adversarial_loss` with respect to the twist (rho, phi).

    At a zero norm the zero subgradient is returned.
    """
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(6)
    for sl, wv in zip((slice(0, 3), slice(3, 6)), _split_weights(w)):
        v = xi[sl]
        if scalar_form:
            out[sl] = -np.sign(wv @ v) * wv
        else:
            wv2 = wv * v
            nrm = np.linalg.norm(wv2)
            if nrm > 0:
                out[sl] = -wv * wv2 / nrm
    return out


def softshrink(z, lam: float):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    z = np.asarray(z, dtype=float)
    out = np.where(z > lam, z - lam, np.where(z < -lam, z + lam, 0.0))
    return float(out) if out.ndim == 0 else out


def _displacements(original, adversarial) -> np.ndarray:
    a = getattr(original, "points", original)
    b = getattr(adversarial, "points", adversarial)
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"point counts differ: {a.shape} vs {b.shape}")
    return b - a


def reconstruction_loss(original, adversarial, lam: float) -> float:
    """Mean squared soft-shrunk displacement norm."""
    d = np.linalg.norm(_displacements(original, adversarial), axis=1)
    return float(np.mean(softshrink(d, lam) ** 2))


def reconstruction_loss_grad(original, adversarial, lam: float) -> np.ndarray:
    """Gradient with respect to the adversarial coordinates, (N, 3)."""
    D = _displacements(original, adversarial)
    d = np.linalg.norm(D, axis=1)
    s = softshrink(d, lam)
    scale = np.zeros_like(d)
    moved = d > lam
    scale[moved] = 2.0 * s[moved] / (len(d) * d[moved])
    return scale[:, None] * D
