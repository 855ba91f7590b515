"""Central finite-difference helpers.

Used as the fallback whenever a model does not supply analytic Jacobians,
and for directional derivatives of the closed-loop vector field inside the
sensitivity integration. The step rule is h_j = max(h0, h0 * |x_j|) per
coordinate, applied symmetrically.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_STEP = 1e-6


def fd_step(x: np.ndarray, h0: float = DEFAULT_STEP) -> np.ndarray:
    """Per-coordinate central-difference step: max(h0, h0*|x_j|)."""
    return np.maximum(h0, h0 * np.abs(x))


def _perturbed(x: np.ndarray, h0: float):
    """Stack of 2d points: x +/- h along each coordinate, leading axis first.

    Works for single points (d,) and batches (..., d) alike.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    h = fd_step(x, h0)
    pts = np.broadcast_to(x, (2 * d,) + x.shape).copy()
    for j in range(d):
        pts[j, ..., j] += h[..., j]
        pts[d + j, ..., j] -= h[..., j]
    return pts, h, d


def jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
             h0: float = DEFAULT_STEP) -> np.ndarray:
    """Jacobian of a batched vector function by central differences.

    ``fn`` must accept (..., d) and return (..., k); the result has shape
    (..., k, d) and is evaluated with a single batched call over the 2d
    perturbed points.
    """
    pts, h, d = _perturbed(x, h0)
    vals = np.asarray(fn(pts), dtype=float)
    cols = [(vals[j] - vals[d + j]) / (2.0 * h[..., j, None])
            for j in range(d)]
    return np.stack(cols, axis=-1)


def gradient(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
             h0: float = DEFAULT_STEP) -> np.ndarray:
    """Gradient of a batched scalar function by central differences.

    ``fn`` must accept (..., d) and return (...,); the result has shape
    (..., d).
    """
    pts, h, d = _perturbed(x, h0)
    vals = np.asarray(fn(pts), dtype=float)
    cols = [(vals[j] - vals[d + j]) / (2.0 * h[..., j]) for j in range(d)]
    return np.stack(cols, axis=-1)


def directional_derivatives(field: Callable[[np.ndarray], np.ndarray],
                            y: np.ndarray, directions: np.ndarray,
                            h0: float = DEFAULT_STEP):
    """Field value at y and J(y) @ directions by directional differences.

    ``directions`` has shape (d, k) (columns are directions). Each column is
    normalized before perturbing so that growing sensitivity columns do not
    degrade the difference step. Returns (f(y), J @ directions) using one
    batched field call of 1 + 2k points.
    """
    d, k = directions.shape
    norms = np.sqrt(np.sum(directions * directions, axis=0))
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = directions / safe
    pts = np.empty((1 + 2 * k, d))
    pts[0] = y
    pts[1:1 + k] = y + h0 * unit.T
    pts[1 + k:] = y - h0 * unit.T
    vals = np.asarray(field(pts), dtype=float)
    jd = (vals[1:1 + k] - vals[1 + k:]).T * (norms / (2.0 * h0))
    return vals[0], jd
