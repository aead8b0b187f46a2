"""Probability simplex S_d and its chart.

A point of S_d is a probability vector ``m`` of length ``d``. The chart drops
the last coordinate, giving ``eta`` in the corner set
``{eta >= 0, sum(eta) <= 1}`` of R^{d-1}. All functions accept a single point
or a batch with the coordinate axis last.
"""
from __future__ import annotations

import numpy as np

SIMPLEX_TOL = 1e-12


class SimplexError(ValueError):
    """Raised for points outside S_d or its chart."""


def check_simplex(m, tol: float = SIMPLEX_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] < 2:
        raise SimplexError(f"need at least 2 states, got shape {m.shape}")
    if np.any(m < -tol) or np.any(np.abs(m.sum(axis=-1) - 1.0) > tol):
        raise SimplexError("point is not a probability vector")
    return m


def check_chart(eta, tol: float = SIMPLEX_TOL) -> np.ndarray:
    eta = np.asarray(eta, dtype=np.float64)
    if np.any(eta < -tol):
        raise SimplexError("chart point has a negative coordinate")
    if np.any(eta.sum(axis=-1) > 1.0 + tol):
        raise SimplexError("chart point has coordinate sum above 1 (outside the chart)")
    return eta


def lift(eta) -> np.ndarray:
    """Map chart coordinates back onto S_d by appending ``1 - sum(eta)``."""
    eta = check_chart(eta)
    last = 1.0 - eta.sum(axis=-1, keepdims=True)
    return np.concatenate([eta, last], axis=-1)


def project(m) -> np.ndarray:
    """Drop the last coordinate."""
    m = check_simplex(m)
    return m[..., :-1].copy()


def sample_uniform(d: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform (flat Dirichlet) draws on S_d via normalized exponentials."""
    if d < 2:
        raise SimplexError("d must be at least 2")
    shape = (d,) if size is None else (size, d)
    e = rng.standard_exponential(shape)
    return e / e.sum(axis=-1, keepdims=True)


def chart_gradient_to_directional(p, i: int) -> np.ndarray:
    """Directional-derivative vector ``D^i`` from a chart gradient.

    ``i`` is a 0-based state index. For ``i < d-1`` the result is
    ``(p_1 - p_i, ..., p_{d-1} - p_i, -p_i)``; for the last state it is
    ``(p, 0)``. Both cases are ``pt - pt[i]`` with ``pt = (p, 0)``.
    """
    p = np.asarray(p, dtype=np.float64)
    d = p.shape[-1] + 1
    if not 0 <= i < d:
        raise IndexError(f"state index {i} out of range for d={d}")
    pt = _pad_zero(p)
    return pt - pt[..., i : i + 1]


def directional_matrix(p) -> np.ndarray:
    """All ``D^i`` at once: ``Z[..., i, j] = pt_j - pt_i`` with ``pt = (p, 0)``."""
    pt = _pad_zero(np.asarray(p, dtype=np.float64))
    return pt[..., None, :] - pt[..., :, None]


def distance_to_boundary(eta) -> np.ndarray:
    """Euclidean distance from a chart point to the boundary of the chart."""
    eta = np.asarray(eta, dtype=np.float64)
    k = eta.shape[-1]
    face = (1.0 - eta.sum(axis=-1)) / np.sqrt(k)
    return np.minimum(eta.min(axis=-1), face)


def _pad_zero(p: np.ndarray) -> np.ndarray:
    return np.concatenate([p, np.zeros(p.shape[:-1] + (1,))], axis=-1)
