"""Explicit upwind backward induction for the chart HJB equation (d = 2, 3).

Nodes are chart points whose coordinates, including the implied last mass,
are multiples of ``h``. For a state ``i`` with ``m_i > 0`` the derivative in
direction ``e_j - e_i`` is the forward difference toward the node reached by
moving mass ``h`` from ``i`` to ``j``. That node is always on the lattice, so
no boundary closure beyond this one-sided stencil is needed; states with
``m_i = 0`` carry zero weight. The scheme is monotone when
``dt <= h / (2 M d)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from ..model import MfcpSpec, _term, congestion_cost, recover_control, terminal_value
from ..network import DualEvaluation


class ConfigurationError(ValueError):
    pass


@dataclass
class ValueGrid:
    spec: MfcpSpec
    h: float
    times: np.ndarray
    values: np.ndarray  # (N_t + 1, n + 1, ..., n + 1); NaN outside the chart

    @property
    def n(self) -> int:
        return self.values.shape[1] - 1

    def inside(self) -> np.ndarray:
        idx = np.indices(self.values.shape[1:])
        return idx.sum(axis=0) <= self.n

    def nodes(self) -> np.ndarray:
        """Chart coordinates of all lattice nodes, shape (P, d - 1)."""
        idx = np.argwhere(self.inside())
        return idx * self.h

    def node_values(self, k: int) -> np.ndarray:
        return self.values[k][self.inside()]

    def _filled(self, arr):
        """Copy the nearest on-face value into out-of-chart cells so interpolation stays finite."""
        if self.values.ndim == 2:
            return arr
        out = arr.copy()
        ii, jj = np.nonzero(~self.inside())
        excess = ii + jj - self.n
        ti = ii - (excess + 1) // 2
        tj = jj - excess // 2
        out[..., ii, jj] = arr[..., ti, tj]
        return out

    def _axes(self):
        axis = np.linspace(0.0, 1.0, self.n + 1)
        return (self.times,) + (axis,) * (self.values.ndim - 1)

    def value_at(self, t, eta) -> np.ndarray:
        """Multilinear interpolation in (t, eta)."""
        interp = RegularGridInterpolator(self._axes(), self._filled(self.values))
        eta = np.atleast_2d(eta)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (eta.shape[0],))
        return interp(np.column_stack([t, eta]))

    def chart_gradient(self):
        """Chart gradient on every slice: central differences, one-sided at the edges."""
        V = self._filled(self.values)
        spacing = [self.h] * (V.ndim - 1)
        grads = np.gradient(V, *spacing, axis=tuple(range(1, V.ndim)))
        if V.ndim == 2:
            grads = [grads]
        return np.stack(grads, axis=-1)

    def dual_at(self, t, eta) -> DualEvaluation:
        """Interpolated value, time derivative and chart gradient, shaped like a network evaluation."""
        V = self._filled(self.values)
        dt = np.gradient(V, self.times, axis=0)
        G = self.chart_gradient()
        eta = np.atleast_2d(eta)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (eta.shape[0],))
        pts = np.column_stack([t, eta])
        axes = self._axes()
        value = RegularGridInterpolator(axes, V)(pts)
        d_t = RegularGridInterpolator(axes, dt)(pts)
        d_eta = np.column_stack([RegularGridInterpolator(axes, G[..., k])(pts) for k in range(G.shape[-1])])
        return DualEvaluation(value, d_t, d_eta)

    def policy(self):
        """Feedback rates from interpolated chart gradients."""
        G = self.chart_gradient()
        interps = [RegularGridInterpolator(self._axes(), G[..., k]) for k in range(G.shape[-1])]
        spec = self.spec

        def policy(t, m):
            m = np.asarray(m, dtype=np.float64)
            flat = m.reshape(-1, spec.d)
            tt = np.broadcast_to(np.clip(np.asarray(t, dtype=np.float64), self.times[0], self.times[-1]).reshape(-1), (len(flat),))
            pts = np.column_stack([tt, flat[:, :-1]])
            p = np.column_stack([f(pts) for f in interps])
            dual = DualEvaluation(np.zeros(len(flat)), np.zeros(len(flat)), p)
            return recover_control(spec, dual, t, flat).reshape(m.shape[:-1] + (spec.d, spec.d))

        return policy

    def to_csv(self, path, every: int = 1) -> None:
        """Rows ``t, eta_1..eta_{d-1}, value`` for every ``every``-th time slice."""
        nodes = self.nodes()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"eta{j + 1}" for j in range(nodes.shape[1])] + ["value"])
            for k in range(0, len(self.times), every):
                for eta, v in zip(nodes, self.node_values(k)):
                    w.writerow([repr(float(self.times[k]))] + [repr(float(x)) for x in eta] + [repr(float(v))])


def _shift(V, delta):
    """``out[k] = V[k + delta]`` with NaN where ``k + delta`` leaves the array."""
    out = np.full_like(V, np.nan)
    src, dst = [], []
    for dlt, size in zip(delta, V.shape):
        if dlt >= 0:
            src.append(slice(dlt, size))
            dst.append(slice(0, size - dlt))
        else:
            src.append(slice(0, size + dlt))
            dst.append(slice(-dlt, size))
    out[tuple(dst)] = V[tuple(src)]
    return out


def solve_grid_hjb(spec: MfcpSpec, n_steps: int, h: float) -> ValueGrid:
    """Backward induction ``V(t_k) = V(t_{k+1}) - dt * H(V(t_{k+1}))`` on the chart lattice."""
    d = spec.d
    if d not in (2, 3):
        raise ConfigurationError("grid oracle supports d = 2 or 3 only")
    n = int(round(1.0 / h))
    if n < 1 or abs(n * h - 1.0) > 1e-9:
        raise ConfigurationError("1/h must be an integer")
    dt = spec.T / n_steps
    if dt > h / (2.0 * spec.M * d) * (1 + 1e-12):
        raise ConfigurationError(f"CFL violated: dt={dt:g} > h/(2 M d)={h / (2 * spec.M * d):g}")

    shape = (n + 1,) * (d - 1)
    idx = np.indices(shape)
    inside = idx.sum(axis=0) <= n
    eta = np.moveaxis(idx, 0, -1) * h
    m = np.concatenate([eta, (1.0 - eta.sum(axis=-1))[..., None]], axis=-1)
    m = np.where(inside[..., None], np.clip(m, 0.0, 1.0), np.nan)
    counts = np.concatenate([idx, (n - idx.sum(axis=0))[None]], axis=0)  # lattice masses in units of h

    # chart offset of moving mass h from state i to state j
    moves = {}
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            delta = np.zeros(d - 1, dtype=int)
            if j < d - 1:
                delta[j] += 1
            if i < d - 1:
                delta[i] -= 1
            moves[i, j] = (tuple(delta), inside & (counts[i] >= 1))

    f0 = congestion_cost(spec, np.nan_to_num(m))
    c = spec.cost_matrix
    values = np.empty((n_steps + 1,) + shape)
    V = np.where(inside, terminal_value(spec, np.nan_to_num(m)), np.nan)
    values[-1] = V
    for k in range(n_steps - 1, -1, -1):
        H = np.zeros(shape)
        for i in range(d):
            Hi = -f0[..., i]
            for j in range(d):
                if i == j:
                    continue
                delta, ok = moves[i, j]
                z = np.where(ok, (_shift(V, delta) - V) / h, 0.0)
                val, _ = _term(spec, z, c[i, j])
                Hi = Hi + val
            H = H + np.nan_to_num(m[..., i]) * Hi
        V = np.where(inside, V - dt * H, np.nan)
        values[k] = V
    times = np.linspace(0.0, spec.T, n_steps + 1)
    return ValueGrid(spec, h, times, values)
