"""Fokker-Planck flow of the controlled chain and the deterministic cost.

A policy is any callable ``policy(t, m) -> rates`` where ``m`` has shape
``(..., d)`` and the result ``(..., d, d)`` holds transition rates in
``[0, M]`` (the diagonal is ignored).
"""
from __future__ import annotations

import numpy as np

from ..model import MfcpSpec, recover_control, terminal_value, total_running_cost
from ..network import Architecture, evaluate
from ..simplex import check_simplex

DRIFT_TOL = 1e-10


class IntegrationError(RuntimeError):
    pass


def zero_policy(d: int):
    def policy(t, m):
        return np.zeros(np.shape(m)[:-1] + (d, d))

    return policy


def constant_policy(rates):
    rates = np.asarray(rates, dtype=np.float64)

    def policy(t, m):
        return np.broadcast_to(rates, np.shape(m)[:-1] + rates.shape)

    return policy


def piecewise_constant_policy(T: float, t0: float, controls):
    """Open-loop rates ``controls[k]`` on the k-th of equal intervals of [t0, T].

    ``controls`` has shape ``(n_intervals, d, d)`` or, for a batch of
    candidate controls, ``(batch, n_intervals, d, d)`` matching ``m``'s batch.
    """
    controls = np.asarray(controls, dtype=np.float64)
    n = controls.shape[-3]

    def policy(t, m):
        k = min(int((t - t0) / (T - t0) * n), n - 1)
        return controls[..., k, :, :]

    return policy


def network_policy(spec: MfcpSpec, arch: Architecture, theta):
    """Feedback rates recovered from the chart gradient of a trained network."""

    def policy(t, m):
        m = np.asarray(m, dtype=np.float64)
        dual = evaluate(arch, theta, t, m[..., :-1])
        return recover_control(spec, dual, t, m)

    return policy


def _vector_field(rates, mu):
    r = rates * (1.0 - np.eye(mu.shape[-1]))
    inflow = np.einsum("...j,...ji->...i", mu, r)
    outflow = mu * r.sum(axis=-1)
    return inflow - outflow


def _renormalize(mu):
    low = mu.min()
    if low < -DRIFT_TOL or np.any(np.abs(mu.sum(axis=-1) - 1.0) > DRIFT_TOL):
        raise IntegrationError("state left the simplex beyond tolerance")
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum(axis=-1, keepdims=True)


def _rk4(spec, m0, policy, t0, T, steps, with_cost):
    """RK4 on the flow, optionally with the accumulated running cost as an extra component."""
    mu = check_simplex(m0).astype(np.float64).copy()
    h = (T - t0) / steps
    times = t0 + h * np.arange(steps + 1)
    traj = np.empty((steps + 1,) + mu.shape)
    traj[0] = mu
    cost = np.zeros(mu.shape[:-1])

    def rhs(t, x):
        a = np.asarray(policy(t, x), dtype=np.float64)
        dc = total_running_cost(spec, t, a, x) if with_cost else 0.0
        return _vector_field(a, x), dc

    for k in range(steps):
        t = times[k]
        k1, c1 = rhs(t, mu)
        k2, c2 = rhs(t + h / 2, mu + h / 2 * k1)
        k3, c3 = rhs(t + h / 2, mu + h / 2 * k2)
        k4, c4 = rhs(t + h, mu + h * k3)
        mu = _renormalize(mu + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))
        cost = cost + h / 6 * (c1 + 2 * c2 + 2 * c3 + c4)
        traj[k + 1] = mu
    return times, traj, cost


def integrate_forward(m0, policy, t0: float, T: float, steps: int, spec: MfcpSpec | None = None):
    """RK4 trajectory of the Fokker-Planck ODE; returns ``(times, trajectory)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    m0 = np.asarray(m0, dtype=np.float64)
    spec = spec or MfcpSpec(d=m0.shape[-1], T=T)
    times, traj, _ = _rk4(spec, m0, policy, t0, T, steps, with_cost=False)
    return times, traj


def evaluate_cost(spec: MfcpSpec, m0, policy, t0: float = 0.0, steps: int = 200):
    """Deterministic cost J(t0, m0, policy); the running cost rides along the RK4 stages.

    On a pure quadrature RK4 reduces to Simpson's rule on each step.
    """
    _, traj, running = _rk4(spec, m0, policy, t0, spec.T, steps, with_cost=True)
    return running + terminal_value(spec, traj[-1])


def optimize_open_loop(
    spec: MfcpSpec,
    m0,
    t0: float = 0.0,
    intervals: int = 20,
    iterations: int = 500,
    step: float = 0.05,
    substeps: int = 5,
    fd_step: float = 1e-6,
):
    """Projected gradient descent over piecewise-constant open-loop rates.

    The gradient is taken per unit interval length (the L2 gradient of the
    control function), estimated by central differences on all coordinates at
    once. Returns ``(cost, controls)``.
    """
    d = spec.d
    m0 = check_simplex(m0)
    off = ~np.eye(d, dtype=bool)
    n_free = intervals * d * (d - 1)
    u = np.zeros(n_free)
    length = (spec.T - t0) / intervals

    def expand(batch_u):
        ctrl = np.zeros(batch_u.shape[:-1] + (intervals, d, d))
        ctrl[..., off] = batch_u.reshape(batch_u.shape[:-1] + (intervals, d * (d - 1)))
        return ctrl

    eye = np.eye(n_free) * fd_step
    steps = intervals * substeps
    m_batch = np.broadcast_to(m0, (2 * n_free + 1, d))
    for _ in range(iterations):
        cand = np.concatenate([u[None], u + eye, u - eye])
        costs = evaluate_cost(spec, m_batch, piecewise_constant_policy(spec.T, t0, expand(cand)), t0, steps)
        grad = (costs[1 : n_free + 1] - costs[n_free + 1 :]) / (2 * fd_step)
        u = np.clip(u - step * grad / length, 0.0, spec.M)
    final = evaluate_cost(spec, m0, piecewise_constant_policy(spec.T, t0, expand(u)), t0, steps)
    return float(final), expand(u)
