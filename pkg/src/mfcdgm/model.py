"""Finite-state mean field control problem: costs, Hamiltonians, HJB residual.

The running cost is separable in the rates,

    f(t, i, a, m) = 1/2 * sum_{j != i} c[i, j] * a_j**2 + f0_i(m),

with ``f0_i(m) = m_i`` ("quadratic") or ``f == 0`` ("zero"). The terminal
cost is ``g^i(m) = m_i`` ("quadratic", so ``G(m) = sum m_i**2``) or a fixed
vector ``g^i = w_i`` ("linear", ``G(m) = <w, m>``).

Because f is separable, ``H^i(t, m, z) = sum_{j != i} h_ij(z_j) - f0_i(m)``
with ``h_ij(z) = sup_{0 <= a <= M} (-a z - c_ij a^2 / 2)``; the maximizer is
``clip(-z / c_ij, 0, M)`` and ``h_ij'(z) = -a*``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simplex import check_simplex, directional_matrix, lift

RUNNING_KINDS = ("quadratic", "zero")
TERMINAL_KINDS = ("quadratic", "linear")


@dataclass(frozen=True, eq=False)
class MfcpSpec:
    """Problem data. ``c`` defaults to the all-ones cost matrix."""

    d: int
    T: float = 1.0
    M: float = 1.0
    c: np.ndarray | None = None
    running: str = "quadratic"
    terminal: str = "quadratic"
    terminal_weights: np.ndarray | None = None
    _c: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if not self.T > 0 or not self.M > 0:
            raise ValueError("T and M must be positive")
        if self.running not in RUNNING_KINDS:
            raise ValueError(f"unknown running cost {self.running!r}")
        if self.terminal not in TERMINAL_KINDS:
            raise ValueError(f"unknown terminal cost {self.terminal!r}")
        c = np.ones((self.d, self.d)) if self.c is None else np.array(self.c, dtype=np.float64)
        if c.shape != (self.d, self.d):
            raise ValueError(f"cost matrix must be {self.d}x{self.d}")
        off = ~np.eye(self.d, dtype=bool)
        if np.any(c[off] <= 0):
            raise ValueError("off-diagonal transition costs must be positive")
        c = c.copy()
        np.fill_diagonal(c, 1.0)  # unused; keeps divisions finite
        object.__setattr__(self, "_c", c)
        if self.terminal == "linear":
            w = np.asarray(self.terminal_weights, dtype=np.float64)
            if w.shape != (self.d,):
                raise ValueError("linear terminal cost needs d weights")
            object.__setattr__(self, "terminal_weights", w)

    @property
    def cost_matrix(self) -> np.ndarray:
        return self._c


def a_star_scalar(s, M: float = 1.0):
    """Clip to the admissible rate interval [0, M]."""
    return np.clip(s, 0.0, M)


def congestion_cost(spec: MfcpSpec, m) -> np.ndarray:
    """``f0_i(m)`` for every state, shape ``(..., d)``."""
    m = np.asarray(m, dtype=np.float64)
    if spec.running == "zero":
        return np.zeros_like(m)
    return m


def running_cost(spec: MfcpSpec, t, i: int, a, m) -> np.ndarray:
    """f(t, i, a, m). ``a`` is the rate row out of state ``i``; ``a[i]`` is ignored."""
    a = np.asarray(a, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if spec.running == "zero":
        return np.zeros(np.broadcast_shapes(a.shape[:-1], m.shape[:-1]))
    mask = np.ones(spec.d)
    mask[i] = 0.0
    quad = 0.5 * np.sum(spec.cost_matrix[i] * mask * a**2, axis=-1)
    return quad + m[..., i]


def total_running_cost(spec: MfcpSpec, t, rates, m) -> np.ndarray:
    """``sum_i m_i f(t, i, rates_i, m)`` for a full rate matrix (batched)."""
    rates = _offdiag(np.asarray(rates, dtype=np.float64))
    m = np.asarray(m, dtype=np.float64)
    f0 = congestion_cost(spec, m)
    if spec.running == "zero":
        per_state = f0
    else:
        per_state = 0.5 * np.sum(spec.cost_matrix * rates**2, axis=-1) + f0
    return np.sum(m * per_state, axis=-1)


def terminal_value(spec: MfcpSpec, m) -> np.ndarray:
    """G(m) = sum_i m_i g^i(m)."""
    m = np.asarray(m, dtype=np.float64)
    if spec.terminal == "linear":
        return m @ spec.terminal_weights
    return np.sum(m * m, axis=-1)


def _term(spec: MfcpSpec, z, c):
    """Per-target contribution ``h(z)`` and its maximizer for transition costs ``c``."""
    if spec.running == "zero":
        a = np.where(z < 0.0, spec.M, 0.0)
        return -a * z, a
    a = a_star_scalar(-z / c, spec.M)
    return -a * z - 0.5 * c * a * a, a


def hamiltonians(spec: MfcpSpec, t, m, Z):
    """All ``H^i`` for directional arguments ``Z[..., i, :]``.

    Returns ``(H, A)`` where ``H`` has shape ``(..., d)`` and ``A[..., i, j]``
    is the maximizing rate from ``i`` to ``j`` (zero diagonal).
    """
    Z = np.asarray(Z, dtype=np.float64)
    vals, A = _term(spec, Z, spec.cost_matrix)
    vals = _offdiag(vals)
    A = _offdiag(A)
    H = vals.sum(axis=-1) - congestion_cost(spec, m)
    return H, A


def hamiltonian(spec: MfcpSpec, i: int, t, m, z) -> np.ndarray:
    """H^i(t, m, z) for a single state ``i`` (0-based); ``z[i]`` has no effect."""
    z = np.asarray(z, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    mask = np.ones(spec.d)
    mask[i] = 0.0
    vals, _ = _term(spec, z, spec.cost_matrix[i])
    return np.sum(vals * mask, axis=-1) - congestion_cost(spec, m)[..., i]


def pde_hamiltonian(spec: MfcpSpec, t, m, Z) -> np.ndarray:
    """H(t, m, .) = sum_i m_i H^i(t, m, Z_i), one directional argument per state."""
    H, _ = hamiltonians(spec, t, m, Z)
    return np.sum(np.asarray(m) * H, axis=-1)


def chart_hamiltonian(spec: MfcpSpec, t, eta, p):
    """PDE-Hamiltonian on the chart and its gradient in the chart gradient ``p``.

    Returns ``(H, dH_dp)``. The gradient is ``-(inflow - outflow)`` under the
    maximizing rates, restricted to the first ``d-1`` states.
    """
    eta = np.asarray(eta, dtype=np.float64)
    m = lift(eta)
    Z = directional_matrix(p)
    # Z has a zero diagonal, so the diagonal terms below vanish without masking
    # (unit diagonal costs avoid 0/0)
    c = np.where(np.eye(spec.d, dtype=bool), 1.0, spec.cost_matrix)
    if spec.running == "zero":
        A = np.where(Z < 0.0, spec.M, 0.0)
        vals = A * Z
    else:
        A = np.divide(Z, -c)
        np.clip(A, 0.0, spec.M, out=A)
        vals = c * A
        vals *= 0.5
        vals += Z
        vals *= A  # a z + c a^2 / 2 = -h(z)
    mi = m[..., :, None]
    vals *= mi
    n = vals.shape[-1] ** 2
    H = -(vals.reshape(vals.shape[:-2] + (n,)) @ np.ones(n)) - np.sum(m * congestion_cost(spec, m), axis=-1)
    A *= mi  # mass rate from i to j
    ones = np.ones(spec.d)
    dH = A @ ones - np.einsum("...ij->...j", A)
    return H, dH[..., :-1]


def hjb_residual(spec: MfcpSpec, dual, t, eta) -> np.ndarray:
    """Chart HJB operator ``-dt phi + sum_i m_i H^i(t, m, D^i phi)``."""
    H, _ = chart_hamiltonian(spec, t, eta, dual.deta)
    return -np.asarray(dual.dt) + H


def recover_control(spec: MfcpSpec, dual, t, m) -> np.ndarray:
    """Feedback rates ``alpha*_{ij} = a*_j(t, i, m, D^i V)`` from chart gradients."""
    check_simplex(m)
    Z = directional_matrix(dual.deta)
    _, A = hamiltonians(spec, t, m, Z)
    return A


def _offdiag(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    return x * (1.0 - np.eye(d))
