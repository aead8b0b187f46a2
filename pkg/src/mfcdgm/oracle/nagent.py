"""Monte Carlo for the N-agent continuous-time chain under a feedback policy.

Each agent in state ``i`` jumps to ``j`` at rate ``policy(t, mu)[i, j]``
where ``mu`` is the empirical measure. Rates depend on time between jumps,
so jump times are drawn exactly by thinning a Poisson clock of intensity
``Lam >= N (d - 1) M``. The clock never exceeds the true total rate bound,
hence accepted candidates are exact jump times. The running cost is
integrated with the trapezoid rule over the candidate times (the empirical
measure is constant between them), so the clock rate also sets the
quadrature resolution; it is floored at ``MIN_CANDIDATES / T``.

All repetitions advance together, one candidate per repetition per sweep,
so the policy is evaluated on a batch of ``(t_r, mu_r)`` pairs.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..model import MfcpSpec, terminal_value, total_running_cost
from ..simplex import check_simplex

MIN_CANDIDATES = 200


class NAgentResult(NamedTuple):
    mean: float
    stderr: float
    costs: np.ndarray
    times: np.ndarray | None = None
    paths: np.ndarray | None = None  # empirical measure at ``times``, (reps, len(times), d)


def quantize(m0, N: int) -> np.ndarray:
    """Largest-remainder rounding of ``N * m0`` to integer counts summing to N."""
    m0 = check_simplex(m0)
    raw = N * np.asarray(m0, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    short = N - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _initial_counts(m0, N, reps, rng, initial):
    if initial == "iid":
        return rng.multinomial(N, m0, size=reps).astype(np.int64)
    if initial == "quantized":
        return np.tile(quantize(m0, N), (reps, 1))
    raise ValueError(f"unknown initial law {initial!r}")


def _rates(spec, policy, t, mu):
    a = np.asarray(policy(t, mu), dtype=np.float64)
    a = np.broadcast_to(a, mu.shape + (spec.d,)) * (1.0 - np.eye(spec.d))
    if a.min() < -1e-12 or a.max() > spec.M * (1 + 1e-9):
        raise ValueError("policy returned rates outside [0, M]")
    return np.clip(a, 0.0, spec.M)


def simulate_n_agents(
    spec: MfcpSpec,
    policy,
    N: int,
    m0,
    reps: int,
    seed: int,
    initial: str = "iid",
    record_times=None,
) -> NAgentResult:
    """Mean and standard error of the N-agent cost over ``reps`` independent runs.

    ``policy`` must accept a vector of times and a batch of measures. With
    ``record_times`` the empirical measure is also returned at those times.
    The standard error is reported as 0 when ``reps == 1``.
    """
    if N < 1 or reps < 1:
        raise ValueError("N and reps must be >= 1")
    d, T = spec.d, spec.T
    m0 = check_simplex(m0)
    rng = np.random.default_rng(seed)
    counts = _initial_counts(m0, N, reps, rng, initial)
    lam = max(N * (d - 1) * spec.M, MIN_CANDIDATES / T)

    rec = None if record_times is None else np.sort(np.asarray(record_times, dtype=np.float64))
    paths = None if rec is None else np.empty((reps, len(rec), d))
    rec_next = np.zeros(reps, dtype=np.int64)

    t = np.zeros(reps)
    cost = np.zeros(reps)
    mu = counts / N
    prev_f = total_running_cost(spec, t, _rates(spec, policy, t, mu), mu)
    alive = np.ones(reps, dtype=bool)
    rows = np.arange(reps)
    while alive.any():
        idx = rows[alive]
        t_new = t[idx] + rng.exponential(1.0 / lam, size=idx.size)
        done = t_new >= T
        t_eval = np.minimum(t_new, T)

        if rec is not None:
            _record(paths, rec, rec_next, idx, t_eval, counts[idx] / N)

        mu_i = counts[idx] / N
        a = _rates(spec, policy, t_eval, mu_i)
        f = total_running_cost(spec, t_eval, a, mu_i)
        cost[idx] += 0.5 * (prev_f[idx] + f) * (t_eval - t[idx])
        prev_f[idx] = f
        t[idx] = t_eval

        # thinning: accept a jump with probability total_rate / lam
        flux = counts[idx][:, :, None] * a  # (n, d, d): agents in i times rate i -> j
        total = flux.reshape(idx.size, -1).sum(axis=1)
        u = rng.uniform(size=idx.size) * lam
        jump = (~done) & (u < total)
        if jump.any():
            cdf = np.cumsum(flux[jump].reshape(int(jump.sum()), -1), axis=1)
            k = (cdf < u[jump][:, None]).sum(axis=1)
            k = np.minimum(k, d * d - 1)
            src, dst = np.divmod(k, d)
            r = idx[jump]
            np.subtract.at(counts, (r, src), 1)
            np.add.at(counts, (r, dst), 1)
            # the rate after a jump changes, restart the trapezoid at the new measure
            mu_j = counts[r] / N
            prev_f[r] = total_running_cost(spec, t[r], _rates(spec, policy, t[r], mu_j), mu_j)
        alive[idx[done]] = False

    if rec is not None:
        _record(paths, rec, rec_next, rows, np.full(reps, np.inf), counts / N)
    costs = cost + terminal_value(spec, counts / N)
    stderr = float(costs.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    return NAgentResult(float(costs.mean()), stderr, costs, rec, paths)


def _record(paths, rec, rec_next, idx, t_until, mu):
    """Fill recorded slots whose time precedes ``t_until`` with the current measure."""
    for n, r in enumerate(idx):
        while rec_next[r] < len(rec) and rec[rec_next[r]] < t_until[n]:
            paths[r, rec_next[r]] = mu[n]
            rec_next[r] += 1
