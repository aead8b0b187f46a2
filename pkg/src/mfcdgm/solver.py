"""Deep Galerkin training of the chart HJB equation.

Two losses are available on a collocation batch of interior points
``(t_j, eta_j)`` and terminal points ``p_j``:

* ``uniform``: max_j |residual_j| + max_j |phi(T, p_j) - G(p_j)|. The hard
  maxima are reported; training differentiates a log-sum-exp smooth maximum
  whose temperature is a fixed fraction of the current batch maximum.
* ``l2``: mean squared residual + mean squared terminal mismatch.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .model import MfcpSpec, chart_hamiltonian, terminal_value
from .network import (
    Architecture,
    DivergenceError,
    LossParts,
    PointLoss,
    evaluate_loss,
    init_params,
    retain_freed_memory,
)
from .simplex import lift, sample_uniform

log = logging.getLogger(__name__)

LOSS_KINDS = ("uniform", "l2")


@dataclass
class TrainingConfig:
    loss: str = "uniform"
    samples: int = 10_000
    epochs: int = 200
    steps: int = 10
    lr: float = 8e-4
    schedule: str = "one_cycle"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    tau: float = 0.01
    tolerance: float | None = None
    resample: str = "epoch"
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.samples < 1 or self.epochs < 0 or self.steps < 1:
            raise ValueError("samples and steps must be >= 1, epochs >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.tolerance is not None and not 0 < self.tolerance < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.schedule not in ("one_cycle", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.resample not in ("epoch", "step"):
            raise ValueError(f"unknown resample policy {self.resample!r}")


class CollocationBatch(NamedTuple):
    t: np.ndarray
    eta: np.ndarray
    eta_terminal: np.ndarray
    T: float


class LossReport(NamedTuple):
    epoch: int
    pde_loss: float
    terminal_loss: float
    combined_loss: float
    seconds: float


def sample_batch(spec: MfcpSpec, K: int, rng: np.random.Generator) -> CollocationBatch:
    """K interior points uniform on [0, T] x S_d and K independent terminal points."""
    t = rng.uniform(0.0, spec.T, size=K)
    m = sample_uniform(spec.d, rng, size=K)
    p = sample_uniform(spec.d, rng, size=K)
    return CollocationBatch(t, m[:, :-1], p[:, :-1], spec.T)


def smooth_max(values, tau: float) -> float:
    """``tau * log(sum(exp(v / tau)))``, shifted by the maximum for stability."""
    v = np.asarray(values, dtype=np.float64)
    vmax = v.max()
    return float(vmax + tau * np.log(np.sum(np.exp((v - vmax) / tau))))


def _smooth_max_grad(v, tau):
    w = np.exp((v - v.max()) / tau)
    return w / w.sum()


# ---------------------------------------------------------------- losses


def _residual_terms(spec, value, dt, deta, t, eta):
    """HJB residual ``-dt + H(t, eta, deta)`` with its local derivatives."""
    H, dH = chart_hamiltonian(spec, t, eta, deta)
    return -dt + H, (None, -np.ones_like(dt), dH)


def _terminal_terms(spec, value, eta):
    return value - terminal_value(spec, lift(eta)), np.ones_like(value)


def _uniform_reduce(tau_rel):
    def part(v):
        if v.size == 0:
            return 0.0, 0.0, v
        a = np.abs(v)
        hard = float(a.max())
        tau = max(tau_rel * hard, 1e-12)
        return hard, smooth_max(a, tau), _smooth_max_grad(a, tau) * np.sign(v)

    def reduce(r, e):
        pde, spde, dr = part(r)
        term, sterm, de = part(e)
        return LossParts(spde + sterm, pde + term, pde, term), dr, de

    return reduce


def _mean_square(v):
    return (float(np.mean(v * v)), 2.0 * v / v.size) if v.size else (0.0, v)


def _l2_reduce(r, e):
    (pde, dr), (term, de) = _mean_square(r), _mean_square(e)
    return LossParts(pde + term, pde + term, pde, term), dr, de


def hjb_loss(spec: MfcpSpec, kind: str = "uniform", tau: float = 0.01) -> PointLoss:
    """Per-point HJB residual and terminal mismatch with the chosen reduction."""
    reduce = _uniform_reduce(tau) if kind == "uniform" else _l2_reduce
    return PointLoss(
        lambda v, dt, deta, t, eta: _residual_terms(spec, v, dt, deta, t, eta),
        lambda v, eta: _terminal_terms(spec, v, eta),
        reduce,
    )


def sampled_uniform_loss(spec, arch, theta, batch, tau: float = 0.01) -> LossParts:
    """Hard-max sampled loss (``combined``, ``pde``, ``terminal``)."""
    return evaluate_loss(arch, theta, batch, hjb_loss(spec, "uniform", tau), with_grad=False).parts


def sampled_l2_loss(spec, arch, theta, batch) -> LossParts:
    return evaluate_loss(arch, theta, batch, hjb_loss(spec, "l2"), with_grad=False).parts


def function_loss(spec: MfcpSpec, dual, batch, kind: str = "uniform", tau: float = 0.01) -> LossParts:
    """Sampled loss of any approximator ``dual(t, eta) -> DualEvaluation`` (e.g. an oracle interpolant)."""
    loss = hjb_loss(spec, kind, tau)
    ev = dual(batch.t, batch.eta)
    r, _ = loss.interior(ev.value, ev.dt, ev.deta, batch.t, batch.eta)
    term = dual(np.full(len(batch.eta_terminal), batch.T), batch.eta_terminal)
    e, _ = loss.terminal(term.value, batch.eta_terminal)
    return loss.reduce(r, e)[0]


# ---------------------------------------------------------------- optimization


def lr_schedule(step: int, total: int, peak: float, div: float = 25.0, final_div: float = 1e4, pct: float = 0.3) -> float:
    """Cosine one-cycle: ``peak/div`` up to ``peak`` at ``pct`` of the run, then down to ``peak/(div*final_div)``."""
    if not 0 <= step < total:
        raise ValueError("step out of range")
    start, low = peak / div, peak / (div * final_div)
    apex = int(round(pct * total))
    if step <= apex:
        frac = step / apex if apex else 1.0
        return _cos_interp(start, peak, frac)
    span = total - 1 - apex
    return _cos_interp(peak, low, (step - apex) / span)


def _cos_interp(a, b, frac):
    return b + (a - b) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay and global gradient-norm clipping."""

    def __init__(self, n: int, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4, clip_norm=1.0):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay, self.clip_norm = weight_decay, clip_norm

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        norm = float(np.linalg.norm(grad))
        if self.clip_norm and norm > self.clip_norm:
            grad = grad * (self.clip_norm / norm)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        theta = theta * (1 - lr * self.weight_decay)
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    theta: np.ndarray
    history: list[LossReport] = field(default_factory=list)
    stopped_early: bool = False


def train(spec: MfcpSpec, arch: Architecture, cfg: TrainingConfig, theta0: np.ndarray | None = None, progress=None) -> TrainResult:
    """Run the DGM loop: ``epochs`` x ``steps`` optimizer steps on freshly sampled batches.

    The per-epoch report is the sampled loss of the parameters reached at the
    end of the epoch, evaluated on that epoch's batch. With ``tolerance`` set,
    training stops once the reported combined loss drops below it.
    """
    if arch.d != spec.d:
        raise ValueError("architecture and problem dimensions differ")
    retain_freed_memory()
    rng = np.random.default_rng(cfg.seed)
    theta = init_params(arch, cfg.seed) if theta0 is None else np.array(theta0, dtype=np.float64)
    result = TrainResult(theta)
    if cfg.epochs == 0:
        return result
    loss = hjb_loss(spec, cfg.loss, cfg.tau)
    opt = AdamW(arch.n_params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.clip_norm)
    total = cfg.epochs * cfg.steps
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        batch = sample_batch(spec, cfg.samples, rng)
        for s in range(cfg.steps):
            if s and cfg.resample == "step":
                batch = sample_batch(spec, cfg.samples, rng)
            lr = lr_schedule(step, total, cfg.lr) if cfg.schedule == "one_cycle" else cfg.lr
            try:
                ev = evaluate_loss(arch, theta, batch, loss)
            except DivergenceError as exc:
                raise DivergenceError(f"divergence at epoch {epoch}: {exc}", epoch) from exc
            theta = opt.step(theta, ev.grad, lr)
            step += 1
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"divergence at epoch {epoch}: non-finite parameters", epoch)
        try:
            parts = evaluate_loss(arch, theta, batch, loss, with_grad=False).parts
        except DivergenceError as exc:
            raise DivergenceError(f"divergence at epoch {epoch}: {exc}", epoch) from exc
        report = LossReport(epoch, parts.pde, parts.terminal, parts.combined, time.perf_counter() - start)
        result.history.append(report)
        if progress is not None:
            progress(report)
        log.debug("epoch %d combined %.5f", epoch, parts.combined)
        if cfg.tolerance is not None and parts.combined < cfg.tolerance:
            result.stopped_early = True
            break
    result.theta = theta
    return result


LOSS_CSV_HEADER = ("epoch", "pde_loss", "terminal_loss", "combined_loss", "seconds")


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_CSV_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.pde_loss), repr(r.terminal_loss), repr(r.combined_loss), f"{r.seconds:.3f}"])
