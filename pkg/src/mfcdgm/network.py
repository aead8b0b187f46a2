"""Neural approximators phi(t, eta; theta) with exact input- and parameter-gradients.

Two layer kinds share one flat parameter vector format:

``mlp``
    ``depth`` tanh layers of width ``width`` and an affine output.
``dgm``
    One dense tanh layer followed by ``depth`` gated layers of the form

        Z = tanh(x Uz + S Wz + bz)      G = tanh(x Ug + S Wg + bg)
        R = tanh(x Ur + S Wr + br)      H = tanh(x Uh + (S*R) Wh + bh)
        S <- (1 - G) * H + Z * S

    and an affine output. ``x = (eta, t)`` is fed to every gate.

The network input is ``x = (eta_1, ..., eta_{d-1}, t)``; the last row of every
input weight matrix is therefore the time weight. Input-gradients are obtained
by a recorded adjoint sweep through the layers, so a loss built from them is
differentiated in theta by a single reverse pass over the combined graph.
"""
from __future__ import annotations

import ctypes
import ctypes.util
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad

LAYER_KINDS = ("mlp", "dgm")
# "identity" is a test mode (linear networks); training uses tanh.
ACTIVATIONS = ("tanh", "identity")

# Activation arrays are kept below this many entries per recorded node.
CHUNK_ELEMENTS = 2_000_000
# Points per chunk on the hand-fused MLP route; small enough to stay cache-resident.
FUSED_CHUNK = 1024
# Forward states are kept between the two loss passes up to this many floats.
CACHE_ELEMENTS = 40_000_000


_ALLOCATOR_TUNED = False


def retain_freed_memory() -> None:
    """Ask glibc to keep freed heap memory instead of returning it to the OS.

    Training allocates and frees the same few-hundred-kB temporaries thousands of
    times; by default every one of them is a fresh mmap with page faults, which
    costs about a quarter of a training step. No-op on other C libraries.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return
    M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD = -1, -2, -3
    mallopt(M_MMAP_THRESHOLD, 1 << 30)
    mallopt(M_TRIM_THRESHOLD, 1 << 30)
    mallopt(M_TOP_PAD, 1 << 26)


class DivergenceError(FloatingPointError):
    """Non-finite values in a forward pass, loss or gradient."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class Architecture:
    d: int
    kind: str = "mlp"
    depth: int = 4
    width: int = 32
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation != "tanh" and self.kind != "mlp":
            raise ValueError("gated layers are tanh-only")
        if self.d < 2 or self.depth < 1 or self.width < 1:
            raise ValueError("need d >= 2, depth >= 1, width >= 1")

    @property
    def input_dim(self) -> int:
        return self.d

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        D, n = self.input_dim, self.width
        out = [("W0", (D, n)), ("b0", (n,))]
        for l in range(1, self.depth + (self.kind == "dgm")):
            if self.kind == "mlp":
                out += [(f"W{l}", (n, n)), (f"b{l}", (n,))]
            else:
                for gate in "zgrh":
                    out += [(f"U{gate}{l}", (D, n)), (f"W{gate}{l}", (n, n)), (f"b{gate}{l}", (n,))]
        out += [("w_out", (n, 1)), ("b_out", (1,))]
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())


class DualEvaluation(NamedTuple):
    """Network value with its time derivative and chart gradient."""

    value: np.ndarray
    dt: np.ndarray
    deta: np.ndarray


def init_params(arch: Architecture, seed: int) -> np.ndarray:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in arch.layout():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            parts.append(rng.uniform(-bound, bound, size=shape).ravel())
        else:
            parts.append(np.zeros(shape).ravel())
    return np.concatenate(parts)


def unpack(arch: Architecture, theta: np.ndarray) -> dict[str, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (arch.n_params,):
        raise ValueError(f"expected {arch.n_params} parameters, got {theta.shape}")
    out, k = {}, 0
    for name, shape in arch.layout():
        size = int(np.prod(shape))
        out[name] = theta[k : k + size].reshape(shape)
        k += size
    return out


def _inputs(t, eta, d: int) -> tuple[np.ndarray, bool]:
    eta = np.asarray(eta, dtype=np.float64)
    single = eta.ndim == 1
    eta = np.atleast_2d(eta)
    if eta.shape[-1] != d - 1:
        raise ValueError(f"chart points must have {d - 1} coordinates")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (eta.shape[0],))
    return np.concatenate([eta, t[:, None]], axis=1), single


def forward(arch: Architecture, P: dict, x: np.ndarray, need_grad: bool):
    """Recorded forward pass. Returns ``(value, grad_x)`` as Vars; ``grad_x`` is None if not needed."""
    if arch.kind == "mlp":
        return _mlp(arch, P, x, need_grad)
    return _gated(arch, P, x, need_grad)


def _mlp(arch, P, x, need_grad):
    linear = arch.activation == "identity"
    h = x
    hs = []
    for l in range(arch.depth):
        z = ad.matmul(h, P[f"W{l}"]) + P[f"b{l}"]
        h = z if linear else ad.tanh(z)
        hs.append(h)
    value = (ad.matmul(h, P["w_out"]) + P["b_out"])[:, 0]
    if not need_grad:
        return value, None
    a = ad.matmul_t(np.ones((x.shape[0], 1)), P["w_out"])
    for l in reversed(range(arch.depth)):
        a = ad.matmul_t(a if linear else a * ad.tanh_slope(hs[l]), P[f"W{l}"])
    return value, a


def _gated(arch, P, x, need_grad):
    S = ad.tanh(ad.matmul(x, P["W0"]) + P["b0"])
    S0 = S
    cache = []
    for l in range(1, arch.depth + 1):

        def gate(g, state):
            return ad.tanh(ad.matmul(x, P[f"U{g}{l}"]) + ad.matmul(state, P[f"W{g}{l}"]) + P[f"b{g}{l}"])

        Z, G, R = gate("z", S), gate("g", S), gate("r", S)
        SR = S * R
        H = gate("h", SR)
        cache.append((S, Z, G, R, H))
        S = (1.0 - G) * H + Z * S
    value = (ad.matmul(S, P["w_out"]) + P["b_out"])[:, 0]
    if not need_grad:
        return value, None

    aS = ad.matmul_t(np.ones((x.shape[0], 1)), P["w_out"])
    ax = None
    for l in reversed(range(1, arch.depth + 1)):
        S, Z, G, R, H = cache[l - 1]
        pH = aS * (1.0 - G) * ad.tanh_slope(H)
        pG = -(aS * H) * ad.tanh_slope(G)
        pZ = aS * S * ad.tanh_slope(Z)
        aSR = ad.matmul_t(pH, P[f"Wh{l}"])
        pR = aSR * S * ad.tanh_slope(R)
        new_aS = (
            aS * Z
            + aSR * R
            + ad.matmul_t(pZ, P[f"Wz{l}"])
            + ad.matmul_t(pG, P[f"Wg{l}"])
            + ad.matmul_t(pR, P[f"Wr{l}"])
        )
        gx = (
            ad.matmul_t(pZ, P[f"Uz{l}"])
            + ad.matmul_t(pG, P[f"Ug{l}"])
            + ad.matmul_t(pR, P[f"Ur{l}"])
            + ad.matmul_t(pH, P[f"Uh{l}"])
        )
        ax = gx if ax is None else ax + gx
        aS = new_aS
    gx = ad.matmul_t(aS * ad.tanh_slope(S0), P["W0"])
    return value, gx + ax


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError("non-finite value in network evaluation")


def evaluate(arch: Architecture, theta: np.ndarray, t, eta, need_grad: bool = True) -> DualEvaluation:
    """Value, ``d/dt`` and chart gradient at ``(t, eta)``; accepts a single point or a batch."""
    with np.errstate(all="ignore"):  # non-finite output is detected and raised below
        return _evaluate(arch, theta, t, eta, need_grad)


def _evaluate(arch, theta, t, eta, need_grad):
    x, single = _inputs(t, eta, arch.d)
    P = unpack(arch, theta)
    n = x.shape[0]
    step = FUSED_CHUNK if arch.kind == "mlp" else max(1, CHUNK_ELEMENTS // max(arch.width, 1))
    vals, grads = [], []
    for s in range(0, n, step):
        v, g, _ = _values(arch, P, x[s : s + step], need_grad)
        vals.append(v)
        if need_grad:
            grads.append(g)
    value = np.concatenate(vals)
    if need_grad:
        gx = np.concatenate(grads)
        dt, deta = gx[:, -1], gx[:, :-1]
    else:
        dt, deta = np.full(n, np.nan), np.full((n, arch.d - 1), np.nan)
    _check_finite(value, *((dt, deta) if need_grad else ()))
    if single:
        return DualEvaluation(value[0], dt[0], deta[0])
    return DualEvaluation(value, dt, deta)


# ---------------------------------------------------------------- losses


class LossParts(NamedTuple):
    """``objective`` is what gets differentiated; the rest are for reporting."""

    objective: float
    combined: float
    pde: float
    terminal: float


class PointLoss(NamedTuple):
    """Loss built from per-point quantities.

    ``interior(value, dt, deta, t, eta)`` returns the per-point terms ``r``
    and their local derivatives ``(dr/dvalue, dr/ddt, dr/ddeta)``; any of
    these may be None when the term does not depend on that input.
    ``terminal(value, eta)`` returns ``(e, de/dvalue)``. Either callable may
    be None. ``reduce(r, e)`` maps the per-point arrays to
    ``(LossParts, dL/dr, dL/de)``.
    """

    interior: Callable | None
    terminal: Callable | None
    reduce: Callable


class LossEvaluation(NamedTuple):
    parts: LossParts
    grad: np.ndarray | None
    interior: np.ndarray
    terminal: np.ndarray


def _chunks(n, step):
    return [(s, min(n, s + step)) for s in range(0, n, step)]


def _interior_x(arch, batch, lo, hi):
    return _inputs(batch.t[lo:hi], batch.eta[lo:hi], arch.d)[0]


def _terminal_x(arch, batch, lo, hi):
    return _inputs(batch.T, batch.eta_terminal[lo:hi], arch.d)[0]


def _input_seed(jac, g, n_in):
    """Sensitivity of the loss to ``(value, grad_x)`` from local derivatives and seeds ``g``."""
    jv, jt, jeta = jac
    gv = None if jv is None else g * jv
    gx = np.zeros((len(g), n_in))
    if jt is not None:
        gx[:, -1] = g * jt
    if jeta is not None:
        gx[:, :-1] = g[:, None] * jeta
    return gv, gx


# -- recorded (tape) route: any layer kind


def _tape_chunk_grad(arch, theta, x, seed_v, seed_x):
    """Parameter gradient of ``sum(seed_v * value) + sum(seed_x * grad_x)`` on one chunk."""
    P = {k: ad.Var(v) for k, v in unpack(arch, theta).items()}
    value, gx = forward(arch, P, x, need_grad=seed_x is not None)
    pairs = []
    if seed_v is not None:
        pairs.append((value, lambda g: g * seed_v))
    if seed_x is not None:
        pairs.append((gx, lambda g: g * seed_x))
    ad.backward(ad.custom(0.0, *pairs), seed=1.0)
    return {k: (np.zeros_like(v.value) if v.grad is None else v.grad) for k, v in P.items()}


# -- fused route: plain numpy double backprop for the tanh MLP


def _mlp_forward(P, x, depth, need_grad=True, linear=False):
    """Activations ``h_l``, slopes ``s_l = 1 - h_l**2``, adjoints ``a_l`` of the
    input-gradient chain (``a_0`` = grad_x, ``a_depth`` = w_out) and the products
    ``q_l = a_{l+1} * s_l``."""
    hs = []
    h = x
    for l in range(depth):
        z = h @ P[f"W{l}"]
        z += P[f"b{l}"]
        h = z if linear else np.tanh(z, out=z)
        hs.append(h)
    value = hs[-1] @ P["w_out"][:, 0] + P["b_out"][0]
    if not need_grad:
        return value, (hs, None, None, None)
    ss = _slopes(hs, linear)
    adj = [None] * (depth + 1)
    qs = [None] * depth
    adj[depth] = P["w_out"][:, 0]
    for l in reversed(range(depth)):
        qs[l] = adj[l + 1] * ss[l]
        adj[l] = qs[l] @ P[f"W{l}"].T
    return value, (hs, ss, adj, qs)


def _slopes(hs, linear):
    if linear:
        return [np.ones_like(h) for h in hs]
    ss = []
    for h in hs:
        sl = np.multiply(h, h)
        np.subtract(1.0, sl, out=sl)
        ss.append(sl)
    return ss


def _mlp_chunk_grad(arch, theta, x, seed_v, seed_x, state=None, P=None):
    """Same contract as :func:`_tape_chunk_grad`, written out by hand for ``kind="mlp"``."""
    P = unpack(arch, theta) if P is None else P
    L = arch.depth
    linear = arch.activation == "identity"
    if state is None or (seed_x is not None and state[1] is None):
        _, state = _mlp_forward(P, x, L, seed_x is not None, linear)
    hs, ss, adj, qs = state
    if ss is None:
        ss = _slopes(hs, linear)
    G = {}
    hbar = [None] * L
    if seed_x is not None:
        # reverse through a_l = q_l W_l^T with q_l = a_{l+1} * s_l, l = 0 .. L-1
        gbar = seed_x
        for l in range(L):
            G[f"W{l}"] = gbar.T @ qs[l]
            qbar = gbar @ P[f"W{l}"]
            if not linear:
                hb = qbar * adj[l + 1]
                hb *= hs[l]
                hb *= -2.0
                hbar[l] = hb
            qbar *= ss[l]
            gbar = qbar
        G["w_out"] = gbar.sum(axis=0)[:, None]
    else:
        G["w_out"] = np.zeros_like(P["w_out"])
    G["b_out"] = np.zeros(1)
    if seed_v is not None:
        G["w_out"][:, 0] += seed_v @ hs[-1]
        G["b_out"][0] += seed_v.sum()
        top = np.outer(seed_v, P["w_out"][:, 0])
        if hbar[L - 1] is None:
            hbar[L - 1] = top
        else:
            hbar[L - 1] += top
    # ordinary backprop through the forward layers; all buffers here are temporaries
    carry = None
    for l in reversed(range(L)):
        zbar = hbar[l]
        if carry is not None:
            if zbar is None:
                zbar = carry
            else:
                zbar += carry
        if zbar is None:
            G[f"b{l}"] = np.zeros_like(P[f"b{l}"])
            G.setdefault(f"W{l}", np.zeros_like(P[f"W{l}"]))
            continue
        zbar *= ss[l]
        below = hs[l - 1] if l else x
        dW = below.T @ zbar
        if f"W{l}" in G:
            G[f"W{l}"] += dW
        else:
            G[f"W{l}"] = dW
        G[f"b{l}"] = zbar.sum(axis=0)
        carry = zbar @ P[f"W{l}"].T if l else None
    return G


def _values(arch, P, x, need_grad):
    """``(value, grad_x, state)``; ``state`` is the reusable fused forward state or None."""
    if arch.kind == "mlp":
        value, state = _mlp_forward(P, x, arch.depth, need_grad, arch.activation == "identity")
        return value, (state[2][0] if need_grad else None), state
    v, g = forward(arch, P, x, need_grad)
    return v.value, (None if g is None else g.value), None


def evaluate_loss(
    arch: Architecture,
    theta: np.ndarray,
    batch,
    loss: PointLoss,
    with_grad: bool = True,
    chunk_points: int | None = None,
    engine: str = "auto",
) -> LossEvaluation:
    """Loss value and exact parameter gradient on a collocation batch.

    A first pass evaluates per-point terms and their local derivatives, the
    reduction turns these into per-point sensitivities, and a second pass
    per chunk pushes them back to theta. ``engine`` picks the hand-fused
    MLP route (``"fused"``), the recorded route (``"tape"``) or the fused
    one when available (``"auto"``).
    """
    if engine not in ("auto", "fused", "tape"):
        raise ValueError(f"unknown engine {engine!r}")
    if engine == "fused" and arch.kind != "mlp":
        raise ValueError("the fused route exists for kind='mlp' only")
    with np.errstate(all="ignore"):  # non-finite values are detected and raised explicitly
        return _evaluate_loss(arch, theta, batch, loss, with_grad, chunk_points, engine)


def _evaluate_loss(arch, theta, batch, loss, with_grad, chunk_points, engine):
    fused = arch.kind == "mlp" and engine != "tape"
    if chunk_points:
        step = chunk_points
    elif fused:
        step = FUSED_CHUNK
    else:
        step = max(256, CHUNK_ELEMENTS // (4 * max(arch.width, 1)))
    n_in = arch.input_dim
    theta = np.asarray(theta, dtype=np.float64)
    P = unpack(arch, theta)
    n_total = len(batch.t) + len(batch.eta_terminal)
    keep = fused and with_grad and n_total * arch.width * (4 * arch.depth + 1) <= CACHE_ELEMENTS

    def first_pass(kind):
        f = loss.interior if kind == "interior" else loss.terminal
        n = len(batch.t) if kind == "interior" else len(batch.eta_terminal)
        vals, jacs, states = [], [], []
        if f is None:
            return np.zeros(0), jacs, states, n
        for lo, hi in _chunks(n, step):
            if kind == "interior":
                x = _interior_x(arch, batch, lo, hi)
                v, gx, st = _values(arch, P, x, True)
                _check_finite(v, gx)
                r, jac = f(v, gx[:, -1], gx[:, :-1], batch.t[lo:hi], batch.eta[lo:hi])
            else:
                x = _terminal_x(arch, batch, lo, hi)
                v, _, st = _values(arch, P, x, False)
                _check_finite(v)
                r, jv = f(v, batch.eta_terminal[lo:hi])
                jac = (jv, None, None)
            vals.append(np.asarray(r, dtype=np.float64))
            jacs.append(jac)
            states.append(st if keep else None)
        return np.concatenate(vals) if vals else np.zeros(0), jacs, states, n

    r, jac_r, st_r, n_r = first_pass("interior")
    e, jac_e, st_e, n_e = first_pass("terminal")
    _check_finite(r, e)
    lp, dr, de = loss.reduce(r, e)
    if not with_grad:
        return LossEvaluation(lp, None, r, e)

    total = {name: np.zeros(shape) for name, shape in arch.layout()}
    for kind, n, jacs, states, seeds in (("interior", n_r, jac_r, st_r, dr), ("terminal", n_e, jac_e, st_e, de)):
        for (lo, hi), jac, st in zip(_chunks(n, step), jacs, states):
            gv, gx = _input_seed(jac, seeds[lo:hi], n_in)
            if kind == "interior":
                x = _interior_x(arch, batch, lo, hi)
            else:
                x, gx = _terminal_x(arch, batch, lo, hi), None
            if gv is None and gx is None:
                continue
            if fused:
                grads = _mlp_chunk_grad(arch, theta, x, gv, gx, st, P)
            else:
                grads = _tape_chunk_grad(arch, theta, x, gv, gx)
            for name, g in grads.items():
                total[name] += g
    grad = np.concatenate([total[name].ravel() for name, _ in arch.layout()])
    _check_finite(grad)
    return LossEvaluation(lp, grad, r, e)


def loss_gradient(arch: Architecture, theta: np.ndarray, batch, loss: PointLoss) -> tuple[float, np.ndarray]:
    """``(objective, d objective / d theta)``."""
    ev = evaluate_loss(arch, theta, batch, loss)
    return ev.parts.objective, ev.grad


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "mfcdgm-checkpoint v1"


def save_checkpoint(path, arch: Architecture, theta: np.ndarray, T: float) -> None:
    """Text checkpoint: ``#``-prefixed ``key=value`` header, then one parameter per line."""
    header = [CHECKPOINT_MAGIC, f"kind={arch.kind}", f"depth={arch.depth}", f"width={arch.width}", f"activation={arch.activation}", f"d={arch.d}", f"T={T!r}", f"n_params={arch.n_params}"]
    with open(path, "w") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        np.savetxt(fh, np.asarray(theta, dtype=np.float64), fmt="%.17g")


def load_checkpoint(path) -> tuple[Architecture, np.ndarray, float]:
    meta = {}
    with open(path) as fh:
        first = fh.readline().lstrip("# ").strip()
        if first != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, val = line[1:].strip().partition("=")
            meta[key] = val
    arch = Architecture(d=int(meta["d"]), kind=meta["kind"], depth=int(meta["depth"]), width=int(meta["width"]), activation=meta.get("activation", "tanh"))
    theta = np.atleast_1d(np.loadtxt(path, comments="#", dtype=np.float64))
    if theta.shape != (arch.n_params,) or int(meta.get("n_params", arch.n_params)) != arch.n_params:
        raise ValueError(f"{path}: parameter count does not match header")
    return arch, theta, float(meta["T"])
