"""Command-line entry point: ``python -m mfcdgm <command> ...``.

Commands write CSV artifacts plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 configuration or argument error, 3 divergence.
Set ``DGM_THREADS`` to cap the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .model import MfcpSpec
from .network import Architecture, DivergenceError, evaluate, load_checkpoint, save_checkpoint
from .oracle.forward import evaluate_cost, network_policy, zero_policy
from .oracle.grid import ConfigurationError, solve_grid_hjb
from .oracle.nagent import simulate_n_agents
from .simplex import SimplexError, check_simplex, distance_to_boundary
from .solver import train, write_loss_csv

log = logging.getLogger("mfcdgm")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


class ComparisonReport(NamedTuple):
    sup_gap: float
    mean_gap: float
    nodes: int
    band: float


# ---------------------------------------------------------------- helpers


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out: Path, command: str, config: dict, seed, started: float, files) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": version_string(),
        "wall_seconds": round(time.time() - started, 3),
        "files": sorted(str(f) for f in files),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _thread_limit():
    n = os.environ.get("DGM_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(x) -> str:
    return repr(float(x))


def _problem(args, arch: Architecture | None = None, T=None) -> MfcpSpec:
    """Problem from ``--config`` if given, else the default example with the checkpoint's d and T."""
    if args.config:
        spec = load_config(args.config).spec()
    else:
        d = args.d or (arch.d if arch else 2)
        spec = MfcpSpec(d=d, T=T if T is not None else 1.0)
    if args.d and args.d != spec.d:
        raise UsageError(f"--d {args.d} disagrees with the problem dimension {spec.d}")
    if arch is not None and arch.d != spec.d:
        raise UsageError(f"checkpoint is for d={arch.d}, problem has d={spec.d}")
    if T is not None and abs(T - spec.T) > 1e-12:
        raise UsageError(f"checkpoint horizon T={T} differs from problem T={spec.T}")
    return spec


def _load(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None


def _ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError("N values must be positive")
    return vals


def _point(text: str, d: int) -> np.ndarray:
    try:
        m = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse point {text!r}") from None
    if m.shape != (d,):
        raise UsageError(f"--m0 needs {d} entries")
    return m


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    started = time.time()
    cfg: RunConfig = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    spec, arch, tcfg = cfg.spec(), cfg.architecture(), cfg.training()
    out = _out_dir(cfg.out)

    def progress(r):
        log.info("epoch %4d  pde %.5f  terminal %.5f  combined %.5f  (%.1fs)", r.epoch, r.pde_loss, r.terminal_loss, r.combined_loss, r.seconds)

    try:
        result = train(spec, arch, tcfg, progress=progress)
    except DivergenceError as exc:
        log.error("%s", exc)
        write_manifest(out, "train", cfg.echo(), cfg.seed, started, [])
        return EXIT_DIVERGED
    write_loss_csv(out / "loss.csv", result.history)
    save_checkpoint(out / "checkpoint.txt", arch, result.theta, spec.T)
    with open(out / "config.txt", "w") as fh:
        for k, v in cfg.echo().items():
            fh.write(f"{k} = {v}\n")
    write_manifest(out, "train", cfg.echo(), cfg.seed, started, ["loss.csv", "checkpoint.txt", "config.txt"])
    if result.history:
        last = result.history[-1]
        print(f"final combined loss {last.combined_loss:.6f} after {last.epoch} epochs ({last.seconds:.1f}s)")
    return EXIT_OK


def surface_rows(arch: Architecture, theta, T: float, resolution: int):
    """Regular (t, m_1) lattice. The remaining mass ``1 - m_1`` is spread evenly over the other states."""
    ts = np.linspace(0.0, T, resolution)
    m1 = np.linspace(0.0, 1.0, resolution)
    d = arch.d
    eta = np.empty((resolution, d - 1))
    eta[:, 0] = m1
    if d > 2:
        eta[:, 1:] = ((1.0 - m1) / (d - 1))[:, None]
    rows = []
    for t in ts:
        v = evaluate(arch, theta, t, eta, need_grad=False).value
        rows.extend((t, e, val) for e, val in zip(eta, v))
    return rows


def cmd_surface(args) -> int:
    started = time.time()
    arch, theta, T = _load(args.checkpoint)
    if args.d and args.d != arch.d:
        raise UsageError(f"checkpoint is for d={arch.d}, requested d={args.d}")
    if args.resolution < 2:
        raise UsageError("--resolution must be >= 2")
    out = _out_dir(args.out)
    rows = surface_rows(arch, theta, T, args.resolution)
    with open(out / "surface.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"eta{j + 1}" for j in range(arch.d - 1)] + ["value"])
        for t, e, v in rows:
            w.writerow([_fmt(t)] + [_fmt(x) for x in e] + [_fmt(v)])
    write_manifest(out, "surface", {"checkpoint": str(args.checkpoint), "resolution": args.resolution}, None, started, ["surface.csv"])
    return EXIT_OK


def compare_to_grid(arch: Architecture, theta, grid, band: float = 0.05, every: int = 1) -> ComparisonReport:
    """Sup and mean |network - grid| over nodes at least ``band`` away from the chart boundary."""
    nodes = grid.nodes()
    keep = distance_to_boundary(nodes) >= band - 1e-12
    if not keep.any():
        raise UsageError("no comparison nodes inside the band; refine h")
    pts = nodes[keep]
    sup, total, count = 0.0, 0.0, 0
    slices = sorted(set(range(0, len(grid.times), every)) | {len(grid.times) - 1})
    for k in slices:
        gap = np.abs(evaluate(arch, theta, grid.times[k], pts, need_grad=False).value - grid.node_values(k)[keep])
        sup = max(sup, float(gap.max()))
        total += float(gap.sum())
        count += gap.size
    return ComparisonReport(sup, total / count, int(keep.sum()), band)


def _grid_args(spec, args):
    h = args.h
    steps = args.steps or int(np.ceil(spec.T * 2.0 * spec.M * spec.d / h - 1e-9))
    return steps, h


def cmd_compare(args) -> int:
    started = time.time()
    arch, theta, T = _load(args.checkpoint)
    spec = _problem(args, arch, T)
    steps, h = _grid_args(spec, args)
    grid = solve_grid_hjb(spec, steps, h)
    every = max(1, steps // 50)
    rep = compare_to_grid(arch, theta, grid, args.band, every)
    out = _out_dir(args.out)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sup_gap", "mean_gap", "nodes", "band"])
        w.writerow([_fmt(rep.sup_gap), _fmt(rep.mean_gap), rep.nodes, _fmt(rep.band)])
    write_manifest(out, "compare", {"checkpoint": str(args.checkpoint), "h": h, "steps": steps, "band": args.band}, None, started, ["comparison.csv"])
    print(f"interior sup gap {rep.sup_gap:.5f}  mean gap {rep.mean_gap:.5f}  nodes {rep.nodes}  band {rep.band}")
    return EXIT_OK


def cmd_nagent(args) -> int:
    started = time.time()
    arch, theta, T = _load(args.checkpoint)
    spec = _problem(args, arch, T)
    m0 = _point(args.m0, spec.d) if args.m0 else np.full(spec.d, 1.0 / spec.d)
    try:
        check_simplex(m0)
    except SimplexError as exc:
        raise UsageError(f"--m0: {exc}") from None
    if args.zero_policy:
        policy = zero_policy(spec.d)
        reference = float(evaluate_cost(spec, m0, policy))
    else:
        policy = network_policy(spec, arch, theta)
        reference = float(evaluate(arch, theta, 0.0, m0[:-1], need_grad=False).value)
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args.out)
    with open(out / "nagent.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "mean_cost", "stderr", "reference", "gap"])
        for k, N in enumerate(_ints(args.n_list)):
            res = simulate_n_agents(spec, policy, N, m0, args.reps, seed + 1000 * k, initial=args.initial)
            w.writerow([N, _fmt(res.mean), _fmt(res.stderr), _fmt(reference), _fmt(abs(res.mean - reference))])
            print(f"N={N:6d}  cost {res.mean:.5f} +- {res.stderr:.5f}  gap {abs(res.mean - reference):.5f}")
    config = {"checkpoint": str(args.checkpoint), "n_list": args.n_list, "reps": args.reps, "m0": m0.tolist(), "zero_policy": args.zero_policy, "initial": args.initial}
    write_manifest(out, "nagent", config, seed, started, ["nagent.csv"])
    return EXIT_OK


def cmd_oracle(args) -> int:
    started = time.time()
    spec = _problem(args)
    steps, h = _grid_args(spec, args)
    grid = solve_grid_hjb(spec, steps, h)
    out = _out_dir(args.out)
    grid.to_csv(out / "grid.csv", every=args.every)
    write_manifest(out, "oracle", {"d": spec.d, "h": h, "steps": steps, "every": args.every}, None, started, ["grid.csv"])
    n = grid.nodes().shape[0]
    print(f"grid solved: {n} nodes, {steps} steps; V(0, barycenter node) = {_barycenter_value(grid):.6f}")
    return EXIT_OK


def _barycenter_value(grid) -> float:
    eta = np.full(grid.spec.d - 1, 1.0 / grid.spec.d)
    return float(grid.value_at(0.0, eta)[0])


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfcdgm", description="DGM solver for finite-state mean field control.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("surface", help="export network values on a (t, m1) lattice")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--resolution", type=int, default=101)
    s.add_argument("--out", default=".")
    s.add_argument("--d", type=int)
    s.set_defaults(func=cmd_surface)

    def oracle_flags(q):
        q.add_argument("--config")
        q.add_argument("--d", type=int)
        q.add_argument("--h", type=float, default=0.01)
        q.add_argument("--steps", type=int, help="time steps; default is the CFL limit")

    c = sub.add_parser("compare", help="network vs grid oracle on interior nodes")
    c.add_argument("--checkpoint", required=True)
    oracle_flags(c)
    c.add_argument("--band", type=float, default=0.05)
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_compare)

    n = sub.add_parser("nagent", help="N-agent Monte Carlo under the recovered control")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--config")
    n.add_argument("--d", type=int)
    n.add_argument("--n-list", default="10,100,1000")
    n.add_argument("--reps", type=int, default=100)
    n.add_argument("--seed", type=int)
    n.add_argument("--m0", help="comma-separated initial distribution (default uniform)")
    n.add_argument("--initial", choices=("iid", "quantized"), default="iid")
    n.add_argument("--zero-policy", action="store_true", help="simulate with zero rates instead")
    n.add_argument("--out", default=".")
    n.set_defaults(func=cmd_nagent)

    o = sub.add_parser("oracle", help="solve the grid HJB and export it")
    oracle_flags(o)
    o.add_argument("--every", type=int, default=10, help="export every k-th time slice")
    o.add_argument("--out", default=".")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
