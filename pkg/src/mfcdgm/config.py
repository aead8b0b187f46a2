"""Flat ``key = value`` run configuration.

Keys carry a section prefix (``problem.``, ``arch.``, ``train.``); ``seed``
and ``out`` are top level. Blank lines and ``#`` comments are ignored.
Example::

    problem.d = 2
    problem.c = ones          # or rows separated by ';': 1,2;2,1
    arch.kind = mlp
    train.epochs = 200
    seed = 0
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .model import MfcpSpec
from .network import Architecture
from .solver import TrainingConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


_PROBLEM_KEYS = {"d": int, "T": float, "M": float, "c": str, "running": str, "terminal": str, "terminal_weights": str}
_ARCH_KEYS = {"kind": str, "depth": int, "width": int, "activation": str}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainingConfig) if f.name != "seed"}


@dataclass
class RunConfig:
    problem: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "run"

    def spec(self) -> MfcpSpec:
        p = dict(self.problem)
        p.setdefault("d", 2)
        if "c" in p:
            p["c"] = _matrix(p["c"], p["d"])
        if "terminal_weights" in p:
            p["terminal_weights"] = _floats(p["terminal_weights"])
        return MfcpSpec(**p)

    def architecture(self) -> Architecture:
        return Architecture(d=self.spec().d, **self.arch)

    def training(self) -> TrainingConfig:
        return TrainingConfig(seed=self.seed, **self.train)

    def echo(self) -> dict:
        """Flat ``key -> value`` view, used for manifests."""
        out = {f"problem.{k}": v for k, v in self.problem.items()}
        out.update({f"arch.{k}": v for k, v in self.arch.items()})
        out.update({f"train.{k}": v for k, v in self.train.items()})
        out.update(seed=self.seed, out=self.out)
        return out


def _floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(",")])


def _matrix(text, d):
    if text is None or str(text).strip() == "ones":
        return None
    rows = [_floats(r) for r in str(text).split(";")]
    return np.vstack(rows)


def _convert(key, raw, kind):
    if raw.lower() in ("none", "null", ""):
        return None
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float", "float | None"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    sections = {"problem": (_PROBLEM_KEYS, cfg.problem), "arch": (_ARCH_KEYS, cfg.arch), "train": (_TRAIN_KEYS, cfg.train)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key == "seed":
            cfg.seed = _convert(key, raw, int)
            continue
        if key == "out":
            cfg.out = raw
            continue
        section, _, name = key.partition(".")
        if section not in sections or name not in sections[section][0]:
            raise ConfigError(f"unknown key {key!r}")
        table, store = sections[section]
        store[name] = _convert(key, raw, table[name])
    try:
        cfg.spec()
        cfg.architecture()
        cfg.training()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
