"""Experiment configuration and the flat ``key = value`` config file format.

Example::

    # classification with a shifted test environment
    task = classification
    train_rates = 0.9, 0.8
    test_rates = 0.1
    scramble = random_orthogonal
    seeds = 0, 1, 2
    k = 10, 15, 20, 25
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

from .errors import ConfigError, ParseError

TASKS = ("classification", "regression", "colored_mnist", "csv")
METHODS = ("kerhrm", "kerhrm-static", "erm", "irm")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "classification"

    # generators (which ones are read depends on the task)
    train_rates: Tuple[float, ...] = (0.9, 0.8)
    train_n: Tuple[int, ...] = (1000, 1000)
    test_rates: Tuple[float, ...] = (0.1,)
    test_n: Tuple[int, ...] = (1000,)
    scramble: str = "identity"
    d: int = 5
    sigma_s2: float = 3.0
    sigma_v2: float = 0.3
    noise_param: str = "variance"
    n_s: int = 5
    beta: float = 5.0
    noise_sd: float = 0.5477225575051661
    vb_index: int = 0
    mnist_dir: str = ""
    flips: Tuple[float, ...] = (0.1, 0.2, 0.9)
    label_noise: float = 0.2
    mnist_n: int = 2500
    downsample: Tuple[int, ...] = (14, 14)
    csv_path: str = ""
    target_col: str = ""
    env_col: str = ""
    thresholds: Tuple[float, ...] = ()
    train_envs: Tuple[int, ...] = (0,)

    # network
    hidden: int = 1024
    activation: str = "relu"
    init: str = "mirrored"

    # algorithm
    k: Tuple[int, ...] = (10, 15, 20, 25)
    K: int = 2
    T: int = 3
    alpha: float = 10.0
    lam: float = 1.0
    epochs: int = 2000
    lr: float = 0.0
    lr_scale: float = 0.9
    theta_lr: float = 0.0
    theta_steps: int = 20000
    em_max_iter: int = 200
    em_tol: float = 1e-6
    em_restarts: int = 1
    assign_mode: str = "argmax"
    update_mode: str = "fresh"
    val_frac: float = 0.1
    gram: str = "closed_form"
    gram_block: int = 512
    train_every_iteration: bool = True

    # bookkeeping
    seeds: Tuple[int, ...] = (0,)
    methods: Tuple[str, ...] = ("kerhrm", "erm")
    out: str = "results"

    def validate(self) -> "ExperimentConfig":
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not self.k or min(self.k) < 1:
            raise ConfigError("k must be a non-empty list of positive integers")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.alpha < 0 or self.lam < 0:
            raise ConfigError("alpha and lam must be non-negative")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown method(s) {bad}; expected a subset of {METHODS}")
        if self.init not in ("mirrored", "gaussian"):
            raise ConfigError(f"init must be 'mirrored' or 'gaussian', got {self.init!r}")
        if self.gram not in ("closed_form", "streaming"):
            raise ConfigError(f"gram must be 'closed_form' or 'streaming', got {self.gram!r}")
        if not 0 <= self.val_frac < 1:
            raise ConfigError("val_frac must lie in [0, 1)")
        if self.assign_mode not in ("argmax", "sample"):
            raise ConfigError(f"unknown assign_mode {self.assign_mode!r}")
        if self.update_mode not in ("fresh", "cumulative"):
            raise ConfigError(f"unknown update_mode {self.update_mode!r}")
        return self

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v) for f in fields(self) for v in [getattr(self, f.name)]}


_HINTS = typing.get_type_hints(ExperimentConfig)


def _convert(key, raw: str):
    hint = _HINTS[key]
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            (inner, _) = typing.get_args(hint)
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_scalar(inner, s) for s in items)
        return _scalar(hint, raw.strip())
    except ValueError as exc:
        raise ParseError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def _scalar(tp, s):
    if tp is bool:
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if tp is int:
        return int(s)
    if tp is float:
        return float(s)
    return s


def parse_config_text(text: str, source="<string>") -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, method: Optional[str] = None,
                   out: Optional[str] = None) -> ExperimentConfig:
    kw = {}
    if seed is not None:
        kw["seeds"] = (seed,)
    if method is not None:
        kw["methods"] = (method,)
    if out is not None:
        kw["out"] = out
    return cfg.replace(**kw) if kw else cfg
