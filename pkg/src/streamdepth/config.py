"""Flat ``key = value`` run configuration with namespaced keys.

Every tunable lives under one of ``world.``, ``train.``, ``stream.``,
``schedule.``, ``eval.``, ``oracle.`` or ``paths.``, plus the top-level
``seed``.  Unknown keys are rejected.  Blank lines and ``#`` comments are
ignored.  ``CHRONO_SEED`` in the environment overrides ``seed``.
"""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Any, Mapping, Optional

from .denoiser.training import TrainConfig
from .streaming import STRATEGIES, StreamConfig

SEED_ENV = "CHRONO_SEED"


class ConfigError(ValueError):
    pass


# key -> (type, default, description)
SCHEMA: dict[str, tuple[type, Any, str]] = {
    "seed": (int, 0, "master seed for data, training and sampling"),
    "world.family": (str, "room", "scene family used by gen-data"),
    "world.n_sequences": (int, 20, "training sequences"),
    "world.test_sequences": (int, 10, "held-out sequences (gen-data --split test)"),
    "world.frames": (int, 60, "frames per sequence"),
    "world.height": (int, 32, "image height"),
    "world.width": (int, 32, "image width"),
    "world.moving": (bool, False, "allow moving spheres"),
    "world.test_seed_offset": (int, 1, "added to seed for the held-out split"),
    "train.lr": (float, 2e-3, "Adam learning rate (toy network)"),
    "train.batch_size": (int, 16, "frames per single-frame step"),
    "train.clip_batch": (int, 4, "clips per clip step"),
    "train.steps_stage1": (int, 1500, "single-frame steps"),
    "train.steps_stage2": (int, 1500, "clip steps"),
    "train.f_max": (int, 10, "largest training clip length"),
    "train.p_mean": (float, 0.7, "mean of log sigma during training"),
    "train.p_std": (float, 1.6, "std of log sigma during training"),
    "stream.clip_len": (int, 10, "frames per inference clip"),
    "stream.overlap": (int, 5, "context frames carried between clips"),
    "stream.strategy": (str, "context_aware", "naive | replacement | context_aware"),
    "stream.sigma_eps": (float, math.exp(-4.0), "noise level declared for clean context frames"),
    "schedule.num_steps": (int, 25, "sampling steps"),
    "schedule.sigma_min": (float, 0.002, "smallest nonzero noise level"),
    "schedule.sigma_max": (float, 80.0, "initial noise level"),
    "schedule.rho": (float, 7.0, "schedule curvature"),
    "eval.method": (str, "mesh", "depth warp: mesh | splat"),
    "eval.sweep_log_sigma_eps": (str, "-8,-6,-4,-2,0", "comma-separated log sigma_eps grid"),
    "oracle.frames": (int, 10, "clip length of the Gaussian world"),
    "oracle.frame_dim": (int, 4, "values per frame"),
    "oracle.rho_time": (float, 0.9, "temporal correlation"),
    "oracle.samples": (int, 10000, "Monte-Carlo samples"),
    "oracle.overlap": (int, 5, "fixed context frames"),
    "oracle.context_value": (float, 2.0, "value of every context entry"),
    "oracle.bootstrap": (int, 200, "bootstrap resamples for confidence intervals"),
    "paths.data": (str, "data/train", "training dataset directory"),
    "paths.test_data": (str, "data/test", "held-out dataset directory"),
    "paths.run": (str, "runs/default", "checkpoint and report directory"),
}


def _parse_value(key: str, raw: str) -> Any:
    typ = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Validated mapping over ``SCHEMA``; missing keys take their defaults."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self._values = {k: spec[1] for k, spec in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and SCHEMA[key][0] is not str:
            value = _parse_value(key, value)
        typ = SCHEMA[key][0]
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
        self._values[key] = value

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def as_dict(self) -> dict:
        return dict(self._values)

    def updated(self, **changes) -> "RunConfig":
        """Copy with overrides; keys use ``__`` in place of ``.`` (``stream__overlap=3``)."""
        new = RunConfig(self._values)
        for k, v in changes.items():
            new.set(k.replace("__", "."), v)
        return new

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            cfg.set(key, _parse_value(key, raw))
        return cfg

    def serialize(self, with_docs: bool = False) -> str:
        lines = []
        for key in SCHEMA:
            if with_docs:
                lines.append(f"# {SCHEMA[key][2]}")
            lines.append(f"{key} = {_format_value(self._values[key])}")
        return "\n".join(lines) + "\n"

    # --- views for the library modules ------------------------------------

    def train_config(self) -> TrainConfig:
        v = self._values
        return TrainConfig(
            lr=v["train.lr"], batch_size=v["train.batch_size"], clip_batch=v["train.clip_batch"],
            steps_stage1=v["train.steps_stage1"], steps_stage2=v["train.steps_stage2"],
            f_max=v["train.f_max"], p_mean=v["train.p_mean"], p_std=v["train.p_std"], seed=v["seed"],
        )

    def stream_config(self) -> StreamConfig:
        v = self._values
        return StreamConfig(
            clip_len=v["stream.clip_len"], overlap=v["stream.overlap"], strategy=v["stream.strategy"],
            sigma_eps=v["stream.sigma_eps"], num_steps=v["schedule.num_steps"],
            sigma_min=v["schedule.sigma_min"], sigma_max=v["schedule.sigma_max"],
            rho=v["schedule.rho"], seed=v["seed"],
        )

    def sweep_grid(self) -> list[float]:
        raw = self._values["eval.sweep_log_sigma_eps"]
        try:
            grid = [float(x) for x in raw.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"eval.sweep_log_sigma_eps: bad grid {raw!r}") from exc
        if not grid:
            raise ConfigError("eval.sweep_log_sigma_eps is empty")
        return grid

    def validate(self) -> None:
        if self["stream.strategy"] not in STRATEGIES:
            raise ConfigError(f"stream.strategy must be one of {STRATEGIES}")
        if self["eval.method"] not in ("mesh", "splat"):
            raise ConfigError("eval.method must be mesh or splat")
        try:
            self.train_config()
            self.stream_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.sweep_grid()


def load_config(path: Optional[str | Path] = None, overrides: Optional[list[str]] = None,
                env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults, then the file, then ``key=value`` overrides, then ``CHRONO_SEED``."""
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = RunConfig.parse(path.read_text(), str(path))
    else:
        cfg = RunConfig()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cfg.set(key, _parse_value(key, raw))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg.set("seed", _parse_value("seed", env[SEED_ENV]))
    cfg.validate()
    return cfg
