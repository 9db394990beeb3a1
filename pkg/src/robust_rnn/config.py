"""Flat ``key = value`` run configuration shared by every subcommand.

Blank lines and ``#`` comments are ignored. Keys may be written with dashes
or underscores. Unknown keys are rejected, as are values that fail
validation, before any data is read.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import Activation
from .robustness import NoiseSpec
from .train import MuDecay, Regime, TrainConfig


class ConfigError(ValueError):
    """Bad config file, unknown key or inconsistent setting."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none", "off") else float(text)


def _float_list(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _str_list(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _optional_str(text: str):
    text = text.strip()
    return None if text.lower() in ("", "none") else text


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


_PARSERS = {
    "bool": _bool,
    "int": int,
    "float": float,
    "optional_float": _optional_float,
    "float_list": _float_list,
    "str_list": _str_list,
    "str": str.strip,
    "optional_str": _optional_str,
    "optional_int": _optional_int,
}


def _f(default, kind, **kw):
    return field(default=default, metadata={"kind": kind}, **kw)


@dataclass(frozen=True)
class RunConfig:
    # reproducibility
    seed: int = _f(0, "int")
    # model
    hidden: int = _f(60, "int")
    activation: str = _f("relu", "str")
    init: str = _f("glorot", "str")
    # training
    regime: str = _f("regular", "str")
    mu: float = _f(0.0, "float")
    mu_decay: str = _f("epoch", "str")
    reg_weights: str = _f("all", "str")
    epochs: int = _f(30, "int")
    batch_size: int = _f(64, "int")
    step_size: float = _f(0.01, "float")
    momentum: float = _f(0.9, "float")
    gradient_clip_norm: float | None = _f(5.0, "optional_float")
    schedule: str = _f("constant", "str")
    # noise used by the regularisers, certify and verify
    omega: float = _f(1.0, "float")
    gamma: float = _f(0.0, "float")
    # data
    mnist_images: str | None = _f(None, "optional_str")
    mnist_labels: str | None = _f(None, "optional_str")
    mnist_test_images: str | None = _f(None, "optional_str")
    mnist_test_labels: str | None = _f(None, "optional_str")
    train_size: int = _f(10_000, "int")
    test_size: int = _f(2_000, "int")
    train_subset_seed: int = _f(0, "int")
    test_subset_seed: int = _f(1, "int")
    synthetic: bool = _f(False, "bool")
    synthetic_per_class: int = _f(200, "int")
    synthetic_steps: int = _f(10, "int")
    synthetic_dim: int = _f(4, "int")
    synthetic_separation: float = _f(1.0, "float")
    # sweep
    omega_grid: tuple = _f((0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0), "float_list")
    n_repeats: int = _f(1, "int")
    target_pct: float | None = _f(None, "optional_float")
    workers: int = _f(1, "int")
    # certify / verify
    horizon: int | None = _f(None, "optional_int")
    verify_samples: int = _f(10_000, "int")
    verify_index: int = _f(0, "int")
    # io
    checkpoint: tuple = _f((), "str_list")
    out: str = _f("runs", "str")

    def __post_init__(self):
        object.__setattr__(self, "omega_grid", tuple(float(w) for w in self.omega_grid))
        object.__setattr__(self, "checkpoint", tuple(self.checkpoint))

    # ------------------------------------------------------------ build

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @staticmethod
    def normalise_key(key: str) -> str:
        return key.strip().replace("-", "_")

    @classmethod
    def parse_value(cls, key: str, text: str):
        by_name = {f.name: f for f in fields(cls)}
        if key not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            return _PARSERS[by_name[key].metadata["kind"]](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    @classmethod
    def read_file(cls, path) -> dict:
        """Parse a config file into a ``{key: value}`` dict (validated keys)."""
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        values = {}
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, text = line.split("=", 1)
            key = cls.normalise_key(key)
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = cls.parse_value(key, text)
        return values

    @classmethod
    def build(cls, *layers: dict) -> "RunConfig":
        merged = {}
        for layer in layers:
            for key, value in layer.items():
                key = cls.normalise_key(key)
                if key not in cls.keys():
                    raise ConfigError(f"unknown config key {key!r}")
                merged[key] = value
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def replace(self, **kw) -> "RunConfig":
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg

    # ------------------------------------------------------- validation

    def validate(self) -> None:
        def need(cond, message):
            if not cond:
                raise ConfigError(message)

        for name in ("regime", "mu_decay", "activation"):
            enum_type = {"regime": Regime, "mu_decay": MuDecay, "activation": Activation}[name]
            try:
                enum_type(getattr(self, name))
            except ValueError:
                choices = ", ".join(e.value for e in enum_type)
                raise ConfigError(f"{name} must be one of: {choices}") from None
        need(self.init in ("glorot", "identity"), "init must be glorot or identity")
        need(self.reg_weights in ("all", "final"), "reg_weights must be all or final")
        need(self.schedule in ("constant", "cosine"), "schedule must be constant or cosine")
        need(self.hidden >= 1, "hidden must be at least 1")
        need(self.epochs >= 1, "epochs must be at least 1")
        need(self.batch_size >= 1, "batch_size must be at least 1")
        need(math.isfinite(self.step_size) and self.step_size >= 0, "step_size must be a non-negative number")
        need(0 <= self.momentum < 1, "momentum must lie in [0, 1)")
        need(math.isfinite(self.mu) and self.mu >= 0, "mu must be non-negative")
        need(self.gradient_clip_norm is None or self.gradient_clip_norm > 0, "gradient_clip_norm must be positive")
        need(math.isfinite(self.omega) and self.omega >= 0, "omega must be non-negative")
        need(math.isfinite(self.gamma) and self.gamma >= 0, "gamma must be non-negative")
        need(self.train_size >= 1 and self.test_size >= 1, "subset sizes must be positive")
        need(self.synthetic_per_class >= 1, "synthetic_per_class must be at least 1")
        need(self.synthetic_steps >= 1 and self.synthetic_dim >= 1, "synthetic shape must be positive")
        need(self.synthetic_separation > 0, "synthetic_separation must be positive")
        need(len(self.omega_grid) >= 1, "omega_grid must not be empty")
        need(all(math.isfinite(w) and w >= 0 for w in self.omega_grid), "omega_grid values must be non-negative")
        need(
            all(b > a for a, b in zip(self.omega_grid, self.omega_grid[1:])),
            "omega_grid must be strictly increasing",
        )
        need(self.n_repeats >= 1, "n_repeats must be at least 1")
        need(self.workers >= 1, "workers must be at least 1")
        need(self.target_pct is None or 0 < self.target_pct < 100, "target_pct must lie in (0, 100)")
        need(self.horizon is None or self.horizon >= 1, "horizon must be at least 1")
        need(self.verify_samples >= 2, "verify_samples must be at least 2")
        need(self.verify_index >= 0, "verify_index must be non-negative")
        pairs = ((self.mnist_images, self.mnist_labels), (self.mnist_test_images, self.mnist_test_labels))
        for images, labels in pairs:
            need((images is None) == (labels is None), "MNIST image and label paths must be given together")
        need(
            not (self.synthetic and (self.mnist_images or self.mnist_test_images)),
            "choose either synthetic data or MNIST files, not both",
        )

    # ---------------------------------------------------------- derived

    def noise(self, d: int, n: int | None = None) -> NoiseSpec:
        return NoiseSpec.isotropic(self.omega, d, n, self.gamma)

    def train_config(self, d: int, n: int) -> TrainConfig:
        return TrainConfig(
            regime=Regime(self.regime),
            mu=self.mu,
            epochs=self.epochs,
            batch_size=self.batch_size,
            step_size=self.step_size,
            momentum=self.momentum,
            seed=self.seed,
            gradient_clip_norm=self.gradient_clip_norm,
            noise=self.noise(d, n),
            mu_decay=MuDecay(self.mu_decay),
            reg_weights=self.reg_weights,
            schedule=self.schedule,
        )

    def to_text(self) -> str:
        """Canonical ``key = value`` rendering; reading it back gives an equal config."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()
