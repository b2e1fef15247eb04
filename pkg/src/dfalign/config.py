"""Run configuration: one flat record, stored as ``key = value`` lines.

Blank lines and ``#`` comments are ignored; unknown keys are errors. Tuples
are written comma-separated. Floats use ``repr`` so a write/read cycle is
lossless.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .cascade import SCHEDULE_MODES, TrainConfig
from .synth import GenerationConfig

PATH_KEYS = ("data_dir", "bundle_dir")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    image_size: int = 64
    n_landmarks: int = 8
    invisible_fraction: float = 0.05
    deformation: float = 0.03
    noise: float = 0.03
    # architecture
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    dense: int = 128
    dtype: str = "float32"
    # training
    iterations: int = 6000
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    alpha: float = 1.0
    beta: float = 1.0
    t1: int = 2000
    t2: int = 4000
    schedule_mode: str = "as-written"
    n_clusters: int = 20
    temperature: float = 20.0
    epsilon: float = 0.3
    label_scale: float = 224.0
    warm_start: bool = True
    select_best: bool = True
    log_every: int = 100
    val_every: int = 500
    # evaluation: 15 px at 224 px, scaled to the image side
    pdl_threshold: float = 15 * 64 / 224
    # randomness and locations
    seed: int = 0
    data_dir: str = "data"
    bundle_dir: str = "bundle"

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for key in ("n_train", "n_val", "n_test"):
            need(getattr(self, key) >= 1, f"{key} must be >= 1")
        need(self.n_train >= self.n_clusters, "n_train must be at least n_clusters")
        need(32 <= self.image_size <= 512, "image_size must be in [32, 512]")
        need(self.n_landmarks == 8, "n_landmarks must be 8 (the garment templates define 8)")
        need(0 <= self.invisible_fraction < 1, "invisible_fraction must be in [0, 1)")
        need(0 <= self.deformation <= 0.2, "deformation must be in [0, 0.2]")
        need(0 <= self.noise <= 0.5, "noise must be in [0, 0.5]")
        need(len(self.channels) >= 1 and all(c >= 1 for c in self.channels), "channels must be positive")
        need(self.image_size % 2 ** len(self.channels) == 0,
             "image_size must be divisible by 2^len(channels)")
        need(self.kernel >= 1 and self.kernel % 2 == 1, "kernel must be odd and positive")
        need(self.dense >= 1, "dense must be >= 1")
        need(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")
        need(self.iterations >= 1, "iterations must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.learning_rate > 0, "learning_rate must be > 0")
        need(0 <= self.momentum < 1, "momentum must be in [0, 1)")
        need(self.alpha >= 0 and self.beta >= 0, "alpha and beta must be >= 0")
        need(0 < self.t1 < self.t2, "need 0 < t1 < t2")
        need(self.schedule_mode in SCHEDULE_MODES, f"schedule_mode must be one of {SCHEDULE_MODES}")
        need(self.n_clusters >= 1, "n_clusters must be >= 1")
        need(self.temperature > 0, "temperature must be > 0")
        need(self.epsilon >= 0, "epsilon must be >= 0")
        need(self.label_scale > 0, "label_scale must be > 0")
        need(self.log_every >= 1 and self.val_every >= 1, "log_every and val_every must be >= 1")
        need(self.val_every % self.log_every == 0, "val_every must be a multiple of log_every")
        need(self.pdl_threshold > 0, "pdl_threshold must be > 0")
        need(0 <= self.seed < 2 ** 64, "seed must be an unsigned 64-bit integer")
        return self

    # -- views onto component configs --------------------------------------

    def generation(self, n_samples: int) -> GenerationConfig:
        return GenerationConfig(n_samples=n_samples, image_size=self.image_size,
                                n_landmarks=self.n_landmarks, invisible_fraction=self.invisible_fraction,
                                deformation=self.deformation, noise=self.noise)

    def training(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(self) if f.name in names})

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw).validate()

    # -- serialization --------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = _parse(value, getattr(defaults, key))
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        try:
            return cls(**values).validate()
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def hash(self) -> str:
        """sha256 of the canonical text with the location keys left out."""
        text = "".join(line + "\n" for line in self.to_text().splitlines()
                       if line.split(" = ", 1)[0] not in PATH_KEYS)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, like):
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        return tuple(int(p) for p in parts)
    return text
