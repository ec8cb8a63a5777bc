"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Every key maps onto a field of
:class:`RunConfig`; unknown keys are rejected so typos fail loudly.  A single
``seed`` drives corpus generation, fold assignment and training.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .data import PreprocessConfig
from .synth import SyntheticConfig
from .trainer import TrainConfig
from .zoom import VarifocalConstants


class ConfigError(ValueError):
    pass


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    seed: int = 0
    # corpus
    n_cases: int = 200
    trisomy_fraction: float = 0.0
    sex_ratio: float = 0.5
    # folds
    n_folds: int = 5
    fold: int = 0
    # geometry
    image_side: int = 256
    pad_side: int = 320
    t1: float = 64.0
    t2: float = 128.0
    k: float = 10.0
    zoom_side: int = 128
    # dispatch
    th: float = 0.9
    # training (mirrors TrainConfig)
    epochs_gnet: int = 30
    epochs_localizer: int = 10
    epochs_lnet: int = 30
    epochs_localizer_ft: int = 1
    epochs_ensemble: int = 20
    alternation_rounds: int = 3
    plateau_tol: float = 1e-4
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    width_scale: float = 1.0
    lam: float = 0.5
    reduction: str = "mean"
    augment: bool = True
    val_fraction: float = 0.1

    def __post_init__(self):
        try:
            self.constants()
            self.preprocess()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 <= self.fold < self.n_folds:
            raise ConfigError(f"fold {self.fold} outside 0..{self.n_folds - 1}")
        if not 0.0 < self.th < 1.0:
            raise ConfigError("th must lie in (0, 1)")
        if self.n_cases < 1:
            raise ConfigError("n_cases must be positive")
        if not 0.0 <= self.trisomy_fraction <= 1.0 or not 0.0 <= self.sex_ratio <= 1.0:
            raise ConfigError("trisomy_fraction and sex_ratio must lie in [0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def constants(self) -> VarifocalConstants:
        return VarifocalConstants(self.t1, self.t2, self.k, self.image_side, self.zoom_side)

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(self.pad_side, self.image_side)

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(canvas_side=self.pad_side)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **{k: getattr(self, k) for k in _TRAIN_KEYS})

    @property
    def manifest_path(self) -> Path:
        return Path(self.data_dir) / "manifest.csv"

    def require_dataset(self) -> None:
        if not self.manifest_path.is_file():
            raise ConfigError(f"dataset manifest not found: {self.manifest_path}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, raw: str, kind) -> object:
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_config(text: str, base: Optional[RunConfig] = None, source: str = "<config>") -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    merged = dataclasses.asdict(base) if base is not None else {}
    merged.update(values)
    return RunConfig(**merged)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
