"""Experiment configuration: TOML sections mapped onto dataclasses with strict key checking."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Iterable

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .ptq import OBJECTIVES
from .quant import BitConfig
from .sensitivity import DEFAULT_LEVELS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    train: int = 2000
    val: int = 300
    min_lanes: int = 2
    max_lanes: int = 4
    noise_sigma: float = 0.05
    curvature: float = 0.004


@dataclass(frozen=True)
class ModelSection:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 32
    pos_weight: float = 1.0
    root_weight: float = 0.1
    threshold: float = 0.5
    cluster_radius: float = 8.0


@dataclass(frozen=True)
class QuantSection:
    bits: str = "W4A4"
    calib_size: int = 512
    momentum: float = 0.9


@dataclass(frozen=True)
class TuneSection:
    iterations: int = 5000
    lr: float = 2.5e-5
    batch_size: int = 32
    log_every: int = 100


@dataclass(frozen=True)
class FocusSection:
    lam: float = 2.0
    objective: str = "focus_select"


@dataclass(frozen=True)
class SelectionSection:
    k: int = 1
    refresh_interval: int = 2000
    noise_levels: tuple[float, ...] = DEFAULT_LEVELS
    reruns: int = 20
    curve_images: int = 100


@dataclass(frozen=True)
class AblateSection:
    seeds: tuple[int, ...] = (0, 1, 2)
    bits: tuple[str, ...] = ("W8A8", "W8A4", "W4A4")
    objectives: tuple[str, ...] = OBJECTIVES


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    workdir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    quant: QuantSection = field(default_factory=QuantSection)
    tune: TuneSection = field(default_factory=TuneSection)
    focus: FocusSection = field(default_factory=FocusSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Short digest of the resolved config; ``workdir`` is excluded so moved runs keep their hash."""
        d = self.to_dict()
        d.pop("workdir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def bits(self) -> BitConfig:
        return BitConfig.parse(self.quant.bits)


SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{where}: expected a non-empty list, got {value!r}")
        return tuple(_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{where}: unsupported type")


def _apply(obj, values: dict, where: str):
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'top level'}: {', '.join(unknown)}")
    changes = {}
    for key, value in values.items():
        cur = getattr(obj, key)
        path = f"{where}.{key}" if where else key
        if is_dataclass(cur):
            if not isinstance(value, dict):
                raise ConfigError(f"[{path}] must be a table")
            changes[key] = _apply(cur, value, path)
        else:
            changes[key] = _coerce(value, cur, path)
    return replace(obj, **changes)


def _validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.bits
        for b in cfg.ablate.bits:
            BitConfig.parse(b)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for obj in (cfg.focus.objective, *cfg.ablate.objectives):
        if obj not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {obj!r}")
    if cfg.focus.objective != "plain" and not cfg.focus.lam > 1:
        raise ConfigError(f"focus.lam must exceed 1, got {cfg.focus.lam}")
    if not 1 <= cfg.selection.k <= 2:
        raise ConfigError(f"selection.k must be 1 or 2, got {cfg.selection.k}")
    lv = cfg.selection.noise_levels
    if lv[0] != 0.0 or any(b <= a for a, b in zip(lv, lv[1:])):
        raise ConfigError("selection.noise_levels must start at 0 and increase strictly")
    positive = {"data.train": cfg.data.train, "data.val": cfg.data.val, "model.batch_size": cfg.model.batch_size,
                "quant.calib_size": cfg.quant.calib_size, "tune.batch_size": cfg.tune.batch_size,
                "selection.refresh_interval": cfg.selection.refresh_interval,
                "selection.reruns": cfg.selection.reruns, "selection.curve_images": cfg.selection.curve_images}
    for key, v in positive.items():
        if v <= 0:
            raise ConfigError(f"{key} must be positive, got {v}")
    if cfg.quant.calib_size > cfg.data.train:
        raise ConfigError("quant.calib_size exceeds data.train")
    if cfg.tune.iterations < 0 or cfg.model.epochs < 0:
        raise ConfigError("iteration and epoch counts must be non-negative")
    if not 1 <= cfg.data.min_lanes <= cfg.data.max_lanes:
        raise ConfigError("need 1 <= data.min_lanes <= data.max_lanes")


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value`` with ``value`` read as a TOML literal, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    path = key.strip().lstrip("-").split(".")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return path, value


def _nest(path: list[str], value: Any) -> dict:
    out: dict = value
    for part in reversed(path):
        out = {part: out}
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = _apply(cfg, data, "")
    for text in overrides:
        keys, value = parse_override(text)
        cfg = _apply(cfg, _nest(keys, value), "")
    _validate(cfg)
    return cfg


def dump_toml(cfg: ExperimentConfig) -> str:
    """Render a config back to TOML (round-trips through :func:`load_config`)."""

    def lit(v):
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(lit(x) for x in v) + "]"
        return repr(v)

    d = cfg.to_dict()
    lines = [f"{k} = {lit(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for section, body in d.items():
        if isinstance(body, dict):
            lines.append(f"\n[{section}]")
            lines += [f"{k} = {lit(v)}" for k, v in body.items()]
    return "\n".join(lines) + "\n"
