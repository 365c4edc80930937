"""Run configuration: a nested YAML document with ``model``, ``train``, ``probe``
and ``audit`` sections.

Unknown keys and bad values are reported with the line they came from.
``dump_config(parse_config(text))`` re-parses to the same object.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .dynamics import GammaParam, LyapunovSpec, NominalDynamics
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line, self.source = line, source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass
class ModelConfig:
    n: int = 1
    f_hidden: list[int] = field(default_factory=list)
    G_hidden: list[int] = field(default_factory=list)
    h_hidden: list[int] = field(default_factory=list)
    f_scale: float = 1.0
    lyapunov_centers: list[list[float]] | None = None
    lyapunov_weight: float = 0.5
    gamma_mode: str = "trainable"
    gamma_init: float = 1.0
    x0: list[float] | None = None
    seed: int = 0

    def build(self, m: int, l: int, seed: int | None = None) -> NominalDynamics:
        centers = self.lyapunov_centers or [[0.0] * self.n]
        return NominalDynamics.create(
            self.n, m, l, LyapunovSpec.mixture(centers, self.lyapunov_weight),
            self.f_hidden, self.G_hidden, self.h_hidden, self.f_scale,
            GammaParam.from_value(self.gamma_init, self.gamma_mode), self.x0,
            self.seed if seed is None else seed,
        )


@dataclass
class ProbeConfig:
    magnitudes: list[float] = field(default_factory=lambda: [float(v) for v in range(2, 11)])
    dt: float = 0.01
    steps: int = 10000
    divergence_bound: float = 1e6


@dataclass
class AuditConfig:
    n_samples: int = 10000
    box: float = 5.0


@dataclass
class RunConfig:
    benchmark: str = "bistable"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "probe": ProbeConfig, "audit": AuditConfig}
BENCHMARKS = ("bistable", "glucose")


# -- parsing ----------------------------------------------------------------------


def _line(node) -> int:
    return node.start_mark.line + 1


# YAML 1.1 reads "1.0e6" and "3e-4" as strings
_EXP_NUMBER = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+")


def _coerce(value, default, key: str, line: int, source: str):
    """Check ``value`` against the type of the dataclass default."""
    if isinstance(value, str) and _EXP_NUMBER.fullmatch(value) and isinstance(default, float):
        value = float(value)

    def bad(kind):
        return ConfigError(f"{key}: expected {kind}, got {value!r}", line, source)

    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad("a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise bad("a string")
        return value
    return value


def _number_list(value, depth: int, key: str, line: int, source: str):
    if value is None:
        return None
    if not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list", line, source)
    if depth == 1:
        out = []
        for v in value:
            if isinstance(v, str) and _EXP_NUMBER.fullmatch(v):
                v = float(v)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{key}: expected numbers, got {v!r}", line, source)
            out.append(v)
        return out
    return [_number_list(v, depth - 1, key, line, source) for v in value]


_LIST_FIELDS = {
    ("model", "f_hidden"): (1, int), ("model", "G_hidden"): (1, int), ("model", "h_hidden"): (1, int),
    ("model", "lyapunov_centers"): (2, float), ("model", "x0"): (1, float),
    ("train", "hj_means"): (2, float), ("probe", "magnitudes"): (1, float),
}
_OPTIONAL = {("train", "clip_bound"): float}


def _section(name: str, cls, node, source: str):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"section {name!r} must be a mapping", _line(node), source)
    defaults = cls()
    kwargs = {}
    known = {f.name for f in fields(cls)}
    for key_node, val_node in node.value:
        key, line = key_node.value, _line(key_node)
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}", line, source)
        if key in kwargs:
            raise ConfigError(f"duplicate key {name}.{key}", line, source)
        value = yaml.safe_load(yaml.serialize(val_node))
        full = f"{name}.{key}"
        if (name, key) in _LIST_FIELDS:
            depth, kind = _LIST_FIELDS[(name, key)]
            value = _number_list(value, depth, full, line, source)
            if value is not None:
                if kind is int:
                    if any(isinstance(v, float) for v in value):
                        raise ConfigError(f"{full}: expected integers", line, source)
                else:
                    value = json.loads(json.dumps(value), parse_int=float)
        elif (name, key) in _OPTIONAL:
            value = None if value is None else _coerce(value, 0.0, full, line, source)
        else:
            value = _coerce(value, getattr(defaults, key), full, line, source)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"section {name!r}: {exc}", _line(node), source) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if root is None:
        return RunConfig()
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("top level must be a mapping", _line(root), source)
    out = {}
    for key_node, val_node in root.value:
        key, line = key_node.value, _line(key_node)
        if key in out:
            raise ConfigError(f"duplicate key {key}", line, source)
        if key == "benchmark":
            if not isinstance(val_node, yaml.ScalarNode) or val_node.value not in BENCHMARKS:
                raise ConfigError(f"benchmark must be one of {BENCHMARKS}", line, source)
            out[key] = val_node.value
        elif key in SECTIONS:
            out[key] = _section(key, SECTIONS[key], val_node, source)
        else:
            raise ConfigError(f"unknown section {key!r}", line, source)
    cfg = RunConfig(**out)
    m = cfg.model
    if m.n < 1:
        raise ConfigError("model.n must be >= 1", None, source)
    if m.lyapunov_centers is not None and any(len(c) != m.n for c in m.lyapunov_centers):
        raise ConfigError("model.lyapunov_centers entries must have length model.n", None, source)
    if m.x0 is not None and len(m.x0) != m.n:
        raise ConfigError("model.x0 must have length model.n", None, source)
    if cfg.train.hj_means is not None and any(len(c) != m.n for c in cfg.train.hj_means):
        raise ConfigError("train.hj_means entries must have length model.n", None, source)
    if m.gamma_mode not in ("fixed", "trainable"):
        raise ConfigError("model.gamma_mode must be 'fixed' or 'trainable'", None, source)
    if not m.gamma_init > 1e-3:
        raise ConfigError("model.gamma_init must exceed 1e-3", None, source)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def preset_path(name: str) -> Path:
    """Path of a bundled preset such as ``bistable_fgh_plus``."""
    p = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not p.exists():
        raise FileNotFoundError(f"no bundled config named {name!r}")
    return p
