"""Run configuration: typed `key = value` files, --set overrides, and
backbone-dependent toggle resolution."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

BACKBONES = ("vbpr", "vlightgcn", "lattice", "vlattice")
STAGE2_MODES = ("batch", "epoch")


@dataclass
class RunConfig:
    # model
    embedding_dim: int = 64
    gcn_layers: int = 2
    knn_topk: int = 10
    backbone: str = "vlattice"
    # loss coefficients
    alpha: float = 1.0
    beta: float = 0.5
    sigma_sq_fib: float = 0.25
    sigma_sq_gib: float = 0.25
    tau: float = 0.2
    lambda_reg: float = 1e-4
    hsic_normalize_inputs: bool = True
    mask_temperature: float = 0.5
    # toggles
    fib_enabled: bool = True
    gib_enabled: bool = True
    stage2_enabled: bool = True
    stage2_mode: str = "batch"
    graph_rebuild: bool = False
    # optimization
    learning_rate: float = 0.0005
    batch_size: int = 1024
    max_epochs: int = 200
    early_stop_patience: int = 10
    seed: int = 1
    # evaluation
    eval_topk: tuple[int, ...] = (10, 20)

    def validate(self) -> None:
        if self.embedding_dim <= 0:
            raise ConfigError("embedding_dim must be positive")
        if self.gcn_layers < 1:
            raise ConfigError("gcn_layers must be >= 1")
        if self.knn_topk < 1:
            raise ConfigError("knn_topk must be >= 1")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, "
                              f"got {self.backbone!r}")
        if self.stage2_mode not in STAGE2_MODES:
            raise ConfigError(f"stage2_mode must be one of {STAGE2_MODES}")
        for name in ("alpha", "beta", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("sigma_sq_fib", "sigma_sq_gib", "tau", "mask_temperature",
                     "learning_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("batch_size", "max_epochs", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.eval_topk or any(n < 1 for n in self.eval_topk):
            raise ConfigError("eval_topk needs at least one positive cutoff")

    def resolved(self) -> "RunConfig":
        """Apply backbone constraints and validate.

        Representation-only backbones have no item-item graph, so graph
        masking is meaningless there; the structure-only backbone carries
        no multimedia representation, so feature-level terms are dropped.
        """
        self.validate()
        cfg = dataclasses.replace(self)
        if cfg.backbone in ("vbpr", "vlightgcn"):
            cfg.gib_enabled = False
        if cfg.backbone == "lattice":
            cfg.fib_enabled = False
            cfg.stage2_enabled = False
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    target = _FIELDS[key].type
    raw = raw.strip()
    try:
        if target == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if target == "int":
            return int(raw)
        if target == "float":
            return float(raw)
        if target == "str":
            return raw
        if target.startswith("tuple"):
            return tuple(int(v) for v in raw.split(",") if v)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}")
    raise ConfigError(f"config key {key!r} has unsupported type")


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply `key=value` strings on top of a config."""
    updates = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        updates[key] = _parse_value(key, raw)
    return dataclasses.replace(cfg, **updates)


def loads_config(text: str, overrides=(), source: str = "<config>") -> RunConfig:
    """Parse `key = value` config text and apply overrides."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, val)
    cfg = RunConfig(**values)
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a `key = value` config file (optional) and apply overrides."""
    if path is None:
        return loads_config("", overrides)
    return loads_config(Path(path).read_text(encoding="utf-8"), overrides,
                        source=str(path))
