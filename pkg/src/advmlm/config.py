"""Run configuration: a flat, typed key/value object stored as JSON.

Grammar: a single JSON object whose keys are the :class:`RunConfig` field
names and whose values are JSON scalars (string, number, boolean, null).
Overrides use ``key=value`` with the value parsed as JSON when possible
and taken as a bare string otherwise.  The canonical text is
``json.dumps(..., sort_keys=True, separators=(",", ":"))``; its sha256 is
the fingerprint stored in checkpoints.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .data import AMINO_ACIDS


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class RunConfig:
    # corpus
    corpus_path: Optional[str] = None
    corpus_format: str = "fasta"
    synth_kind: Optional[str] = None
    synth_num_sequences: int = 2000
    synth_min_len: int = 20
    synth_max_len: int = 40
    synth_pattern: str = "rsu"
    synth_order: int = 1
    synth_concentration: float = 0.1
    synth_chain_seed: int = 0
    alphabet: str = AMINO_ACIDS
    max_len: int = 64
    # noiser
    noiser_layers: int = 3
    noiser_embed_dim: int = 128
    noiser_hidden_dim: int = 64
    noiser_bidirectional: bool = True
    # encoder
    encoder_layers: int = 4
    encoder_heads: int = 4
    encoder_model_dim: int = 128
    encoder_ff_dim: int = 512
    encoder_max_seq_len: int = 256
    dropout_rate: float = 0.1
    # masking
    adversarial: bool = True
    rho_adv: float = 0.10
    rho_rand: float = 0.10
    baseline_rate: float = 0.20
    temperature: float = 1.0
    temperature_final: Optional[float] = None
    anneal_steps: int = 0
    exact_budget: bool = True
    # optimisation
    lr: float = 1e-4
    noiser_lr: Optional[float] = None
    weight_decay: float = 1e-2
    # schedule
    n_noiser: int = 10
    n_encoder: int = 10
    warmup_encoder_steps: int = 0
    batch_size: int = 32
    max_steps: int = 1000
    checkpoint_interval: int = 500
    probe_interval: int = 0
    probe_size: int = 64
    early_stop_patience: int = 0
    seed: int = 0
    output_dir: Optional[str] = None

    # Keys that only control run length / IO; excluded from the fingerprint
    # so a run can be resumed with a longer horizon.
    RUNTIME_KEYS = ("max_steps", "checkpoint_interval", "output_dir", "early_stop_patience")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> bytes:
        core = {k: v for k, v in self.to_dict().items() if k not in self.RUNTIME_KEYS}
        text = json.dumps(core, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).digest()

    def replace(self, **changes) -> "RunConfig":
        return from_mapping({**self.to_dict(), **changes})

    @property
    def effective_noiser_lr(self) -> float:
        return self.lr if self.noiser_lr is None else self.noiser_lr


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    optional = kind.startswith("Optional[")
    base = kind[len("Optional[") : -1] if optional else kind
    if value is None:
        if optional:
            return None
        raise ValueError(f"{key} may not be null")
    if base == "bool":
        if isinstance(value, bool):
            return value
        raise ValueError(f"{key} must be a boolean")
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ValueError(f"{key} must be an integer")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{key} must be a number")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ValueError(f"{key} must be a string")
        return value
    raise AssertionError(kind)


def from_mapping(mapping: dict, source: str | None = None, lines: dict[str, int] | None = None) -> RunConfig:
    lines = lines or {}
    values = {}
    for key, value in mapping.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", lines.get(key), source)
        try:
            values[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(str(exc), lines.get(key), source) from None
    cfg = RunConfig(**values)
    try:
        validate(cfg)
    except ConfigError as exc:
        if exc.source is None and source:
            raise ConfigError(exc.args[0], lines.get(getattr(exc, "key", ""), None), source) from None
        raise
    return cfg


class _KeyedError(ConfigError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def validate(cfg: RunConfig, check_paths: bool = False) -> None:
    def fail(key, message):
        raise _KeyedError(key, message)

    if (cfg.corpus_path is None) == (cfg.synth_kind is None):
        fail("corpus_path", "set exactly one of corpus_path or synth_kind")
    if cfg.corpus_format not in ("fasta", "lines"):
        fail("corpus_format", "must be 'fasta' or 'lines'")
    if cfg.synth_kind is not None and cfg.synth_kind not in ("uniform", "markov", "template"):
        fail("synth_kind", "must be one of uniform, markov, template")
    if check_paths and cfg.corpus_path is not None and not Path(cfg.corpus_path).is_file():
        fail("corpus_path", f"corpus file not found: {cfg.corpus_path}")
    for key in ("rho_adv", "rho_rand"):
        v = getattr(cfg, key)
        if not 0.0 <= v < 1.0:
            fail(key, "must lie in [0, 1)")
    if cfg.adversarial and cfg.rho_adv <= 0:
        fail("rho_adv", "must be positive for adversarial runs")
    if cfg.rho_adv + cfg.rho_rand > 0.5:
        fail("rho_adv", "rho_adv + rho_rand must not exceed 0.5")
    if not 0.0 < cfg.baseline_rate < 1.0:
        fail("baseline_rate", "must lie in (0, 1)")
    if cfg.temperature <= 0 or (cfg.temperature_final is not None and cfg.temperature_final <= 0):
        fail("temperature", "temperatures must be positive")
    if not 0.0 <= cfg.dropout_rate < 1.0:
        fail("dropout_rate", "must lie in [0, 1)")
    if cfg.encoder_model_dim % cfg.encoder_heads:
        fail("encoder_heads", "must divide encoder_model_dim")
    if cfg.max_len > cfg.encoder_max_seq_len:
        fail("max_len", "exceeds encoder_max_seq_len")
    if cfg.max_len < 3:
        fail("max_len", "must be at least 3")
    for key in (
        "noiser_layers", "noiser_embed_dim", "noiser_hidden_dim", "encoder_layers", "encoder_heads",
        "encoder_model_dim", "encoder_ff_dim", "n_noiser", "n_encoder", "batch_size", "synth_num_sequences",
        "synth_min_len", "synth_order",
    ):
        if getattr(cfg, key) <= 0:
            fail(key, "must be positive")
    for key in ("max_steps", "checkpoint_interval", "warmup_encoder_steps", "probe_interval", "early_stop_patience", "anneal_steps"):
        if getattr(cfg, key) < 0:
            fail(key, "must be non-negative")
    if cfg.lr <= 0 or (cfg.noiser_lr is not None and cfg.noiser_lr <= 0):
        fail("lr", "learning rates must be positive")
    if cfg.weight_decay < 0:
        fail("weight_decay", "must be non-negative")
    if cfg.synth_max_len < cfg.synth_min_len:
        fail("synth_max_len", "must be >= synth_min_len")


def _key_lines(text: str) -> dict[str, int]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        for m in re.finditer(r'"([A-Za-z_][A-Za-z0-9_]*)"\s*:', line):
            out.setdefault(m.group(1), lineno)
    return out


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value", source="--set")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config(path, overrides=(), check_paths: bool = True) -> RunConfig:
    """Read a JSON config file, apply ``key=value`` overrides and validate.

    Errors carry the file name and line of the offending key.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    try:
        mapping = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno, str(path)) from None
    if not isinstance(mapping, dict):
        raise ConfigError("top level must be an object", 1, str(path))
    for key, value in mapping.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key}: nested values are not allowed", _key_lines(text).get(key), str(path))
    lines = _key_lines(text)
    for item in overrides:
        key, value = parse_override(item)
        mapping[key] = value
        lines[key] = None
    try:
        cfg = from_mapping(mapping, str(path), lines)
        validate(cfg, check_paths=check_paths)
    except _KeyedError as exc:
        raise ConfigError(exc.args[0], lines.get(exc.key), str(path)) from None
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def config_from_text(text: str) -> RunConfig:
    return from_mapping(json.loads(text))


__all__ = ["RunConfig", "ConfigError", "load_config", "save_config", "from_mapping", "validate", "parse_override"]
