"""Run configuration: one nested document drives every CLI stage.

Unknown keys are rejected anywhere in the tree, and every nested
config's invariants are validated up front, before any stage runs.
The canonical hash of the whole document is stamped into each artifact
so later stages can refuse mismatched inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError
from .train import TrainConfig


@dataclass
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        total = self.train + self.val + self.test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {total}")

    def ratios(self) -> tuple[float, float, float]:
        return (self.train, self.val, self.test)


@dataclass
class CorpusSpec:
    input: str = ""
    format: str = "jsonl"
    strict: bool = False
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if self.format not in ("jsonl", "csv"):
            raise ValueError(f"format must be jsonl or csv, got {self.format!r}")


@dataclass
class AugmentSpec:
    synonyms_path: str | None = None  # None uses the bundled lexicon
    synonym_rate: float = 0.15
    synonym_copies: int = 0
    back_translation: bool = False
    pivot_path: str | None = None  # None uses the bundled pivot dictionary
    balance: bool = False

    def __post_init__(self):
        if not 0.0 <= self.synonym_rate <= 1.0:
            raise ValueError("synonym_rate must be in [0, 1]")
        if self.synonym_copies < 0:
            raise ValueError("synonym_copies must be >= 0")


@dataclass
class TokenizerSpec:
    vocab_size: int = 1024


@dataclass
class ArchSpec:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 128

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class StageSpec:
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class PromptsSpec:
    k: int = 2

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")


@dataclass
class EvalSpec:
    name: str = "run"
    threshold: float = 0.0
    match_rule: str = "exact_id"
    token_f1_threshold: float = 0.8
    max_length: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)
    encoder: StageSpec = field(default_factory=StageSpec)
    decoder: StageSpec = field(default_factory=StageSpec)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    prompts: PromptsSpec = field(default_factory=PromptsSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown config key(s) {unknown} at {where}")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        hint = hints.get(name)
        value = data[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        where = path or "top level"
        raise ConfigError(f"invalid value at {where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def apply_override(data: dict, dotted_key: str, raw_value: str) -> None:
    """Set ``a.b.c=value`` in a raw config dict; values parse as JSON
    first and fall back to plain strings."""
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    keys = dotted_key.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override through non-object key {key!r}")
    node[keys[-1]] = value
