"""Run configuration: dataclass defaults, flat key=value files, CLI merge.

Precedence is CLI flag > config file > dataclass default. The file
format is one "key = value" per line with '#' comments; every field
round-trips losslessly through format/parse.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ArgumentError


@dataclass
class RunConfig:
    # Corpus and artifacts
    train_src: str = ""
    train_tgt: str = ""
    dev_src: str = ""
    dev_tgt: str = ""
    data_dir: str = ""          # preprocessed artifacts (merges, vocabs)
    out_dir: str = "run"
    # Preprocessing
    bpe_ops: int = 8000
    joint_bpe: bool = False
    max_vocab: int = 0          # 0 = unlimited
    # Model (paper-scale defaults; desk runs override)
    d: int = 512
    d_h: int = 512
    d_j: int = 512
    layers: int = 2
    dropout_p: float = 0.3
    max_len: int = 50
    variant: str = "joint"
    bidirectional: bool = False
    # Training
    epochs: int = 10
    batch_size: int = 64
    sample_rate: float = 1.0
    lr: float = 0.001
    seed: int = 1


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def _parse_value(name: str, text: str, target_type):
    text = text.strip()
    if target_type is bool:
        if text.lower() not in _BOOL_WORDS:
            raise ArgumentError(f"config field {name}: bad boolean {text!r}")
        return _BOOL_WORDS[text.lower()]
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    return text


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig() if base is None else base
    types = {f.name: f.type for f in fields(RunConfig)}
    py_types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values = asdict(cfg)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ArgumentError(f"config line {lineno}: unknown field {key!r}")
        values[key] = _parse_value(key, value, py_types[key])
    return RunConfig(**values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), base)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply non-None override values (CLI flags) on top of a config."""
    values = asdict(cfg)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in values:
            raise ArgumentError(f"unknown config field {key!r}")
        values[key] = value
    return RunConfig(**values)
