"""INI experiment configs mapped onto :class:`TrainConfig`."""

from __future__ import annotations

import configparser
from dataclasses import asdict, fields
from pathlib import Path

from .metaloop import ConfigError, TrainConfig

SECTIONS: dict[str, tuple[str, ...]] = {
    "experiment": ("family", "variant", "seed", "n_train_tasks", "n_test_tasks", "tabular_tasks"),
    "schedule": ("adapt_episodes", "episode_length", "env_step_budget", "train_steps", "batch_size",
                 "context_len", "buffer_capacity", "eval_interval", "checkpoint_interval", "eval_seeds"),
    "objective": ("lam", "beta", "gamma", "alpha", "tau", "lr", "reward_scale", "twin_q"),
    "networks": ("z_dim", "encoder_hidden", "predictor_hidden", "agent_hidden"),
}

_TYPES = {f.name: type(f.default) for f in fields(TrainConfig)}
assert sorted(k for keys in SECTIONS.values() for k in keys) == sorted(_TYPES)


def _convert(section: str, key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw.replace("_", ""))
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<string>") -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    values, errors = {}, []
    for section in parser.sections():
        if section not in SECTIONS:
            errors.append(f"[{section}]: unknown section (expected one of {', '.join(SECTIONS)})")
            continue
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                errors.append(f"[{section}] {key}: unknown key")
                continue
            try:
                values[key] = _convert(section, key, raw)
            except ConfigError as e:
                errors.append(str(e))
    if errors:
        raise ConfigError("; ".join(errors))
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    return parse_config_text(text, str(path))


def render_config(cfg: TrainConfig) -> str:
    values = asdict(cfg)
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for k in keys:
            v = values[k]
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)
