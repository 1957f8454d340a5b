"""
Run Configuration Files
Flat ``key = value`` documents layered over the environment profile defaults
"""

import io
import logging
from dataclasses import fields
from pathlib import Path
from typing import Dict, Optional, Union

from dotenv.parser import parse_stream

from src.errors import ConfigError
from src.gpc import GpcConfig

logger = logging.getLogger(__name__)

RESOLVED_NAME = 'resolved_config.env'

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def _coerce(key: str, raw: str, kind, line: Optional[int]):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered not in _TRUE + _FALSE:
                raise ValueError(raw)
            return lowered in _TRUE
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot read '{raw}' as {kind.__name__}", line) from None


def parse_config_text(text: str) -> Dict[str, tuple]:
    """
    Parse a run-config document

    Args:
        text: ``key = value`` lines; '#' starts a comment

    Returns:
        Mapping key -> (raw value, line number)

    Raises:
        ConfigError: on malformed lines, duplicate or unknown keys
    """
    known = set(GpcConfig.keys())
    entries = {}
    for binding in parse_stream(io.StringIO(text)):
        # a binding's text starts with any blank lines that precede it
        raw = binding.original.string
        line = binding.original.line + raw[:len(raw) - len(raw.lstrip())].count('\n')
        if binding.error:
            raise ConfigError(f"malformed entry '{binding.original.string.strip()}'", line)
        if binding.key is None:
            continue
        key = binding.key.strip()
        if key not in known:
            raise ConfigError(f"unknown key '{key}'", line)
        if key in entries:
            raise ConfigError(f"duplicate key '{key}' (first set on line {entries[key][1]})", line)
        if binding.value is None:
            raise ConfigError(f"{key}: missing value", line)
        entries[key] = (binding.value, line)
    return entries


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> GpcConfig:
    """
    Build a GpcConfig from profile defaults, an optional file and overrides

    Args:
        path: Run-config file (None for defaults only)
        **overrides: Values that win over the file (e.g. a --seed flag)

    Returns:
        Validated GpcConfig
    """
    entries = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        entries = parse_config_text(path.read_text(encoding='utf-8'))

    types = {f.name: f.type for f in fields(GpcConfig)}
    values = {}
    for key, (raw, line) in entries.items():
        kind = types[key]
        values[key] = _coerce(key, raw, kind, line)
    values.update({k: v for k, v in overrides.items() if v is not None})

    env = values.pop('env', GpcConfig.env)
    try:
        cfg = GpcConfig.for_env(env, **values)
    except ConfigError as exc:
        key = str(exc).split(':', 1)[0]
        if key in entries and exc.line is None:
            raise ConfigError(str(exc), entries[key][1]) from None
        raise
    logger.debug("resolved config: %s", cfg.as_dict())
    return cfg


def format_config(cfg: GpcConfig) -> str:
    """Every key with the value actually used, one per line"""
    lines = [f"# resolved run configuration for {cfg.env}"]
    for key, value in cfg.as_dict().items():
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    return '\n'.join(lines) + '\n'


def write_resolved(cfg: GpcConfig, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / RESOLVED_NAME
    path.write_text(format_config(cfg), encoding='utf-8')
    return path
