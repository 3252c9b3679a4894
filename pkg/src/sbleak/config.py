"""``key = value`` configuration files for timing and channel parameters."""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, Union

from .engine import MachineConfig
from .machine import TimingModel

CHANNEL_KEYS = {"hit_mean": float, "miss_mean": float, "noise_sigma": float, "probe_stride": int}
TIMING_KEYS = {f.name for f in fields(TimingModel)}


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> Dict[str, Union[int, float]]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        try:
            if key in TIMING_KEYS or CHANNEL_KEYS.get(key) is int:
                out[key] = int(value.strip().replace("_", ""), 0)
            elif key in CHANNEL_KEYS:
                out[key] = float(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value.strip()!r}") from None
    return out


def load_config(path: Union[str, Path]) -> Dict[str, Union[int, float]]:
    return parse_config(Path(path).read_text())


def apply_overrides(config: MachineConfig, values: Dict[str, Union[int, float]]) -> MachineConfig:
    timing = {k: v for k, v in values.items() if k in TIMING_KEYS}
    channel = {("stride" if k == "probe_stride" else k): v
               for k, v in values.items() if k in CHANNEL_KEYS}
    try:
        return replace(config,
                       timing=replace(config.timing, **timing),
                       channel=replace(config.channel, **channel))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
