"""Sectioned key = value run configuration.

An absent file or omitted key falls back to the defaults below, which
reproduce the reference training setup (window size 5, hidden width 128,
batch 128 for 200 epochs, Adam at 1e-3, concrete temperature 0.5, mixup
concentration 10 halving every 10 epochs). Unknown sections or keys are
rejected for typo safety. Command-line flags override file values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict[str, dict] = {
    "data": {
        "n_scenes": 200,
        "n_agents_min": 4,
        "n_agents_max": 8,
        "n_categories": 3,
        "t_history": 5,
        "t_future": 10,
        "edge_prob": 0.35,
        "dt": 0.2,
        "init_box": 1.0,
        "init_vel": 0.6,
        "coupling": "",      # optional C*C comma-separated row-major floats
        "damping": "",       # optional C comma-separated floats
        "split_train": 0.65,
        "split_val": 0.10,
        "split_test": 0.25,
        "seed": 0,
    },
    "model": {
        "tau": 5,
        "hidden_dim": 128,
        "edge_dim": 128,
        "attn_dim": 128,
        "gru_layers": 2,
        "temperature": 0.5,
        "homogeneous": False,
        "edge_noise_scale": 1.0,
        "step_noise": True,
    },
    "train": {
        "epochs": 200,
        "batch_size": 128,
        "learning_rate": 1e-3,
        "gamma": 0.0,
        "penalty": "entropy",
        "strategy": "plain",
        "alpha_init": 10.0,
        "alpha_decay_interval": 10,
        "alpha_decay_factor": 0.5,
        "alpha_floor": 0.1,
        "seed": 0,
        "val_samples": 3,
    },
    "eval": {
        "samples": 20,
        "threads": 0,        # 0: use available cores
        "split": "test",
        "seed": 0,
    },
}


@dataclass
class RunConfig:
    sections: dict[str, dict] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def get(self, section: str, key: str):
        return self.sections[section][key]


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: expected an integer, "
                              f"got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: expected a number, "
                              f"got {raw!r}") from e
    return raw


def load_config(path: str | Path | None = None,
                overrides: dict[tuple[str, str], object] | None = None
                ) -> RunConfig:
    """Read a config file (optional) over the defaults, then apply overrides.

    `overrides` maps (section, key) to already-typed values, typically
    from command-line flags; flags win over the file.
    """
    sections = {name: dict(values) for name, values in DEFAULTS.items()}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
        for section in parser.sections():
            if section not in sections:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in sections[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in "
                                      f"[{section}]")
                sections[section][key] = _coerce(section, key, raw)
    for (section, key), value in (overrides or {}).items():
        if section not in sections or key not in sections[section]:
            raise ConfigError(f"unknown override [{section}] {key}")
        if value is not None:
            sections[section][key] = value
    return RunConfig(sections)


def parse_float_list(raw: str, expected: int, what: str) -> list[float] | None:
    """Comma-separated float list from a config string; empty means default."""
    raw = raw.strip()
    if not raw:
        return None
    try:
        values = [float(v) for v in raw.split(",")]
    except ValueError as e:
        raise ConfigError(f"{what}: expected comma-separated floats") from e
    if len(values) != expected:
        raise ConfigError(f"{what}: expected {expected} values, got {len(values)}")
    return values
