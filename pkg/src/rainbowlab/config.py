"""Sectioned key = value run configuration.

The format is deliberately tiny: `[section]` headers, `key = value`
lines, `#` comments, nothing else. Unknown sections or keys are
rejected, and every key below is required.
"""

from __future__ import annotations

from dataclasses import dataclass


class ConfigError(ValueError):
    pass


# section -> key -> (type, validator, description)
SCHEMA = {
    "scenario": {
        "tasks": (int, lambda v: v >= 2, ">= 2"),
        "classes_per_task": (int, lambda v: v >= 2, ">= 2"),
        "samples_per_class": (int, lambda v: v >= 5, ">= 5"),
        "separation": (float, lambda v: v >= 0, ">= 0"),
        "seed": (int, lambda v: v >= 0, ">= 0"),
    },
    "model": {
        "layers": (int, lambda v: v >= 1, ">= 1"),
        "dim": (int, lambda v: v >= 2, ">= 2"),
        "heads": (int, lambda v: v >= 1, ">= 1"),
        "patches": (int, lambda v: v >= 1, ">= 1"),
        "prompt_length": (int, lambda v: v >= 2 and v % 2 == 0, "even and >= 2"),
        "proj_dim": (int, lambda v: v >= 1, ">= 1"),
        "align_dim": (int, lambda v: v >= 1, ">= 1"),
    },
    "loss": {
        "lambda_sparse": (float, lambda v: v >= 0, ">= 0"),
        "lambda_match": (float, lambda v: v >= 0, ">= 0"),
        "learning_rate": (float, lambda v: v > 0, "> 0"),
        "epochs_per_task": (int, lambda v: v >= 1, ">= 1"),
        "batch_size": (int, lambda v: v >= 1, ">= 1"),
    },
    "gate": {
        "temperature": (float, lambda v: v > 0, "> 0"),
        "soft_phase_fraction": (float, lambda v: 0 <= v <= 1, "in [0, 1]"),
    },
    "run": {
        "strategy": (str, lambda v: v in ("rainbow", "fixed_weighted_sum", "frozen_specific"),
                     "one of rainbow/fixed_weighted_sum/frozen_specific"),
        "output_dir": (str, lambda v: len(v) > 0, "non-empty"),
    },
}


@dataclass
class RunConfig:
    values: dict  # {section: {key: parsed value}}

    def __getitem__(self, section):
        return self.values[section]


def parse_config_text(text: str) -> RunConfig:
    raw = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            raw.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in section [{section}]")
        if key in raw[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[section][key] = value

    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (typ, check, desc) in keys.items():
            if section not in raw or key not in raw[section]:
                raise ConfigError(f"missing required key {key!r} in section [{section}]")
            text_value = raw[section][key]
            try:
                parsed = typ(text_value)
            except ValueError:
                raise ConfigError(
                    f"key {key!r} in [{section}]: cannot parse {text_value!r} as {typ.__name__}"
                ) from None
            if not check(parsed):
                raise ConfigError(f"key {key!r} in [{section}]: must be {desc}, got {parsed}")
            values[section][key] = parsed
    if values["model"]["dim"] % values["model"]["heads"] != 0:
        raise ConfigError("model dim must be divisible by heads")
    if values["model"]["proj_dim"] >= values["model"]["dim"]:
        raise ConfigError("proj_dim must be smaller than dim")
    if values["model"]["align_dim"] >= values["model"]["dim"]:
        raise ConfigError("align_dim must be smaller than dim")
    return RunConfig(values)


def parse_config_file(path: str) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text)


DEFAULT_CONFIG = """\
[scenario]
tasks = 5
classes_per_task = 2
samples_per_class = 40
separation = 3.0
seed = 7

[model]
layers = 5
dim = 32
heads = 4
patches = 16
prompt_length = 20
proj_dim = 16
align_dim = 8

[loss]
lambda_sparse = 0.01
lambda_match = 0.01
learning_rate = 0.03
epochs_per_task = 30
batch_size = 32

[gate]
temperature = 1.0
soft_phase_fraction = 0.6

[run]
strategy = rainbow
output_dir = runs/demo
"""
