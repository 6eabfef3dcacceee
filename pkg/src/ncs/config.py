"""Run configuration: a flat INI-style key-value file with sections.

Unknown sections or keys are hard errors so misspellings cannot silently fall
back to defaults. Defaults follow the reference setup: patch radius 0.04 of the
max extent, forbid probability 0.5, base learning rate 1e-4, 100K warm-up.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import ArchConfig
from .training import TrainSchedule

_SCHEMA: dict[str, dict[str, str]] = {
    "mesh": {"path": ""},
    "patches": {"radius": "0.04", "forbid": "0.5", "seed": "0"},
    "arch": {
        "coarse": "128,64,64",
        "code": "8x4x4",
        "channels": "8",
        "blocks": "5",
        "fine": "16,16",
        "mode": "vector",
    },
    "train": {
        "base_lr": "1e-4",
        "coarse_floor_lr": "1e-6",
        "warmup": "100000",
        "total": "800000",
        "batch": "2048",
        "seed": "0",
        "log_every": "100",
        "checkpoint_every": "10000",
    },
    "output": {"dir": "ncs_out"},
}


@dataclass
class RunConfig:
    mesh_path: str
    radius_frac: float
    forbid_prob: float
    patch_seed: int
    arch: ArchConfig
    schedule: TrainSchedule
    batch_size: int
    fit_seed: int
    log_every: int
    checkpoint_every: int
    out_dir: str
    raw_text: str


def _int_tuple(text: str, sep: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.replace(" ", "").split(sep) if p != "")
    except ValueError:
        raise ConfigError(f"expected {sep!r}-separated integers, got {text!r}") from None


def parse_config_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None

    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")

    def get(section: str, key: str) -> str:
        if cp.has_option(section, key):
            return cp.get(section, key).strip()
        return _SCHEMA[section][key]

    mesh_path = get("mesh", "path")
    if not mesh_path:
        raise ConfigError("config needs [mesh] path")

    def num(section, key, cast):
        raw = get(section, key)
        try:
            return cast(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None

    code = _int_tuple(get("arch", "code"), "x")
    if len(code) != 3:
        raise ConfigError(f"[arch] code must be DxHxW, got {get('arch', 'code')!r}")
    try:
        arch = ArchConfig(
            coarse_widths=_int_tuple(get("arch", "coarse"), ","),
            code_shape=code,
            cnn_channels=num("arch", "channels", int),
            cnn_blocks=num("arch", "blocks", int),
            fine_widths=_int_tuple(get("arch", "fine"), ","),
            mode=get("arch", "mode"),
        )
        schedule = TrainSchedule(
            warmup_iters=num("train", "warmup", int),
            total_iters=num("train", "total", int),
            base_lr=num("train", "base_lr", float),
            coarse_floor_lr=num("train", "coarse_floor_lr", float),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None

    return RunConfig(
        mesh_path=mesh_path,
        radius_frac=num("patches", "radius", float),
        forbid_prob=num("patches", "forbid", float),
        patch_seed=num("patches", "seed", int),
        arch=arch,
        schedule=schedule,
        batch_size=num("train", "batch", int),
        fit_seed=num("train", "seed", int),
        log_every=num("train", "log_every", int),
        checkpoint_every=num("train", "checkpoint_every", int),
        out_dir=get("output", "dir"),
        raw_text=text,
    )


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text(encoding="utf-8"))
