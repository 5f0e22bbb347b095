"""YAML experiment configuration with dotted-key overrides.

Top-level sections (all optional, defaults shown by ``default_config()``):

``room``        vertices, wall_reflection, speed_of_sound, max_reflection_order
``drone``       sample_rate, period_samples, fundamental_index, num_harmonics,
                amplitude, seed, rotor_square, mic_circle, num_mics
``grid``        resolution, orientations, margin
``train``       subsample, hidden, activation, learning_rate, batch_size, epochs,
                seed, dc_augment, noise_augment, schedule
``attack``      any AttackConfig field
``defense``     noise_std, repeats
``experiment``  bounds (list of [beta, gamma]), noise_levels (fractions of the
                clean signal std), output_dir, dataset, model, seed
"""

from __future__ import annotations

import copy
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from .acoustics import Room
from .attack import AttackConfig
from .drone import DroneConfig, default_drone
from .errors import ConfigError
from .harness import GridSpec, default_room
from .localizer import TrainConfig

MODEL_KEYS = ("subsample", "hidden", "activation")


def default_config() -> dict:
    room = default_room()
    return {
        "room": {
            "vertices": room.vertices.tolist(),
            "wall_reflection": list(map(float, room.wall_reflection)),
            "speed_of_sound": room.speed_of_sound,
            "max_reflection_order": room.max_reflection_order,
        },
        "drone": {
            "sample_rate": 16000, "period_samples": 1600, "fundamental_index": 8,
            "num_harmonics": 6, "amplitude": 0.1, "seed": 0,
            "rotor_square": 0.2, "mic_circle": 0.3, "num_mics": 4,
        },
        "grid": asdict(GridSpec()),
        "train": {
            "subsample": 32, "hidden": [128, 64], "activation": "tanh",
            "learning_rate": 2e-3, "batch_size": 32, "epochs": 200, "seed": 0,
            "dc_augment": 0.5, "noise_augment": 0.0, "schedule": "cosine",
        },
        "attack": {"beta": 1.0, "gamma": 2.0},
        "defense": {"noise_std": 0.0, "repeats": 1},
        "experiment": {
            "bounds": [[0.01, 0.1], [0.5, 1.0], [1.0, 2.0]],
            "noise_levels": [0.0, 0.025, 0.05, 0.1],
            "output_dir": "runs",
            "dataset": None,
            "model": None,
            "seed": 0,
        },
    }


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    for key, val in extra.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and key in ("room", "drone", "grid", "train", "defense", "experiment"):
            if not isinstance(val, dict):
                raise ConfigError(f"section {where}{key} must be a mapping")
            _merge(base[key], val, f"{where}{key}.")
        elif key == "attack":
            if not isinstance(val, dict):
                raise ConfigError("section attack must be a mapping")
            known = {f.name for f in fields(AttackConfig)}
            bad = set(val) - known
            if bad:
                raise ConfigError(f"unknown attack keys: {sorted(bad)}")
            base[key].update(val)
        else:
            base[key] = val
    return base


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value {raw!r}: {exc}") from None
    return key.strip().split("."), value


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            text = Path(path).read_text()
            data = yaml.safe_load(text) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        _merge(cfg, data)
    for item in overrides:
        keys, value = parse_override(item)
        nested = value
        for k in reversed(keys):
            nested = {k: nested}
        _merge(cfg, nested)
    validate(cfg)
    return cfg


def dump_config(cfg: dict, path):
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=False))


def build_room(cfg: dict) -> Room:
    r = cfg["room"]
    try:
        return Room(np.array(r["vertices"], dtype=float), r["wall_reflection"],
                    float(r["speed_of_sound"]), int(r["max_reflection_order"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid room: {exc}") from None


def build_drone(cfg: dict) -> DroneConfig:
    try:
        return default_drone(**cfg["drone"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid drone: {exc}") from None


def build_grid(cfg: dict) -> GridSpec:
    try:
        return GridSpec(**cfg["grid"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid grid: {exc}") from None


def build_train(cfg: dict) -> tuple[dict, TrainConfig]:
    t = dict(cfg["train"])
    arch = {k: t.pop(k) for k in MODEL_KEYS if k in t}
    arch["hidden"] = tuple(arch.get("hidden", (128, 64)))
    try:
        return arch, TrainConfig(**t)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from None


def build_attack(cfg: dict, **extra) -> AttackConfig:
    a = {**cfg["attack"], **extra}
    for key in ("target", "source_location"):
        if a.get(key) is not None:
            a[key] = tuple(float(v) for v in a[key])
    try:
        return AttackConfig(**a)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid attack section: {exc}") from None


def bound_pairs(cfg: dict) -> list[tuple[float, float]]:
    return [(float(b), float(g)) for b, g in cfg["experiment"]["bounds"]]


def validate(cfg: dict):
    """Build every section once so errors surface as ConfigError before any work starts."""
    build_room(cfg)
    build_drone(cfg)
    build_grid(cfg)
    build_train(cfg)
    build_attack(cfg)
    try:
        pairs = bound_pairs(cfg)
        levels = [float(v) for v in cfg["experiment"]["noise_levels"]]
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid experiment section: {exc}") from None
    if any(b < 0 or g < 0 for b, g in pairs):
        raise ConfigError("bound pairs must be nonnegative")
    if any(v < 0 for v in levels):
        raise ConfigError("noise levels must be nonnegative")
    d = cfg["defense"]
    if int(d.get("repeats", 1)) < 1 or float(d.get("noise_std", 0)) < 0:
        raise ConfigError("defense repeats must be >= 1 and noise_std >= 0")


def copy_config(cfg: dict) -> dict:
    return copy.deepcopy(cfg)
