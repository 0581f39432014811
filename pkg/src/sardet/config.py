"""INI configuration files with one section per component.

Values are coerced using the annotations of the dataclass they feed.  The
effective setting for a key is the command-line flag if given, else the
file, else the dataclass default.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import MISSING, fields
from typing import Any

from .synth import SynthConfig
from .tensor.core import ConfigError
from .trainer import TrainConfig

# which INI section each TrainConfig option lives in
TRAIN_SECTIONS: dict[str, tuple[str, ...]] = {
    "backbone": ("backbone", "chip_size"),
    "pipeline": ("normalization", "s_norm", "arctan_scale", "heatmap_sigma", "augment",
                 "mask_size", "mask_ratio", "val_stride", "val_crop"),
    "scheduler": ("scheduler", "alpha", "d_eps"),
    "loss": ("loss_alpha", "loss_beta"),
    "trainer": ("phase", "epochs", "iters_per_epoch", "batch_size", "lr_peak", "warmup_epochs", "seed",
                "patience", "val_chips", "from_scratch", "init_checkpoint", "threads"),
    "decoder": ("conf", "d_nms"),
    "metrics": ("d_hit",),
}
_TRAIN_KEY_SECTION = {k: s for s, keys in TRAIN_SECTIONS.items() for k in keys}


def _coerce(annotation: str, raw: str, key: str) -> Any:
    text = raw.strip()
    if "None" in annotation and text.lower() in ("", "none"):
        return None
    try:
        if annotation.startswith("tuple"):
            conv = float if "float" in annotation else int
            return tuple(conv(p) for p in text.replace("(", "").replace(")", "").split(",") if p.strip())
        if "bool" in annotation:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation.startswith("int"):
            return int(text)
        if annotation.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {annotation}") from None
    return text


def _annotations(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(cls)}


def read_ini(path: str | os.PathLike) -> configparser.ConfigParser:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    return cp


def train_overrides(cp: configparser.ConfigParser | None) -> dict[str, Any]:
    """TrainConfig options set in the file, coerced to their types."""
    if cp is None:
        return {}
    ann = _annotations(TrainConfig)
    out = {}
    for section in cp.sections():
        if section == "synth":
            continue
        if section not in TRAIN_SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in TRAIN_SECTIONS[section]:
                where = _TRAIN_KEY_SECTION.get(key)
                hint = f" (belongs in [{where}])" if where else ""
                raise ConfigError(f"unknown key {key!r} in [{section}]{hint}")
            out[key] = _coerce(ann[key], raw, key)
    return out


def synth_overrides(cp: configparser.ConfigParser | None) -> dict[str, Any]:
    if cp is None or not cp.has_section("synth"):
        return {}
    ann = _annotations(SynthConfig)
    out = {}
    for key, raw in cp.items("synth"):
        if key not in ann:
            raise ConfigError(f"unknown key {key!r} in [synth]")
        out[key] = _coerce(ann[key], raw, key)
    return out


def resolve(cls, file_values: dict[str, Any], cli_values: dict[str, Any], **fixed):
    """Build ``cls`` with precedence CLI > file > default.  ``None`` CLI values mean 'not given'."""
    merged = {}
    for f in fields(cls):
        if f.name in cli_values and cli_values[f.name] is not None:
            merged[f.name] = cli_values[f.name]
        elif f.name in file_values:
            merged[f.name] = file_values[f.name]
    merged.update(fixed)
    return cls(**merged)


def default_of(cls, name: str):
    for f in fields(cls):
        if f.name == name:
            return None if f.default is MISSING else f.default
    raise KeyError(name)


def write_ini(path: str | os.PathLike, cfg: TrainConfig, synth: SynthConfig | None = None) -> None:
    """Serialise a resolved configuration in the same sectioned layout."""
    cp = configparser.ConfigParser(interpolation=None)
    d = cfg.to_dict()
    for section, keys in TRAIN_SECTIONS.items():
        cp[section] = {k: "none" if d.get(k) is None else str(d[k]) for k in keys if k in d}
    if synth is not None:
        cp["synth"] = {f.name: ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
                       for f in fields(SynthConfig) for v in [getattr(synth, f.name)]}
    with open(path, "w") as fh:
        cp.write(fh)
