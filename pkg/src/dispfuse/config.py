"""Versioned JSON run configuration and the shipped presets."""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from importlib import resources

from .energy import ConfigurationError, EnergyConfig
from .nets import NetConfig, NetConfigError
from .synthbench import AblationConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1
PRESETS = ("garden", "kitti", "desk")


class SchemaError(ConfigurationError):
    """Config document violates the schema; ``field_path`` names the culprit."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    precision: str = "f32"
    scenes: dict = field(default_factory=lambda: {"count": 20, "height": 64, "width": 96, "layers": 3})

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        energy, net = t.pop("energy"), t.pop("net")
        return {
            "schema_version": SCHEMA_VERSION,
            "precision": self.precision,
            "train": t,
            "energy": energy,
            "net": net,
            "ablation": dataclasses.asdict(self.ablation),
            "scenes": dict(self.scenes),
        }


_SCENE_KEYS = {"count": int, "height": int, "width": int, "layers": int}


def _check_value(path: str, value, annotation):
    """Loose type check of one JSON value against a dataclass annotation string."""
    ann = str(annotation)
    is_num = isinstance(value, (int, float)) and not isinstance(value, bool)
    if ann == "bool":
        ok = isinstance(value, bool)
    elif ann == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif ann == "float":
        ok = is_num or (
            isinstance(value, list) and len(value) == 2 and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        )
    elif ann == "str":
        ok = isinstance(value, str)
    elif ann in ("tuple", "list"):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise SchemaError(path, f"expected {ann}, got {json.dumps(value)}")


def _build(cls, section: str, doc: dict, ramped=()):
    if not isinstance(doc, dict):
        raise SchemaError(section, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in doc.items():
        if key not in fields:
            raise SchemaError(f"{section}.{key}", "unknown key")
        ann = fields[key].type
        if ann == "float" and key not in ramped and isinstance(value, list):
            raise SchemaError(f"{section}.{key}", "this parameter cannot be ramped")
        _check_value(f"{section}.{key}", value, ann)
    try:
        return cls(**doc)
    except (ConfigurationError, NetConfigError, ValueError, TypeError) as exc:
        raise SchemaError(section, str(exc)) from exc


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise SchemaError("<root>", "expected a JSON object")
    allowed = {"schema_version", "precision", "train", "energy", "net", "ablation", "scenes"}
    for key in doc:
        if key not in allowed:
            raise SchemaError(key, "unknown key")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError("schema_version", f"expected {SCHEMA_VERSION}, got {json.dumps(version)}")
    precision = doc.get("precision", "f32")
    if precision not in ("f32", "f64"):
        raise SchemaError("precision", f"expected 'f32' or 'f64', got {json.dumps(precision)}")
    energy = _build(EnergyConfig, "energy", doc.get("energy", {}), ramped=EnergyConfig.RAMPED)
    net = _build(NetConfig, "net", doc.get("net", {}))
    train_doc = dict(doc.get("train", {}))
    for key in ("energy", "net"):
        if key in train_doc:
            raise SchemaError(f"train.{key}", f"unknown key (use the top-level '{key}' section)")
    train = _build(TrainConfig, "train", {**train_doc, "energy": energy, "net": net})
    ablation = _build(AblationConfig, "ablation", doc.get("ablation", {}))
    scenes = {"count": 20, "height": 64, "width": 96, "layers": 3}
    sdoc = doc.get("scenes", {})
    if not isinstance(sdoc, dict):
        raise SchemaError("scenes", "expected an object")
    for key, value in sdoc.items():
        if key not in _SCENE_KEYS:
            raise SchemaError(f"scenes.{key}", "unknown key")
        _check_value(f"scenes.{key}", value, "int")
        scenes[key] = value
    return RunConfig(train=train, ablation=ablation, precision=precision, scenes=scenes)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError("<root>", f"{path} is not valid JSON ({exc})") from exc
    return parse_run_config(doc)


def preset_path(name: str) -> str:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return str(resources.files("dispfuse").joinpath("presets").joinpath(f"{name}.json"))


def load_preset(name: str) -> RunConfig:
    return load_run_config(preset_path(name))


def resolve_config(ref) -> RunConfig:
    """A preset name or a path to a config file."""
    if ref is None:
        return load_preset("desk")
    if isinstance(ref, str) and ref in PRESETS and not os.path.exists(ref):
        return load_preset(ref)
    return load_run_config(ref)
