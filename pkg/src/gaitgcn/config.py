"""Run configuration: YAML files, dotted-key overrides, shipped presets,
and the resolved-config echo written next to every artifact."""

from __future__ import annotations

import dataclasses
import os
from importlib import resources

import yaml

from .model import ModelConfig
from .train import TrainConfig

SECTIONS = ("model", "train")


def default_config() -> dict:
    """Every tunable with its default value; n_classes stays unset until
    the training data fixes it."""
    model = ModelConfig(n_classes=2).to_dict()
    model["n_classes"] = None
    train = dataclasses.asdict(TrainConfig())
    train["decay_epochs"] = list(train["decay_epochs"])
    return {"model": model, "train": train}


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ValueError(f"{path}: not valid YAML ({e})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping, "
                         f"got {type(doc).__name__}")
    return doc


def deep_merge(base: dict, override: dict) -> dict:
    """Nested-dict merge; scalars and lists in override replace base."""
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """'section.key=value' -> (path, typed value).

    Values parse as YAML scalars; a comma-separated value becomes a list
    of YAML scalars, so channels=8,16,32 works from the shell.
    """
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ValueError(f"override {text!r} has an empty key")
    if "," in raw:
        value = [yaml.safe_load(part) for part in raw.split(",")]
    else:
        value = yaml.safe_load(raw) if raw.strip() else None
    return key.split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    out = deep_merge(doc, {})
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[path[-1]] = value
    return out


def resolve_config(path: str | None = None, overrides=(),
                   precision: str | None = None) -> dict:
    """Defaults, then the file, then --set overrides, then --precision."""
    doc = default_config()
    if path:
        doc = deep_merge(doc, load_config(path))
    doc = apply_overrides(doc, overrides)
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)} "
                         f"(expected {SECTIONS})")
    if precision is not None:
        doc["model"]["precision"] = precision
    return doc


def build_model_config(doc: dict, n_classes: int | None = None) -> ModelConfig:
    section = dict(doc["model"])
    if n_classes is not None:
        section["n_classes"] = n_classes
    if section.get("n_classes") is None:
        raise ValueError("model.n_classes is unset; it is normally taken "
                         "from the training split")
    return ModelConfig.from_dict(section)


def build_train_config(doc: dict, seed: int | None = None) -> TrainConfig:
    section = dict(doc["train"])
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    if seed is not None:
        section["seed"] = seed
    return TrainConfig(**section)


def dump_config(doc: dict, path: str) -> None:
    """Stable text form: sorted keys, block style."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True, default_flow_style=False)


# -- shipped presets -------------------------------------------------------

def list_presets() -> list[str]:
    names = []
    for entry in resources.files(__package__).joinpath("presets").iterdir():
        if entry.name.endswith(".yaml"):
            names.append(entry.name[:-len(".yaml")])
    return sorted(names)


def find_config(name_or_path: str) -> str:
    """A real file wins; otherwise the name is looked up in the presets."""
    if os.path.exists(name_or_path):
        return name_or_path
    preset = resources.files(__package__).joinpath(
        "presets").joinpath(f"{name_or_path}.yaml")
    if preset.is_file():
        return str(preset)
    raise FileNotFoundError(
        f"config {name_or_path!r} is neither a file nor one of the "
        f"presets {list_presets()}")
