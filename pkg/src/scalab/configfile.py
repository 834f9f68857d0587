"""Flat ``section.key = value`` config text.

Sections are ``sca`` (attention block), ``model`` and ``train``.  Lines
starting with ``#`` are comments.  Unknown and duplicate keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing

from .attention import SCAConfig


class ConfigFileError(ValueError):
    pass


def _classes():
    from .model import ModelConfig
    from .train import TrainConfig

    return {"sca": SCAConfig, "model": ModelConfig, "train": TrainConfig}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, hint, key: str):
    text = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {text!r} as {hint.__name__}") from None
    return text


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in pairs:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def parse_config(text: str, allow_extra: tuple[str, ...] = (), base=None):
    """Returns ``(ModelConfig, TrainConfig or None, extra)``.

    ``base`` is an optional ``(ModelConfig, TrainConfig)`` whose values are
    overridden by the keys in ``text``.
    """
    classes = _classes()
    pairs = parse_pairs(text)
    values: dict[str, dict] = {s: {} for s in classes}
    extra = {}
    for key, raw in pairs.items():
        if any(key.startswith(p) for p in allow_extra):
            extra[key] = raw
            continue
        section, _, name = key.partition(".")
        cls = classes.get(section)
        if cls is None:
            raise ConfigFileError(f"unknown key {key!r}")
        hints = typing.get_type_hints(cls)
        if name not in hints or name == "sca":
            raise ConfigFileError(f"unknown key {key!r}")
        values[section][name] = _convert(raw, hints[name], key)

    base_model, base_train = base if base is not None else (None, None)
    try:
        sca_base = base_model.sca if base_model is not None else SCAConfig()
        sca = dataclasses.replace(sca_base, **values["sca"])
        model_base = base_model if base_model is not None else classes["model"]()
        model = dataclasses.replace(model_base, sca=sca, **values["model"])
        train = None
        if values["train"] or base_train is not None:
            train_base = base_train if base_train is not None else classes["train"]()
            train = dataclasses.replace(train_base, **values["train"])
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from exc
    return model, train, extra


def dump_config(model, train=None, extra: dict | None = None) -> str:
    lines = []
    for f in dataclasses.fields(model.sca):
        lines.append(f"sca.{f.name} = {_format(getattr(model.sca, f.name))}")
    for f in dataclasses.fields(model):
        if f.name != "sca":
            lines.append(f"model.{f.name} = {_format(getattr(model, f.name))}")
    if train is not None:
        for f in dataclasses.fields(train):
            lines.append(f"train.{f.name} = {_format(getattr(train, f.name))}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def load_config_file(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)
