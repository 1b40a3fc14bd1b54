"""Flat ``section.key = value`` run-config files.

Values are Python/JSON literals (numbers, ``[..]`` lists, quoted strings)
or the bare words ``true``/``false``. ``#`` starts a comment. Keys map onto
:class:`~facade_rcnn.estimator.FacadeParser` parameters via ``KEYS``.
"""
from __future__ import annotations

import ast
from pathlib import Path
from typing import Any, Dict

KEYS = {
    "model.classes": "n_classes",
    "model.widths": "widths",
    "model.alpha": "alpha",
    "model.detection": "detection",
    "model.seed": "seed",
    "transconv.angles": "transconv_angles",
    "transconv.flip": "transconv_flip",
    "transconv.rotate": "transconv_rotate",
    "transconv.stages": "transconv_stages",
    "convex.alpha": "alpha",
    "convex.classes": "convex_classes",
    "convex.labels": "convex_labels",
    "convex.mode": "convex_mode",
    "fusion.threshold": "fuse_threshold",
    "train.epochs": "epochs",
    "train.batch_size": "batch_size",
    "train.lr": "learning_rate",
    "train.weight_decay": "weight_decay",
    "train.optimizer": "optimizer",
    "train.dtype": "dtype",
}
_REVERSE = {}
for _k, _v in KEYS.items():
    _REVERSE.setdefault(_v, _k)


class ConfigError(ValueError):
    pass


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Estimator parameters from config text; unknown keys raise."""
    params: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        v = parse_value(value)
        if isinstance(v, list):
            v = tuple(v)
        params[KEYS[key]] = v
    return params


def load_config(path) -> Dict[str, Any]:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(params: Dict[str, Any]) -> str:
    lines = []
    for name, value in params.items():
        key = _REVERSE.get(name)
        if key is None or value is None:
            continue
        lines.append(f"{key} = {format_value(value)}")
    return "\n".join(sorted(lines)) + "\n"
