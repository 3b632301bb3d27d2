"""Line-oriented key=value config files mirroring QuantConfig.

One ``key = value`` pair per line; ``#`` starts a comment (whole-line or
trailing); blank lines are ignored. Unknown keys are rejected rather than
skipped so a typo cannot silently fall back to a default. Floats are
rendered with ``repr``, which round-trips exactly, so
``parse_config(render_config(c)) == c`` for every valid config.
"""

from __future__ import annotations

from dataclasses import fields

from .errors import ValidationError
from .pipeline import QuantConfig

__all__ = ["parse_config", "render_config", "read_config", "write_config"]


def _parse_bool(text: str, key: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValidationError(f"config key {key}: expected a boolean, got {text!r}")


def _parse_float_tuple(text: str, key: str) -> tuple[float, ...]:
    if not text:
        return ()
    try:
        return tuple(float(part.strip()) for part in text.split(","))
    except ValueError as exc:
        raise ValidationError(f"config key {key}: bad float list {text!r}") from exc


def _parse_int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ValidationError(f"config key {key}: expected an integer, got {text!r}") from exc


def _parse_float(text: str, key: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ValidationError(f"config key {key}: expected a number, got {text!r}") from exc


_PARSERS = {
    "method": lambda text, key: text,
    "order": _parse_int,
    "iterations": _parse_int,
    "block_k": _parse_int,
    "salient_fractions": _parse_float_tuple,
    "percentile_grid": _parse_float_tuple,
    "damping_fraction": _parse_float,
    "cgb": _parse_bool,
    "compensate": _parse_bool,
    "seed": _parse_int,
    "calib_batches": _parse_int,
    "calib_rows": _parse_int,
    "calib_col_sigma": _parse_float,
    "scale_bytes": _parse_int,
}

# the parser table and the dataclass must stay in lockstep
assert set(_PARSERS) == {f.name for f in fields(QuantConfig)}


def parse_config(text: str) -> QuantConfig:
    """Parse config text; unspecified keys keep their defaults."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PARSERS:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValidationError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _PARSERS[key](value, key)
    return QuantConfig(**values)


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config: QuantConfig) -> str:
    """Render every field, one per line, in declaration order."""
    lines = [f"{f.name} = {_render_value(getattr(config, f.name))}" for f in fields(QuantConfig)]
    return "\n".join(lines) + "\n"


def read_config(path) -> QuantConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def write_config(path, config: QuantConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_config(config))
