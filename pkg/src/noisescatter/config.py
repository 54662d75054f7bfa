"""Flat `key = value` experiment config files.

Lines are `key = value`; `#` starts a comment; blank lines are ignored.
Tuples are comma-separated, `seeds` also accepts `range a b`, and
`exit_exclusion = auto` keeps the derived default.
"""
import dataclasses
import re

from .recovery import ExperimentConfig


class ConfigError(ValueError):
    """Malformed config; message carries the file name and line number."""

    def __init__(self, path, lineno, message):
        self.path, self.lineno = path, lineno
        loc = f"{path}:{lineno}" if lineno else str(path)
        super().__init__(f"{loc}: {message}")


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_FLOAT_TUPLES = {"bump_center", "eps_ladder"}


def _parse_value(key, text):
    default = _FIELDS[key].default
    if key == "seeds":
        parts = text.split()
        if parts[0] == "range":
            return tuple(range(*map(int, parts[1:])))
        return tuple(int(v) for v in text.split(","))
    if key in _FLOAT_TUPLES:
        return tuple(float(v) for v in text.split(","))
    if key == "exit_exclusion":
        return None if text == "auto" else float(text)
    if key == "mode":
        return text
    if isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError("expected true or false")
        return text.lower() == "true"
    if isinstance(default, int):
        return int(text)
    return float(text)


def parse_config(text, path="<config>"):
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(path, lineno, f"expected 'key = value', got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(path, lineno, f"unknown key {key!r}")
        if key in values:
            raise ConfigError(path, lineno, f"duplicate key {key!r} (first on line {lines[key]})")
        if not val:
            raise ConfigError(path, lineno, f"missing value for {key!r}")
        try:
            values[key] = _parse_value(key, val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(path, lineno, f"bad value for {key!r}: {val!r} ({exc})") from None
        lines[key] = lineno
    try:
        return ExperimentConfig(**values)
    except ValueError as exc:
        # blame the first line that sets a key named in the message, else the file
        hit = [lines[k] for k in lines if re.search(rf"\b{k}\b", str(exc))]
        raise ConfigError(path, min(hit) if hit else 0, str(exc)) from None


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(path, 0, f"cannot read config ({exc})") from None
    return parse_config(text, str(path))


def dump_config(cfg):
    out = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        if name == "exit_exclusion" and v is None:
            v = "auto"
        elif isinstance(v, (tuple, list, range)):
            v = ", ".join(repr(x) for x in v)
        out.append(f"{name} = {v}")
    return "\n".join(out) + "\n"
