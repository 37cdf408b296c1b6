"""Plain-text ``key = value`` configuration files applied onto dataclasses."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any


def read_kv(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_kv(values: dict[str, Any], path: str | Path) -> None:
    lines = []
    for k, v in values.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _coerce(cur: Any, text: str) -> Any:
    if isinstance(cur, bool):
        low = text.lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes")
    if isinstance(cur, int):
        return int(text)
    if isinstance(cur, float):
        return float(text)
    if isinstance(cur, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        if cur and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in cur):
            return tuple(type(cur[0])(float(p)) if isinstance(cur[0], int) else float(p) for p in parts)
        return tuple(parts)
    if cur is None:
        return None if text.lower() in ("", "none") else text
    return text


def apply_overrides(obj, values: dict[str, str], strict: bool = False):
    """Return a copy of dataclass ``obj`` with matching keys replaced.

    Dotted keys (``model.r``) reach nested dataclasses.  Unknown keys are
    ignored unless ``strict``.
    """
    names = {f.name for f in dataclasses.fields(obj)}
    direct, nested = {}, {}
    for k, v in values.items():
        head, _, rest = k.partition(".")
        if head not in names:
            if strict:
                raise KeyError(f"unknown configuration key {k!r} for {type(obj).__name__}")
            continue
        if rest:
            nested.setdefault(head, {})[rest] = v
        else:
            direct[head] = _coerce(getattr(obj, head), v)
    for head, sub in nested.items():
        direct[head] = apply_overrides(getattr(obj, head), sub, strict)
    return dataclasses.replace(obj, **direct)


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    """Dataclass to a flat ``{dotted key: value}`` mapping."""
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = v
    return out
