"""Self-describing ``key = value`` text, one entry per line.

Values are JSON literals so numbers, booleans, lists and nested objects
survive a round trip. A bare word that is not valid JSON is read as a
string. Blank lines and ``#`` comments are ignored.
"""
from __future__ import annotations

import json


def dumps(entries: dict) -> str:
    lines = []
    for key, value in entries.items():
        if "=" in key or "\n" in key:
            raise ValueError(f"invalid key {key!r}")
        lines.append(f"{key} = {json.dumps(value, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        value = value.strip()
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value
    return out


def load(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dump(entries: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(entries))
