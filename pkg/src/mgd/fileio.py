"""Plain-text key-value manifests shared by checkpoints and experiments."""

from __future__ import annotations

from pathlib import Path


def write_key_values(path: Path, entries: dict[str, object]) -> None:
    """Write one `key=value` line per entry, keys in insertion order."""
    lines = []
    for key, value in entries.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"manifest entry {key!r} not representable as key=value")
        lines.append(f"{key}={text}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_key_values(path: Path) -> dict[str, str]:
    """Parse a `key=value` manifest; values stay strings."""
    entries: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed manifest line {raw!r} in {path}")
        entries[key.strip()] = value.strip()
    return entries
