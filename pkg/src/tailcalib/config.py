"""Plain-text key=value config files and per-run output bookkeeping.

Precedence is: command-line flags > config file > built-in defaults. Every
run persists its fully resolved configuration and a manifest of primary
outputs (path, size, sha256). Timestamps live in a separate run_info.json so
the primary outputs stay byte-identical across reruns.
"""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from .errors import ValidationError


def parse_config_file(path: str | Path) -> dict[str, str]:
    """key=value lines; blank lines and #-comments are ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def resolve(defaults: dict, file_values: dict[str, str], flag_values: dict) -> dict:
    """Merge the three config layers; flag values of None mean 'not given'."""
    resolved = dict(defaults)
    for key, raw in file_values.items():
        if key not in defaults:
            raise ValidationError(f"unknown config key {key!r}")
        resolved[key] = _coerce(raw, defaults[key])
    for key, value in flag_values.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _coerce(raw: str, reference) -> object:
    if isinstance(reference, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"expected a boolean, got {raw!r}")
    if isinstance(reference, int) and not isinstance(reference, bool):
        return int(raw)
    if isinstance(reference, float):
        return float(raw)
    return raw


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_run_outputs(outdir: str | Path, resolved_config: dict,
                      outputs: list[Path]) -> None:
    """Persist resolved_config.json, manifest.json, and run_info.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_json(outdir / "resolved_config.json", resolved_config)
    manifest = {
        "outputs": [
            {
                "path": p.name,
                "bytes": p.stat().st_size,
                "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
            }
            for p in sorted(outputs, key=lambda p: p.name)
        ]
    }
    write_json(outdir / "manifest.json", manifest)
    # Timestamp kept out of the manifest so primary outputs stay reproducible.
    write_json(outdir / "run_info.json", {"completed_unix": time.time()})
