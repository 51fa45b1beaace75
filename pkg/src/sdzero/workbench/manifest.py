"""Run manifests: every command appends what it read, what it wrote, and the
exact configuration it ran under, all content-addressed with SHA-256.

Paths are stored relative to the run directory and no timestamps are
recorded, so a repeated run in a fresh directory produces a byte-identical
manifest. Verification recomputes every hash and names each drifted file.
"""

from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy

from .. import __version__ as package_version

MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    """Manifest file missing, unparseable, or structurally invalid."""


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "package": package_version,
    }


def _rel(run_dir: Path, path) -> str:
    return Path(path).resolve().relative_to(run_dir.resolve()).as_posix()


def load_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"{path}: no manifest")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: corrupt manifest ({e})") from e
    if not isinstance(data, dict) or "entries" not in data:
        raise ManifestError(f"{path}: corrupt manifest (no entries)")
    return data


def record_entry(
    run_dir,
    command: str,
    config_hash: str,
    seed: int,
    inputs: list,
    outputs: list,
    extra: dict | None = None,
) -> dict:
    """Append or replace the manifest entry for one command.

    Inputs are hashed as they were read, outputs as they were written; both
    lists hold paths inside the run directory.
    """
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST_NAME
    if path.exists():
        data = load_manifest(run_dir)
    else:
        data = {"entries": {}}
    entry = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "inputs": {_rel(run_dir, p): file_sha256(p) for p in inputs},
        "outputs": {_rel(run_dir, p): file_sha256(p) for p in outputs},
        "versions": versions(),
    }
    if extra:
        entry.update(extra)
    data["entries"][command] = entry
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")
    return entry


@dataclass
class VerifyReport:
    ok: bool
    diffs: list[str] = field(default_factory=list)


def manifest_verify(run_dir) -> VerifyReport:
    """Recompute the hash of every recorded file and report drift.

    Each diff line names the file and whether it is missing or altered.
    """
    run_dir = Path(run_dir)
    data = load_manifest(run_dir)
    diffs: list[str] = []
    seen: dict[str, str] = {}
    for command in sorted(data["entries"]):
        entry = data["entries"][command]
        for role in ("inputs", "outputs"):
            for rel, expected in sorted(entry.get(role, {}).items()):
                if seen.get(rel) == expected:
                    continue
                target = run_dir / rel
                if not target.exists():
                    diffs.append(f"{rel}: missing (recorded by {command})")
                    continue
                actual = file_sha256(target)
                seen[rel] = actual
                if actual != expected:
                    diffs.append(
                        f"{rel}: hash mismatch (recorded by {command}, "
                        f"expected {expected[:12]}, found {actual[:12]})"
                    )
    return VerifyReport(ok=not diffs, diffs=diffs)
