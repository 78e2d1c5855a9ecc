"""Artifact manifests: every output gets a ``<name>.manifest.json`` sidecar.

A manifest records the artifact's sha256, the producing command, the tool
version, the full config hash plus per-section hashes, and the sha256 of every
input. Consumers call :func:`verify` before reading an artifact; a file whose
bytes no longer match its manifest is refused.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from . import __version__
from .config import RunConfig, config_hash

SUFFIX = ".manifest.json"


class ProvenanceError(Exception):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + SUFFIX)


def section_hashes(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    return {k: config_hash(v) for k, v in d.items()}


def write_manifest(path: str | Path, command: str, cfg: RunConfig, inputs=(), extra=None) -> dict:
    path = Path(path)
    man = {
        "artifact": path.name,
        "sha256": sha256_file(path),
        "command": command,
        "tool_version": __version__,
        "config_hash": cfg.digest(),
        "section_hashes": section_hashes(cfg),
        "inputs": {str(Path(p).name): sha256_file(p) for p in inputs},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        man.update(extra)
    manifest_path(path).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return man


def read_manifest(path: str | Path) -> dict:
    mp = manifest_path(path)
    if not mp.exists():
        raise ProvenanceError(f"{path}: no manifest ({mp.name}); refusing an artifact of unknown origin")
    try:
        return json.loads(mp.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ProvenanceError(f"{mp}: unreadable manifest") from e


def verify(path: str | Path, cfg: RunConfig | None = None, sections=()) -> dict:
    """Check ``path`` against its manifest; optionally require matching config sections."""
    path = Path(path)
    if not path.exists():
        raise ProvenanceError(f"{path}: input artifact is missing")
    man = read_manifest(path)
    actual = sha256_file(path)
    if actual != man["sha256"]:
        raise ProvenanceError(
            f"{path}: sha256 {actual[:12]} does not match manifest {man['sha256'][:12]}; "
            "the file changed after it was produced")
    if cfg is not None:
        mine = section_hashes(cfg)
        drift = [s for s in sections if man["section_hashes"].get(s) != mine[s]]
        if drift:
            raise ProvenanceError(
                f"{path}: produced under a different '{', '.join(drift)}' config section; "
                "regenerate it or restore the original config")
    return man
