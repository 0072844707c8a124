"""Directory container: ``manifest.json`` plus raw little-endian float32 payloads.

Layout::

    <dir>/manifest.json
    <dir>/<name>.f32        one file per array

The manifest records each array's shape and SHA-256 so loads are verified.
Wall-clock timestamps live under the single ``created`` key; everything else
is a pure function of the saved content.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "emdiff-container"
VERSION = 1


class ContainerError(ValueError):
    pass


def save_container(path, meta: dict, arrays: dict[str, np.ndarray], timestamp: bool = True) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        if not name.replace("_", "").replace("-", "").isalnum():
            raise ContainerError(f"array name {name!r} is not filesystem-safe")
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = data.tobytes()
        fname = f"{name}.f32"
        (path / fname).write_bytes(raw)
        entries[name] = {"file": fname, "shape": list(data.shape),
                         "sha256": hashlib.sha256(raw).hexdigest()}
    manifest = {"format": FORMAT, "version": VERSION, "meta": meta, "arrays": entries}
    if timestamp:
        manifest["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ContainerError(f"no manifest in {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"{path} is not an {FORMAT} directory")
    if manifest.get("version") != VERSION:
        raise ContainerError(f"unsupported container version {manifest.get('version')}")
    arrays = {}
    for name, e in manifest["arrays"].items():
        raw = (path / e["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ContainerError(f"payload {e['file']} failed its checksum")
        expected = int(np.prod(e["shape"])) * 4
        if len(raw) != expected:
            raise ContainerError(f"payload {e['file']} has {len(raw)} bytes, expected {expected}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return manifest["meta"], arrays
