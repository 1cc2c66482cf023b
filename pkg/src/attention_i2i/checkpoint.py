"""Checkpoint directories: ``manifest.json`` plus one raw little-endian float32 blob per tensor."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch

from ._validation import IntegrityError, VersionError

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _blob_name(key: str) -> str:
    return key.replace("/", "_") + ".f32"


def write_checkpoint(path: Path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    """Atomically write ``tensors`` and ``meta`` to directory ``path`` (temp dir + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        index = {}
        for key in sorted(tensors):
            arr = tensors[key].detach().cpu().contiguous().to(torch.float32).numpy()
            raw = arr.astype("<f4", copy=False).tobytes()
            fname = _blob_name(key)
            with open(tmp / fname, "wb") as fh:
                fh.write(raw)
            index[key] = {"file": fname, "shape": list(arr.shape),
                          "sha256": hashlib.sha256(raw).hexdigest()}
        manifest = {"format_version": FORMAT_VERSION, **meta, "tensors": index}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        old = None
        if path.exists():
            old = path.with_name(path.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
        os.replace(tmp, path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path: Path) -> dict:
    manifest_path = Path(path) / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version!r} "
                           f"(expected {FORMAT_VERSION})")
    return manifest


def read_checkpoint(path: Path, expected_digest: str | None = None,
                    force: bool = False) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, manifest)`` after verifying version, digests and blob checksums."""
    path = Path(path)
    manifest = read_manifest(path)
    if expected_digest is not None and manifest.get("config_digest") != expected_digest and not force:
        raise IntegrityError("checkpoint config digest does not match the current configuration "
                             "(pass force=True to load anyway)")
    tensors = {}
    for key, entry in manifest["tensors"].items():
        raw = (path / entry["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"checksum mismatch for tensor {key}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        tensors[key] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest
