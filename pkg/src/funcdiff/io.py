"""Binary containers with a readable JSON manifest.

Layout: one ASCII line holding the manifest byte length, the JSON manifest
itself, then the concatenated little-endian float64 payload.  The manifest
lists every array with its shape and byte offset into the payload.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CKPT_FORMAT = "funcdiff-ckpt-v1"
DATA_FORMAT = "funcdiff-data-v1"
SAMPLES_FORMAT = "funcdiff-samples-v1"


class FormatError(ValueError):
    pass


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = dict(header)
    manifest["arrays"] = entries
    text = json.dumps(manifest, indent=1, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{len(text)}\n".encode())
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def read_container(path, expect_format: str | None = None):
    """Return ``(manifest, arrays)``; raises FormatError on a version mismatch."""
    with open(path, "rb") as fh:
        first = fh.readline()
        try:
            size = int(first)
        except ValueError as err:
            raise FormatError(f"{path}: not a funcdiff container") from err
        manifest = json.loads(fh.read(size))
        payload = fh.read()
    if expect_format is not None and manifest.get("format") != expect_format:
        raise FormatError(f"{path}: expected format {expect_format}, found {manifest.get('format')}")
    arrays = {}
    for e in manifest.pop("arrays"):
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).copy()
    return manifest, arrays


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        size = int(fh.readline())
        return json.loads(fh.read(size))
