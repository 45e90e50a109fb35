"""Single-file manifest + blob container.

Layout: one line of UTF-8 JSON (the manifest) terminated by ``\\n``, followed by
a raw little-endian blob. The manifest lists every array with its dtype, shape
and byte offset; ``blob_bytes`` and ``blob_sha256`` guard against truncation
and tampering. ``head -1 file`` shows the manifest.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ContainerError, CorruptBlob, FormatVersionMismatch

FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


def canonical_hash(obj: Any) -> str:
    """Stable short hash of a JSON-serializable object."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_container(
    path: str | Path,
    kind: str,
    manifest: dict,
    arrays: list[tuple[str, np.ndarray]],
    dtype: str = "float64",
) -> dict:
    """Write ``arrays`` (in order) plus ``manifest`` to ``path``; returns the full manifest."""
    le = _DTYPES[dtype]
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype=le)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    blob = b"".join(chunks)
    full = dict(manifest)
    full.update(
        {
            "format": "lgdetect-container",
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "dtype": dtype,
            "arrays": entries,
            "blob_bytes": len(blob),
            "blob_sha256": hashlib.sha256(blob).hexdigest(),
        }
    )
    header = json.dumps(full, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(blob)
    return full


def read_container(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ContainerError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != "lgdetect-container" or manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"{path}: format {manifest.get('format')!r} v{manifest.get('format_version')!r}, "
            f"expected lgdetect-container v{FORMAT_VERSION}"
        )
    if kind is not None and manifest.get("kind") != kind:
        raise ContainerError(f"{path}: container kind {manifest.get('kind')!r}, expected {kind!r}")
    blob = raw[nl + 1 :]
    if len(blob) != manifest["blob_bytes"]:
        raise CorruptBlob(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CorruptBlob(f"{path}: blob checksum mismatch")
    le = np.dtype(_DTYPES[manifest["dtype"]])
    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] != expected:
            raise CorruptBlob(f"{path}: array {entry['name']!r} at unexpected offset")
        nbytes = count * le.itemsize
        chunk = blob[expected : expected + nbytes]
        if len(chunk) != nbytes:
            raise CorruptBlob(f"{path}: array {entry['name']!r} truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=le).reshape(entry["shape"]).astype(np.float64)
        expected += nbytes
    if expected != len(blob):
        raise CorruptBlob(f"{path}: {len(blob) - expected} trailing bytes in blob")
    return manifest, arrays
