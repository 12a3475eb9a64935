"""Checkpoint files: a JSON header followed by raw little-endian float32.

Layout::

    [4 bytes]  header length N as little-endian uint32
    [N bytes]  UTF-8 JSON: format_version, config echo, metadata, and a
               parameter manifest of {name, shape, offset} entries
    [rest]     the parameter arrays, concatenated in manifest order

Offsets count float32 elements from the start of the body. The header is
serialized with sorted keys so identical state always produces identical
bytes, and writes go through a temp file + rename so a crash can't leave
a half-written checkpoint behind.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray],
                    config: dict | None = None,
                    meta: dict | None = None) -> None:
    path = Path(path)
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "params": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(np.array(len(blob), dtype="<u4").tobytes())
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Returns (params, config, meta). Rejects unknown format versions."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    if len(raw) < 4:
        raise CheckpointError(f"{path}: truncated (no header length)")
    hlen = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    if len(raw) < 4 + hlen:
        raise CheckpointError(f"{path}: truncated header ({hlen} bytes declared)")
    try:
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version!r} not supported "
            f"(expected {FORMAT_VERSION})")
    body_bytes = raw[4 + hlen:]
    body = np.frombuffer(body_bytes[:len(body_bytes) // 4 * 4], dtype="<f4")
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > body.size:
            raise CheckpointError(
                f"{path}: parameter {entry['name']!r} extends past end of body")
        params[entry["name"]] = body[start:start + size].reshape(shape).copy()
    return params, header.get("config", {}), header.get("meta", {})
