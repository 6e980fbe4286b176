"""Binary checkpoint container for model parameters.

Layout: magic string, little-endian uint64 header length, UTF-8 JSON
header, then raw little-endian float32 payloads. The header lists
(name, shape, offset) per tensor plus a free-form `meta` dict, so a
file is self-describing enough to rebuild the model that wrote it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CXRVLM1\n"


class CheckpointError(IOError):
    """File is not a readable checkpoint of this format."""


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 arrays plus metadata to `path`."""
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"version": 1, "tensors": entries, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, meta). Arrays come out float32, shapes restored."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: missing {MAGIC!r} magic")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    pos += hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = pos + entry["offset"]
        end = start + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: payload for {entry['name']} truncated")
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, header.get("meta", {})
