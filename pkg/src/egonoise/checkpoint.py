"""Versioned binary container for model parameters.

Layout::

    b"EGONOISE-CKPT\\n"            magic
    uint32 LE  format version
    uint64 LE  header length N
    N bytes    UTF-8 JSON header (sorted keys)
    payload    row-major little-endian arrays, back to back

The header records ``kind`` (e.g. ``"vae"``), free-form ``meta`` and, per
array, its name, dtype, shape and byte offset into the payload. Output is
byte-identical for identical inputs.
"""
import json
import struct

import numpy as np

MAGIC = b"EGONOISE-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, kind, arrays, meta=None):
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dtype = a.dtype.newbyteorder("<")
        raw = a.astype(dtype, copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load(path, kind=None):
    """Return ``(meta, arrays)``; raise :class:`CheckpointError` on mismatch."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack("<IQ", data[pos:pos + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos += 12
    header = json.loads(data[pos:pos + hlen].decode())
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, got {header['kind']!r}")
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header["meta"], arrays
