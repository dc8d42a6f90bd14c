"""Binary container used for datasets and checkpoints.

Layout::

    8 bytes   magic  b"RAQRCNT1"
    8 bytes   little-endian uint64: length of the JSON manifest in bytes
    N bytes   UTF-8 JSON manifest (sorted keys, compact separators)
    ...       raw tensor payloads, concatenated in manifest order

The manifest carries caller metadata plus a ``tensors`` list with each
tensor's name, dtype (``<f8`` or ``<f4``), shape, byte offset (relative to
the start of the payload region) and byte length. Writing is atomic: data
goes to a ``.partial`` sibling which is renamed on success.
"""
import json
import os
import struct

import numpy as np

from raqr.errors import CheckpointError

MAGIC = b"RAQRCNT1"
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


def write_container(path, manifest, tensors, dtype="<f8"):
    """Write ``tensors`` (ordered ``{name: array}``) and ``manifest`` to ``path``."""
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {dtype!r}")
    dt = _DTYPES[dtype]
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr), dtype=dt)
        blob = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    meta = dict(manifest)
    meta["tensors"] = entries
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = os.fspath(path)
    tmp = path + ".partial"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc
    return path


def read_manifest(path):
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != MAGIC:
                raise CheckpointError(f"{path}: not a raqr container (bad magic)")
            (n,) = struct.unpack("<Q", fh.read(8))
            header = fh.read(n)
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(header.decode("utf-8")), 16 + n
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc


def read_container(path):
    """Return ``(manifest, {name: array})``; arrays come back in their stored dtype."""
    manifest, start = read_manifest(path)
    tensors = {}
    with open(os.fspath(path), "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    for e in manifest.get("tensors", []):
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise CheckpointError(f"{path}: tensor {e['name']} has unsupported dtype {e['dtype']}")
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} truncated")
        arr = np.frombuffer(payload[lo:hi], dtype=dt)
        expected = int(np.prod(e["shape"])) if e["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(f"{path}: tensor {e['name']} size mismatch")
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return manifest, tensors
