"""Versioned array checkpoints and atomic file writes.

Checkpoint layout: one JSON header line (format tag, config dict, array
names/shapes/byte offsets), then the concatenated raw little-endian
float64 payload.  The header is serialized with sorted keys so a
checkpoint of identical content is byte-identical across runs.

All writers here go through a temp file plus os.replace, so a crashed
run can leave stale files but never half-written ones.
"""

import json
import os
import tempfile

import numpy as np


class CheckpointError(ValueError):
    """Malformed, truncated, or wrong-format checkpoint file."""


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    _atomic_write(path, text.encode("utf-8"))


def save_arrays(path, fmt: str, config: dict, arrays):
    """Write named float64 arrays.  `arrays` is an ordered (name, ndarray)
    iterable or dict; order is preserved in the file."""
    items = list(arrays.items()) if isinstance(arrays, dict) else list(arrays)
    meta = []
    payload = []
    offset = 0
    for name, arr in items:
        # note: ascontiguousarray would promote 0-D arrays to shape (1,),
        # so take the shape before making the payload contiguous
        a = np.asarray(arr, dtype="<f8")
        meta.append({"name": name, "shape": list(a.shape), "offset": offset})
        payload.append(np.ascontiguousarray(a).tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"format": fmt, "config": config, "arrays": meta}, sort_keys=True
    )
    _atomic_write(path, header.encode("utf-8") + b"\n" + b"".join(payload))


def load_arrays(path, expect_format=None):
    """Read a checkpoint; returns (format, config, {name: ndarray})."""
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
        fmt = header["format"]
        config = header["config"]
        meta = header["arrays"]
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint header ({e})") from None
    if expect_format is not None and fmt != expect_format:
        raise CheckpointError(f"{path}: format {fmt!r}, expected {expect_format!r}")
    out = {}
    for m in meta:
        shape = tuple(m["shape"])
        n = int(np.prod(shape)) if shape else 1
        start, stop = m["offset"], m["offset"] + 8 * n
        if stop > len(payload):
            raise CheckpointError(f"{path}: truncated payload for array {m['name']!r}")
        arr = np.frombuffer(payload[start:stop], dtype="<f8").reshape(shape).copy()
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: non-finite values in array {m['name']!r}")
        out[m["name"]] = arr
    return fmt, config, out
