"""Standalone reader/writer for the checkpoint container format.

Written independently of the resforge package on purpose: the harness
talks to the primary tool through files and subprocesses only, so this
module doubles as a cross-implementation check of the container layout
(8-byte little-endian header length, compact JSON header, raw little-endian
f32 payloads tightly packed in header order).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

_PREFIX = struct.Struct("<Q")
_METADATA_KEY = "__metadata__"


def save_tensors(
    path,
    tensors: Mapping[str, np.ndarray],
    metadata: Optional[Mapping[str, str]] = None,
) -> None:
    """Write named float32 arrays in archive order (mapping order)."""
    header: Dict[str, object] = {}
    if metadata:
        header[_METADATA_KEY] = {k: metadata[k] for k in sorted(metadata)}
    payloads = []
    cursor = 0
    for name, values in tensors.items():
        arr = np.ascontiguousarray(values, dtype=np.float32)
        data = arr.tobytes(order="C")
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [cursor, cursor + len(data)],
        }
        payloads.append(data)
        cursor += len(data)
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(_PREFIX.pack(len(raw)))
        fp.write(raw)
        for data in payloads:
            fp.write(data)


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """Read every tensor (any float dtype) plus the metadata map."""
    raw = Path(path).read_bytes()
    (header_len,) = _PREFIX.unpack(raw[: _PREFIX.size])
    header = json.loads(raw[_PREFIX.size : _PREFIX.size + header_len].decode("utf-8"))
    data_start = _PREFIX.size + header_len
    metadata = header.pop(_METADATA_KEY, {})
    dtypes = {"F64": "<f8", "F32": "<f4", "F16": "<f2"}
    tensors: Dict[str, np.ndarray] = {}
    for name, meta in header.items():
        begin, end = meta["data_offsets"]
        buf = raw[data_start + begin : data_start + end]
        if meta["dtype"] == "BF16":
            bits = np.frombuffer(buf, dtype="<u2").astype(np.uint32) << 16
            values = bits.view(np.float32)
        else:
            values = np.frombuffer(buf, dtype=dtypes[meta["dtype"]])
        tensors[name] = values.reshape(meta["shape"]).copy()
    return tensors, dict(metadata)
