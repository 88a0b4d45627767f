"""Reading and writing the checkpoint container format.

Layout (bit-exact): an unsigned 64-bit little-endian header length, a UTF-8
JSON header mapping tensor names to ``{"dtype", "shape", "data_offsets"}``
(offsets relative to the first payload byte) plus an optional
``"__metadata__"`` string map, then the concatenated raw row-major
little-endian payloads, tightly packed in header order.

Canonical writes put ``__metadata__`` first with sorted keys, keep tensor
keys in caller order, and emit compact JSON (no whitespace), so identical
logical content always produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .dtypes import Dtype, decode, payload_nbytes
from .errors import FormatError, ResforgeError

METADATA_KEY = "__metadata__"
_LENGTH_PREFIX = struct.Struct("<Q")
_HASH_CHUNK = 4 * 1024 * 1024

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class SignatureEntry:
    """Structural fingerprint of one tensor: everything except its payload."""

    name: str
    shape: Tuple[int, ...]
    dtype: Dtype


@dataclass(frozen=True)
class ModelSignature:
    """Ordered structural fingerprint of a whole archive.

    Equality is element-wise over the ordered entries, so two signatures
    with the same tensors in a different order are *not* equal.
    """

    entries: Tuple[SignatureEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate tensor names in signature")

    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def by_name(self) -> Dict[str, SignatureEntry]:
        return {e.name: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[SignatureEntry]:
        return iter(self.entries)


@dataclass(frozen=True)
class ArchiveEntry:
    """One tensor as declared in an archive header."""

    name: str
    dtype: Dtype
    shape: Tuple[int, ...]
    data_offsets: Tuple[int, int]

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


@dataclass
class TensorRecord:
    """A fully materialized tensor, used for small in-memory archives."""

    name: str
    dtype: Dtype
    shape: Tuple[int, ...]
    data: bytes

    def __post_init__(self):
        if not self.name:
            raise ValueError("tensor name must be non-empty")
        self.shape = tuple(int(d) for d in self.shape)
        if any(d < 0 for d in self.shape):
            raise ValueError(f"negative dimension in shape {self.shape}")
        expected = payload_nbytes(self.dtype, self.shape)
        if len(self.data) != expected:
            raise ValueError(
                f"tensor {self.name!r}: payload is {len(self.data)} bytes, "
                f"expected {expected}"
            )

    @classmethod
    def from_array(cls, name: str, values: np.ndarray, dtype: Dtype = Dtype.F32) -> "TensorRecord":
        from .dtypes import encode

        values = np.asarray(values)
        return cls(name=name, dtype=dtype, shape=values.shape, data=encode(values, dtype))


def _canonical_header(
    entries: Sequence[Tuple[str, Dtype, Sequence[int]]],
    metadata: Mapping[str, str] | None,
) -> Tuple[bytes, List[Tuple[int, int]]]:
    """Build canonical header bytes plus the tight data offsets it declares."""
    obj: Dict[str, object] = {}
    if metadata:
        for key, value in metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValueError("metadata must map strings to strings")
        obj[METADATA_KEY] = {k: metadata[k] for k in sorted(metadata)}
    offsets: List[Tuple[int, int]] = []
    cursor = 0
    seen = set()
    for name, dtype, shape in entries:
        if not name:
            raise ValueError("tensor name must be non-empty")
        if name == METADATA_KEY:
            raise ValueError(f"tensor name {METADATA_KEY!r} is reserved")
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        end = cursor + payload_nbytes(dtype, shape)
        obj[name] = {
            "dtype": dtype.wire_name,
            "shape": [int(d) for d in shape],
            "data_offsets": [cursor, end],
        }
        offsets.append((cursor, end))
        cursor = end
    header = json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return header, offsets


def _parse_header_json(raw: bytes) -> "OrderedPairs":
    def reject_duplicates(pairs):
        keys = [k for k, _ in pairs]
        if len(set(keys)) != len(keys):
            dupes = sorted({k for k in keys if keys.count(k) > 1})
            raise FormatError(f"duplicate tensor name(s) in header: {', '.join(dupes)}")
        return dict(pairs)

    try:
        parsed = json.loads(raw.decode("utf-8"), object_pairs_hook=reject_duplicates)
    except FormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid JSON header: {exc}") from exc
    if not isinstance(parsed, dict):
        raise FormatError("header is not a JSON object")
    return parsed


OrderedPairs = Dict[str, object]


class ArchiveReader:
    """Lazy, thread-shareable handle on an archive file.

    The header is parsed and fully validated at open time; tensor payloads
    are read on demand with positional reads, so concurrent per-tensor
    reads from multiple threads are safe and peak memory stays bounded by
    the largest single tensor.
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self._fd: int | None = None
        self._content_hash: str | None = None
        try:
            self._fd = os.open(self.path, os.O_RDONLY)
            stat = os.fstat(self._fd)
        except OSError as exc:
            raise FormatError(f"cannot open archive {self.path}: {exc}") from exc
        if not os.path.isfile(self.path):
            self.close()
            raise FormatError(f"{self.path} is not a regular file")
        file_size = stat.st_size
        try:
            self._parse(file_size)
        except ResforgeError:
            self.close()
            raise

    def _parse(self, file_size: int) -> None:
        if file_size < _LENGTH_PREFIX.size:
            raise FormatError(f"{self.path}: truncated length prefix")
        (header_len,) = _LENGTH_PREFIX.unpack(self._pread(_LENGTH_PREFIX.size, 0))
        self._data_start = _LENGTH_PREFIX.size + header_len
        if self._data_start > file_size:
            raise FormatError(f"{self.path}: declared header length exceeds file size")
        data_size = file_size - self._data_start
        raw = self._pread(header_len, _LENGTH_PREFIX.size)
        parsed = _parse_header_json(raw)

        metadata = parsed.pop(METADATA_KEY, {})
        if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
        ):
            raise FormatError(f"{self.path}: {METADATA_KEY} must map strings to strings")
        self.metadata: Dict[str, str] = dict(metadata)

        entries: List[ArchiveEntry] = []
        cursor = 0
        for name, meta in parsed.items():
            if not isinstance(meta, dict):
                raise FormatError(f"{self.path}: entry for {name!r} is not an object")
            dtype_name = meta.get("dtype")
            shape = meta.get("shape")
            offsets = meta.get("data_offsets")
            if not isinstance(dtype_name, str):
                raise FormatError(f"{self.path}: missing dtype for {name!r}")
            dtype = Dtype.from_wire(dtype_name)
            if not isinstance(shape, list) or not all(
                isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
            ):
                raise FormatError(f"{self.path}: invalid shape for {name!r}")
            if (
                not isinstance(offsets, (list, tuple))
                or len(offsets) != 2
                or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
            ):
                raise FormatError(f"{self.path}: invalid data_offsets for {name!r}")
            begin, end = int(offsets[0]), int(offsets[1])
            if begin > end:
                raise FormatError(f"{self.path}: inverted data range for {name!r}")
            if end > data_size:
                raise FormatError(f"{self.path}: out-of-bounds range for {name!r}")
            if begin != cursor:
                raise FormatError(
                    f"{self.path}: data ranges overlap or leave gaps at {name!r} "
                    f"(expected offset {cursor}, found {begin})"
                )
            if end - begin != payload_nbytes(dtype, shape):
                raise FormatError(
                    f"{self.path}: data range of {name!r} does not match "
                    f"{dtype.wire_name} {shape}"
                )
            entries.append(ArchiveEntry(name, dtype, tuple(shape), (begin, end)))
            cursor = end
        if cursor != data_size:
            raise FormatError(
                f"{self.path}: {data_size - cursor} trailing payload bytes not "
                "covered by any tensor"
            )
        self.entries: List[ArchiveEntry] = entries
        self._by_name: Dict[str, ArchiveEntry] = {e.name: e for e in entries}

    def _pread(self, nbytes: int, offset: int) -> bytes:
        if self._fd is None:
            raise ResforgeError(f"archive {self.path} is closed")
        chunks = []
        remaining = nbytes
        while remaining > 0:
            chunk = os.pread(self._fd, remaining, offset)
            if not chunk:
                raise FormatError(f"{self.path}: unexpected end of file")
            chunks.append(chunk)
            offset += len(chunk)
            remaining -= len(chunk)
        return b"".join(chunks) if len(chunks) != 1 else chunks[0]

    # -- structure ---------------------------------------------------------

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def entry(self, name: str) -> ArchiveEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no tensor named {name!r} in {self.path}") from None

    def signature(self) -> ModelSignature:
        return ModelSignature(
            tuple(SignatureEntry(e.name, e.shape, e.dtype) for e in self.entries)
        )

    # -- payloads ----------------------------------------------------------

    def read_bytes(self, name: str) -> bytes:
        entry = self.entry(name)
        begin, end = entry.data_offsets
        return self._pread(end - begin, self._data_start + begin)

    def read_array(self, name: str) -> np.ndarray:
        """Decode one tensor; bf16 payloads come back as exact float32."""
        entry = self.entry(name)
        return decode(self.read_bytes(name), entry.dtype, entry.shape)

    def content_hash(self) -> str:
        """SHA-256 over the canonical serialized form.

        Independent of how the source file formatted its header: the header
        is re-serialized canonically before hashing, then payload bytes are
        streamed in header order.
        """
        if self._content_hash is None:
            header, _ = _canonical_header(
                [(e.name, e.dtype, e.shape) for e in self.entries], self.metadata
            )
            digest = hashlib.sha256()
            digest.update(_LENGTH_PREFIX.pack(len(header)))
            digest.update(header)
            for entry in self.entries:
                begin, end = entry.data_offsets
                offset = self._data_start + begin
                remaining = end - begin
                while remaining > 0:
                    chunk = self._pread(min(remaining, _HASH_CHUNK), offset)
                    digest.update(chunk)
                    offset += len(chunk)
                    remaining -= len(chunk)
            self._content_hash = digest.hexdigest()
        return self._content_hash

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self) -> "ArchiveReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def open_archive(path: PathLike) -> ArchiveReader:
    """Open an archive lazily: header validated now, payloads read on demand."""
    return ArchiveReader(path)


class ArchiveWriter:
    """Streaming writer: declare the signature up front, then feed payloads.

    The header is fully determined by (signature, metadata), so it is
    emitted first and tensors are appended one at a time in declared order.
    Output goes to a temporary file that is atomically renamed on finish,
    so a crash never leaves a partial archive at the target path.
    """

    def __init__(
        self,
        path: PathLike,
        signature: Union[ModelSignature, Sequence[Tuple[str, Dtype, Sequence[int]]]],
        metadata: Mapping[str, str] | None = None,
    ):
        self.path = Path(path)
        if isinstance(signature, ModelSignature):
            triples = [(e.name, e.dtype, e.shape) for e in signature]
        else:
            triples = [(name, dtype, tuple(shape)) for name, dtype, shape in signature]
        try:
            header, offsets = _canonical_header(triples, metadata)
        except ValueError as exc:
            raise ResforgeError(str(exc)) from exc
        self._expected = [
            (name, payload_nbytes(dtype, shape)) for name, dtype, shape in triples
        ]
        self._next = 0
        self._digest = hashlib.sha256()
        self._tmp = self.path.with_name(f"{self.path.name}.tmp.{os.getpid()}")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fp = open(self._tmp, "wb")
        self._write(_LENGTH_PREFIX.pack(len(header)))
        self._write(header)

    def _write(self, data: bytes) -> None:
        self._fp.write(data)
        self._digest.update(data)

    def write_tensor(self, name: str, data: bytes) -> None:
        if self._next >= len(self._expected):
            raise ResforgeError(f"unexpected extra tensor {name!r}")
        expected_name, expected_len = self._expected[self._next]
        if name != expected_name:
            raise ResforgeError(
                f"tensor {name!r} written out of order (expected {expected_name!r})"
            )
        if len(data) != expected_len:
            raise ResforgeError(
                f"tensor {name!r}: payload is {len(data)} bytes, expected {expected_len}"
            )
        self._write(data)
        self._next += 1

    def write_array(self, name: str, values: np.ndarray, dtype: Dtype) -> None:
        from .dtypes import encode

        self.write_tensor(name, encode(values, dtype))

    def finish(self) -> str:
        """Flush, atomically rename into place, and return the content hash."""
        if self._next != len(self._expected):
            missing = [n for n, _ in self._expected[self._next :]]
            self.abort()
            raise ResforgeError(f"missing payload(s) for: {', '.join(missing)}")
        self._fp.flush()
        os.fsync(self._fp.fileno())
        self._fp.close()
        os.replace(self._tmp, self.path)
        return self._digest.hexdigest()

    def abort(self) -> None:
        if not self._fp.closed:
            self._fp.close()
        try:
            os.unlink(self._tmp)
        except FileNotFoundError:
            pass

    def __enter__(self) -> "ArchiveWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            self.abort()


def write_archive(
    records: Iterable[TensorRecord],
    metadata: Mapping[str, str] | None,
    path: PathLike,
) -> str:
    """Write fully materialized records; returns the content hash.

    For archives larger than memory use :class:`ArchiveWriter` directly.
    """
    records = list(records)
    writer = ArchiveWriter(path, [(r.name, r.dtype, r.shape) for r in records], metadata)
    with writer:
        for record in records:
            writer.write_tensor(record.name, record.data)
        return writer.finish()


def signature_of(archive: Union[ArchiveReader, PathLike]) -> ModelSignature:
    """Structural fingerprint (names, shapes, dtypes) without payload reads."""
    if isinstance(archive, ArchiveReader):
        return archive.signature()
    with open_archive(archive) as reader:
        return reader.signature()
