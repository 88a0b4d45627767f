"""Container format: round trips, determinism, validation, streaming."""

from __future__ import annotations

import struct
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import build_raw_file, make_archive
from resforge import (
    ArchiveWriter,
    Dtype,
    FormatError,
    ModelSignature,
    SignatureEntry,
    TensorRecord,
    open_archive,
    signature_of,
    write_archive,
)


def test_minimal_archive_lists_one_tensor(tmp_path):
    path = tmp_path / "a.st"
    make_archive(path, {"w": np.zeros((2, 2), dtype=np.float32)})
    with open_archive(path) as reader:
        assert reader.names == ["w"]
        entry = reader.entry("w")
        assert entry.shape == (2, 2)
        assert entry.dtype is Dtype.F32


def test_out_of_bounds_range_rejected(tmp_path):
    header = {"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}
    path = build_raw_file(tmp_path / "bad.st", header, b"\x00" * 8)
    with pytest.raises(FormatError, match="out-of-bounds range"):
        open_archive(path)


def test_round_trip_preserves_everything(tmp_path):
    rng = np.random.default_rng(7)
    records = [
        TensorRecord.from_array("alpha", rng.normal(size=(3, 5)).astype(np.float32)),
        TensorRecord("raw16", Dtype.BF16, (4,), rng.bytes(8)),
        TensorRecord.from_array("scalar", np.float64(3.25), Dtype.F64),
        TensorRecord("empty", Dtype.F16, (0, 7), b""),
    ]
    metadata = {"origin": "unit-test", "k": "v"}
    path = tmp_path / "a.st"
    write_archive(records, metadata, path)
    with open_archive(path) as reader:
        assert reader.names == ["alpha", "raw16", "scalar", "empty"]
        assert reader.metadata == metadata
        for record in records:
            entry = reader.entry(record.name)
            assert entry.dtype is record.dtype
            assert entry.shape == record.shape
            assert reader.read_bytes(record.name) == record.data


def test_empty_archive_is_valid(tmp_path):
    path = tmp_path / "empty.st"
    write_archive([], {}, path)
    with open_archive(path) as reader:
        assert reader.names == []
        assert reader.metadata == {}


def test_write_is_deterministic(tmp_path):
    records = [
        TensorRecord.from_array("b", np.arange(4, dtype=np.float32)),
        TensorRecord.from_array("a", np.ones((2, 2), dtype=np.float32)),
    ]
    first = tmp_path / "one.st"
    second = tmp_path / "two.st"
    h1 = write_archive(records, {"z": "1", "a": "2"}, first)
    h2 = write_archive(records, {"a": "2", "z": "1"}, second)
    assert h1 == h2
    assert first.read_bytes() == second.read_bytes()


def test_header_preserves_insertion_order(tmp_path):
    records = [
        TensorRecord.from_array("b", np.zeros(1, dtype=np.float32)),
        TensorRecord.from_array("a", np.zeros(1, dtype=np.float32)),
    ]
    path = tmp_path / "ordered.st"
    write_archive(records, None, path)
    with open_archive(path) as reader:
        assert reader.names == ["b", "a"]
    raw = path.read_bytes()
    (header_len,) = struct.unpack("<Q", raw[:8])
    header = raw[8 : 8 + header_len].decode("utf-8")
    assert header.index('"b"') < header.index('"a"')


def test_write_open_write_byte_identical(tmp_path):
    rng = np.random.default_rng(11)
    src = tmp_path / "src.st"
    copy = tmp_path / "copy.st"
    make_archive(
        src,
        {"x": rng.normal(size=(6,)).astype(np.float32), "y": rng.normal(size=(2, 2)).astype(np.float32)},
        {"k": "v"},
    )
    with open_archive(src) as reader:
        records = [
            TensorRecord(e.name, e.dtype, e.shape, reader.read_bytes(e.name))
            for e in reader.entries
        ]
        write_archive(records, reader.metadata, copy)
    assert src.read_bytes() == copy.read_bytes()


# -- validation errors ---------------------------------------------------------


def test_truncated_length_prefix(tmp_path):
    path = tmp_path / "tiny.st"
    path.write_bytes(b"\x01\x02")
    with pytest.raises(FormatError, match="truncated length prefix"):
        open_archive(path)


def test_header_longer_than_file(tmp_path):
    path = tmp_path / "short.st"
    path.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(FormatError, match="header length exceeds"):
        open_archive(path)


def test_invalid_json_header(tmp_path):
    path = build_raw_file(tmp_path / "bad.st", b"{not json", b"")
    with pytest.raises(FormatError, match="invalid JSON"):
        open_archive(path)


def test_header_not_an_object(tmp_path):
    path = build_raw_file(tmp_path / "bad.st", b"[1,2]", b"")
    with pytest.raises(FormatError, match="not a JSON object"):
        open_archive(path)


def test_duplicate_tensor_names_rejected(tmp_path):
    entry = '{"dtype":"F32","shape":[1],"data_offsets":[0,4]}'
    header = ('{"w":%s,"w":%s}' % (entry, entry)).encode()
    path = build_raw_file(tmp_path / "dup.st", header, b"\x00" * 4)
    with pytest.raises(FormatError, match="duplicate tensor name"):
        open_archive(path)


def test_unknown_dtype_rejected(tmp_path):
    header = {"w": {"dtype": "I8", "shape": [4], "data_offsets": [0, 4]}}
    path = build_raw_file(tmp_path / "int8.st", header, b"\x00" * 4)
    with pytest.raises(FormatError, match="unknown dtype"):
        open_archive(path)


def test_overlapping_ranges_rejected(tmp_path):
    header = {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
    }
    path = build_raw_file(tmp_path / "overlap.st", header, b"\x00" * 12)
    with pytest.raises(FormatError, match="overlap or leave gaps"):
        open_archive(path)


def test_gap_between_ranges_rejected(tmp_path):
    header = {
        "a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
        "b": {"dtype": "F32", "shape": [1], "data_offsets": [8, 12]},
    }
    path = build_raw_file(tmp_path / "gap.st", header, b"\x00" * 12)
    with pytest.raises(FormatError, match="overlap or leave gaps"):
        open_archive(path)


def test_trailing_payload_bytes_rejected(tmp_path):
    header = {"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}
    path = build_raw_file(tmp_path / "trailing.st", header, b"\x00" * 8)
    with pytest.raises(FormatError, match="trailing payload"):
        open_archive(path)


def test_range_length_must_match_shape(tmp_path):
    header = {"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}
    path = build_raw_file(tmp_path / "mismatch.st", header, b"\x00" * 8)
    with pytest.raises(FormatError, match="does not match"):
        open_archive(path)


def test_metadata_must_be_string_map(tmp_path):
    header = {"__metadata__": {"k": 3}}
    path = build_raw_file(tmp_path / "meta.st", header, b"")
    with pytest.raises(FormatError, match="__metadata__"):
        open_archive(path)


def test_write_duplicate_names_rejected(tmp_path):
    records = [
        TensorRecord.from_array("w", np.zeros(1, dtype=np.float32)),
        TensorRecord.from_array("w", np.ones(1, dtype=np.float32)),
    ]
    with pytest.raises(Exception, match="duplicate tensor name"):
        write_archive(records, None, tmp_path / "dup.st")


def test_record_byte_length_validated():
    with pytest.raises(ValueError, match="payload is"):
        TensorRecord("w", Dtype.F32, (3,), b"\x00" * 8)


def test_writer_rejects_out_of_order_payload(tmp_path):
    writer = ArchiveWriter(tmp_path / "x.st", [("a", Dtype.F32, (1,)), ("b", Dtype.F32, (1,))])
    with writer:
        with pytest.raises(Exception, match="out of order"):
            writer.write_tensor("b", b"\x00" * 4)
        writer.abort()


def test_writer_finish_requires_all_payloads(tmp_path):
    path = tmp_path / "partial.st"
    writer = ArchiveWriter(path, [("a", Dtype.F32, (1,))])
    with pytest.raises(Exception, match="missing payload"):
        writer.finish()
    assert not path.exists()


# -- signatures ----------------------------------------------------------------


def test_signature_of_simple_archive(tmp_path):
    path = tmp_path / "a.st"
    make_archive(path, {"w": np.zeros((2, 2), dtype=np.float32)})
    sig = signature_of(path)
    assert sig.entries == (SignatureEntry("w", (2, 2), Dtype.F32),)


def test_identical_archives_have_equal_signatures(tmp_path):
    tensors = {"w": np.arange(4, dtype=np.float32)}
    make_archive(tmp_path / "a.st", tensors)
    make_archive(tmp_path / "b.st", tensors)
    assert signature_of(tmp_path / "a.st") == signature_of(tmp_path / "b.st")


def test_signature_ignores_payload_values(tmp_path):
    make_archive(tmp_path / "a.st", {"w": np.zeros(4, dtype=np.float32)})
    make_archive(tmp_path / "b.st", {"w": np.full(4, 9.5, dtype=np.float32)})
    assert signature_of(tmp_path / "a.st") == signature_of(tmp_path / "b.st")


def test_signature_is_order_sensitive():
    a = ModelSignature(
        (SignatureEntry("x", (1,), Dtype.F32), SignatureEntry("y", (1,), Dtype.F32))
    )
    b = ModelSignature(
        (SignatureEntry("y", (1,), Dtype.F32), SignatureEntry("x", (1,), Dtype.F32))
    )
    assert a != b


# -- content hashing -----------------------------------------------------------


def test_content_hash_independent_of_header_formatting(tmp_path):
    values = np.array([1.0, 2.0], dtype=np.float32)
    canonical = tmp_path / "canonical.st"
    expected = make_archive(canonical, {"w": values}, {"b": "2", "a": "1"})

    # Same logical archive, written with spaces, shuffled keys, and
    # unsorted metadata.
    sloppy_header = (
        '{"w": {"shape": [2], "data_offsets": [0, 8], "dtype": "F32"}, '
        '"__metadata__": {"b": "2", "a": "1"}}  '
    ).encode()
    sloppy = build_raw_file(tmp_path / "sloppy.st", sloppy_header, values.tobytes())
    with open_archive(sloppy) as reader:
        assert reader.content_hash() == expected


def test_content_hash_differs_when_payload_differs(tmp_path):
    h1 = make_archive(tmp_path / "a.st", {"w": np.zeros(4, dtype=np.float32)})
    h2 = make_archive(tmp_path / "b.st", {"w": np.ones(4, dtype=np.float32)})
    assert h1 != h2


# -- property: round trip over random archives ----------------------------------

_names = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters="._"),
    min_size=1,
    max_size=12,
).filter(lambda s: s != "__metadata__")


@st.composite
def _record_lists(draw):
    names = draw(st.lists(_names, min_size=0, max_size=5, unique=True))
    records = []
    for name in names:
        dtype = draw(st.sampled_from(list(Dtype)))
        shape = tuple(draw(st.lists(st.integers(0, 4), min_size=0, max_size=3)))
        nbytes = dtype.byte_width
        for dim in shape:
            nbytes *= dim
        data = draw(st.binary(min_size=nbytes, max_size=nbytes))
        records.append(TensorRecord(name, dtype, shape, data))
    metadata = draw(
        st.dictionaries(st.text(max_size=8), st.text(max_size=8), max_size=3)
    )
    return records, metadata


@settings(max_examples=60, deadline=None)
@given(_record_lists())
def test_property_round_trip(tmp_path_factory, payload):
    records, metadata = payload
    path = tmp_path_factory.mktemp("prop") / "arch.st"
    write_archive(records, metadata, path)
    with open_archive(path) as reader:
        assert reader.names == [r.name for r in records]
        assert reader.metadata == metadata
        for record in records:
            entry = reader.entry(record.name)
            assert entry.dtype is record.dtype
            assert entry.shape == record.shape
            assert reader.read_bytes(record.name) == record.data
        # Re-writing what was read reproduces the file bit for bit.
        clone = path.with_name("clone.st")
        write_archive(
            [
                TensorRecord(e.name, e.dtype, e.shape, reader.read_bytes(e.name))
                for e in reader.entries
            ],
            reader.metadata,
            clone,
        )
    assert path.read_bytes() == clone.read_bytes()


# -- streaming memory bound ------------------------------------------------------


def test_whole_archive_copy_is_streaming(tmp_path):
    """Peak payload allocations during a copy stay near one tensor, not the file."""
    rng = np.random.default_rng(3)
    tensor_bytes = 256 * 1024
    count = 32
    src = tmp_path / "big.st"
    records = [
        TensorRecord("t%03d" % i, Dtype.F32, (tensor_bytes // 4,), rng.bytes(tensor_bytes))
        for i in range(count)
    ]
    write_archive(records, None, src)
    del records

    dst = tmp_path / "copy.st"
    tracemalloc.start()
    tracemalloc.reset_peak()
    with open_archive(src) as reader:
        writer = ArchiveWriter(dst, [(e.name, e.dtype, e.shape) for e in reader.entries])
        with writer:
            for entry in reader.entries:
                writer.write_tensor(entry.name, reader.read_bytes(entry.name))
            writer.finish()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()

    total_payload = count * tensor_bytes  # 8 MiB
    assert peak < 4 * tensor_bytes, (
        f"peak {peak} bytes suggests whole-archive buffering (payload {total_payload})"
    )
    assert src.read_bytes() == dst.read_bytes()
