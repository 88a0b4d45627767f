"""Shared test utilities: independent oracles and fixture builders."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from resforge import Dtype, TensorRecord, write_archive


def make_archive(
    path,
    tensors: Mapping[str, np.ndarray],
    metadata: Optional[Mapping[str, str]] = None,
    dtype: Dtype = Dtype.F32,
) -> str:
    """Write a small archive from named float arrays; returns content hash."""
    records = [TensorRecord.from_array(name, values, dtype) for name, values in tensors.items()]
    return write_archive(records, metadata, path)


def build_raw_file(path, header: bytes | dict, payload: bytes) -> Path:
    """Assemble a container file byte by byte, bypassing the writer.

    Used to craft malformed or non-canonical inputs.
    """
    if isinstance(header, dict):
        header = json.dumps(header).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fp:
        fp.write(struct.pack("<Q", len(header)))
        fp.write(header)
        fp.write(payload)
    return path


def ulp_distance_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance in units-in-last-place between two float32 arrays.

    Maps the IEEE bit patterns onto a monotonic integer line so that
    adjacent representable floats are exactly 1 apart; +0.0 and -0.0
    coincide. NaNs are rejected.
    """
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValueError("ulp distance undefined for NaN")

    def ordinal(x: np.ndarray) -> np.ndarray:
        bits = x.view(np.uint32).astype(np.int64)
        return np.where(bits < 0x80000000, bits, 0x80000000 - bits)

    return np.abs(ordinal(a) - ordinal(b))


def brute_force_diff(a: np.ndarray, b: np.ndarray) -> Tuple[float, float, float]:
    """Scalar-loop reference for (l2, max_abs, cosine) of one tensor pair."""
    fa = [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]
    fb = [float(x) for x in np.asarray(b, dtype=np.float64).ravel()]
    sq = 0.0
    max_abs = 0.0
    dot = 0.0
    norm_a = 0.0
    norm_b = 0.0
    for x, y in zip(fa, fb):
        d = x - y
        sq += d * d
        max_abs = max(max_abs, abs(d))
        dot += x * y
        norm_a += x * x
        norm_b += y * y
    norm_a **= 0.5
    norm_b **= 0.5
    if norm_a == 0.0 and norm_b == 0.0:
        cos = 1.0
    elif norm_a == 0.0 or norm_b == 0.0:
        cos = 0.0
    else:
        cos = max(-1.0, min(1.0, dot / (norm_a * norm_b)))
    return sq**0.5, max_abs, cos


def replay_pack(
    docs: Sequence[Tuple[str, Sequence[int]]],
    seq_len: int,
    split_long_docs: bool,
) -> List[dict]:
    """Token-by-token reference simulation of the greedy packing rule.

    Deliberately structured differently from the implementation: it walks
    one token at a time and derives segments afterwards from a per-slot
    ownership map.
    """
    sequences: List[dict] = []
    owners: List[Tuple[str, int]] = []  # (doc_id, token_index_within_doc) per slot

    def close():
        nonlocal owners
        segments = []
        slot = 0
        while slot < len(owners):
            doc_id, tok_idx = owners[slot]
            start = slot
            while slot < len(owners) and owners[slot][0] == doc_id and (
                owners[slot][1] - tok_idx == slot - start
            ):
                slot += 1
            segments.append(
                {
                    "doc_id": doc_id,
                    "start": start,
                    "length": slot - start,
                    "continuation": tok_idx > 0,
                }
            )
        sequences.append(
            {
                "tokens": [t for t, _ in tokens_owned],
                "segments": segments,
                "pad_length": seq_len - len(owners),
            }
        )
        owners = []
        tokens_owned.clear()

    tokens_owned: List[Tuple[int, Tuple[str, int]]] = []

    for doc_id, tokens in docs:
        if not split_long_docs and len(tokens) > seq_len:
            raise ValueError("oversized document with splitting disabled")
        if not split_long_docs and len(owners) + len(tokens) > seq_len:
            close()
        for index, token in enumerate(tokens):
            if len(owners) == seq_len:
                close()
            owners.append((doc_id, index))
            tokens_owned.append((token, (doc_id, index)))
    if owners:
        close()
    return sequences


def brute_force_mask_pairs(segments: Iterable[dict], seq_len: int) -> set:
    """Enumerate every (q, k) pair and keep those the rule allows."""
    owner: Dict[int, str] = {}
    for seg in segments:
        for offset in range(seg["length"]):
            owner[seg["start"] + offset] = seg["doc_id"]
    allowed = set()
    for q in range(seq_len):
        for k in range(seq_len):
            if q in owner and k in owner and owner[q] == owner[k] and k <= q:
                # same segment, not merely same doc: positions must belong to
                # one contiguous span (a doc split across sequences never
                # shares a sequence with itself, but two spans of one doc in
                # one sequence cannot occur under greedy packing).
                allowed.add((q, k))
    return allowed
