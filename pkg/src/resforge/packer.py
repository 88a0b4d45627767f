"""Pack tokenized documents into fixed-length training sequences.

Greedy first-fit in input order: each document is appended to the current
sequence; a document that does not fit is either split across sequences
(default, lossless) or started in a fresh sequence. Every sequence carries
a segment map recording which document owns which token span, so attention
masks can forbid cross-document attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, TextIO, Tuple

import numpy as np

from .errors import FormatError, PackingError


@dataclass(frozen=True)
class TokenDoc:
    """One tokenized document; ids are non-negative ints, at least one."""

    doc_id: str
    tokens: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if len(self.tokens) == 0:
            raise ValueError(f"document {self.doc_id!r} has no tokens")
        if any(t < 0 for t in self.tokens):
            raise ValueError(f"document {self.doc_id!r} has negative token ids")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Segment:
    """A contiguous span of one document inside a packed sequence.

    ``is_continuation`` is true iff this span continues a document that was
    split at the end of the previous sequence.
    """

    doc_id: str
    start: int
    length: int
    is_continuation: bool

    def to_json_obj(self) -> Dict[str, object]:
        return {
            "doc_id": self.doc_id,
            "start": self.start,
            "length": self.length,
            "continuation": self.is_continuation,
        }


@dataclass
class PackedSequence:
    """One fixed-length training sequence: content tokens plus segment map.

    ``tokens`` holds only the content (no padding); the emitted form pads
    with ``pad_id`` so that len(segments' tokens) + pad_length == seq_len.
    """

    seq_index: int
    seq_len: int
    tokens: List[int]
    segments: List[Segment]
    pad_length: int

    def padded_tokens(self, pad_id: int = 0) -> List[int]:
        return self.tokens + [pad_id] * self.pad_length

    def to_json_obj(self, pad_id: int = 0) -> Dict[str, object]:
        return {
            "seq_index": self.seq_index,
            "tokens": self.padded_tokens(pad_id),
            "segments": [s.to_json_obj() for s in self.segments],
            "pad_length": self.pad_length,
        }


@dataclass
class PackingStats:
    doc_count: int
    token_count: int
    sequence_count: int
    min_doc_tokens: int
    max_doc_tokens: int
    mean_doc_tokens: float
    padding_fraction: float

    def to_json_obj(self) -> Dict[str, object]:
        return {
            "doc_count": self.doc_count,
            "token_count": self.token_count,
            "sequence_count": self.sequence_count,
            "min_doc_tokens": self.min_doc_tokens,
            "max_doc_tokens": self.max_doc_tokens,
            "mean_doc_tokens": self.mean_doc_tokens,
            "padding_fraction": self.padding_fraction,
        }


class _DocStats:
    def __init__(self):
        self.count = 0
        self.tokens = 0
        self.min_len: Optional[int] = None
        self.max_len: Optional[int] = None

    def add(self, length: int) -> None:
        self.count += 1
        self.tokens += length
        self.min_len = length if self.min_len is None else min(self.min_len, length)
        self.max_len = length if self.max_len is None else max(self.max_len, length)


class Packer:
    """Order-sensitive streaming fold over a document stream.

    Consume :meth:`pack` fully, then read :attr:`stats`.
    """

    def __init__(self, seq_len: int, split_long_docs: bool = True):
        if seq_len < 1:
            raise PackingError(f"seq_len must be >= 1, got {seq_len}")
        self.seq_len = seq_len
        self.split_long_docs = split_long_docs
        self._stats: Optional[PackingStats] = None

    @property
    def stats(self) -> PackingStats:
        if self._stats is None:
            raise RuntimeError("stats are available only after pack() is fully consumed")
        return self._stats

    def pack(self, docs: Iterable[TokenDoc]) -> Iterator[PackedSequence]:
        seq_len = self.seq_len
        doc_stats = _DocStats()
        seen_ids: set = set()
        seq_index = 0
        pad_total = 0
        current_tokens: List[int] = []
        current_segments: List[Segment] = []

        def flush() -> PackedSequence:
            nonlocal seq_index, current_tokens, current_segments, pad_total
            pad = seq_len - len(current_tokens)
            pad_total += pad
            seq = PackedSequence(
                seq_index=seq_index,
                seq_len=seq_len,
                tokens=current_tokens,
                segments=current_segments,
                pad_length=pad,
            )
            seq_index += 1
            current_tokens = []
            current_segments = []
            return seq

        for doc in docs:
            if doc.doc_id in seen_ids:
                raise PackingError(f"duplicate doc_id {doc.doc_id!r}")
            seen_ids.add(doc.doc_id)
            doc_stats.add(len(doc))

            if not self.split_long_docs and len(doc) > seq_len:
                raise PackingError(
                    f"document {doc.doc_id!r} has {len(doc)} tokens, more than "
                    f"seq_len {seq_len}, and splitting is disabled"
                )

            pos = 0
            while pos < len(doc):
                space = seq_len - len(current_tokens)
                remaining = len(doc) - pos
                if space == 0:
                    yield flush()
                    continue
                if not self.split_long_docs and remaining > space:
                    # Whole document must fit; close this sequence and retry.
                    yield flush()
                    continue
                take = min(space, remaining)
                current_segments.append(
                    Segment(
                        doc_id=doc.doc_id,
                        start=len(current_tokens),
                        length=take,
                        is_continuation=pos > 0,
                    )
                )
                current_tokens.extend(doc.tokens[pos : pos + take])
                pos += take

        if doc_stats.count == 0:
            raise PackingError("no documents")
        if current_tokens:
            yield flush()

        packed_slots = seq_index * seq_len
        self._stats = PackingStats(
            doc_count=doc_stats.count,
            token_count=doc_stats.tokens,
            sequence_count=seq_index,
            min_doc_tokens=doc_stats.min_len or 0,
            max_doc_tokens=doc_stats.max_len or 0,
            mean_doc_tokens=doc_stats.tokens / doc_stats.count,
            padding_fraction=(pad_total / packed_slots) if packed_slots else 0.0,
        )


def pack(
    docs: Iterable[TokenDoc], seq_len: int, split_long_docs: bool = True
) -> Tuple[List[PackedSequence], PackingStats]:
    """Eagerly pack a whole corpus; convenience wrapper around :class:`Packer`."""
    packer = Packer(seq_len, split_long_docs=split_long_docs)
    sequences = list(packer.pack(docs))
    return sequences, packer.stats


def corpus_stats(docs: Iterable[TokenDoc]) -> PackingStats:
    """Length statistics over a document stream, without packing anything."""
    doc_stats = _DocStats()
    for doc in docs:
        doc_stats.add(len(doc))
    if doc_stats.count == 0:
        raise PackingError("no documents")
    return PackingStats(
        doc_count=doc_stats.count,
        token_count=doc_stats.tokens,
        sequence_count=0,
        min_doc_tokens=doc_stats.min_len or 0,
        max_doc_tokens=doc_stats.max_len or 0,
        mean_doc_tokens=doc_stats.tokens / doc_stats.count,
        padding_fraction=0.0,
    )


def mask_pair_count(seq: PackedSequence) -> int:
    """Number of attention-allowed (query, key) pairs in one sequence.

    A pair is allowed iff both positions lie in the same segment and the
    key does not come after the query (causal within document); padding
    attends to nothing. Closed form: sum over segments of len*(len+1)/2.
    """
    return sum(s.length * (s.length + 1) // 2 for s in seq.segments)


def iter_mask_pairs(seq: PackedSequence) -> Iterator[Tuple[int, int]]:
    """Yield every attention-allowed (query, key) index pair."""
    for segment in seq.segments:
        begin = segment.start
        end = segment.start + segment.length
        for q in range(begin, end):
            for k in range(begin, q + 1):
                yield (q, k)


def attention_mask(seq: PackedSequence) -> np.ndarray:
    """Dense boolean mask of shape (seq_len, seq_len); True = may attend."""
    mask = np.zeros((seq.seq_len, seq.seq_len), dtype=bool)
    for segment in seq.segments:
        begin = segment.start
        end = segment.start + segment.length
        block = np.tril(np.ones((segment.length, segment.length), dtype=bool))
        mask[begin:end, begin:end] = block
    return mask


# -- line-delimited JSON I/O -------------------------------------------------


def read_token_docs(fp: Iterable[str]) -> Iterator[TokenDoc]:
    """Parse documents from JSONL lines: {"doc_id": str, "tokens": [ints]}."""
    for lineno, line in enumerate(fp, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict) or "doc_id" not in obj or "tokens" not in obj:
            raise FormatError(f"line {lineno}: expected object with doc_id and tokens")
        if not isinstance(obj["doc_id"], str) or not isinstance(obj["tokens"], list):
            raise FormatError(f"line {lineno}: doc_id must be a string, tokens a list")
        try:
            yield TokenDoc(doc_id=obj["doc_id"], tokens=obj["tokens"])
        except (ValueError, TypeError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc


def read_packed_sequences(fp: Iterable[str]) -> Tuple[List[PackedSequence], Optional[PackingStats]]:
    """Parse a packed-corpus JSONL file back into sequences plus final stats."""
    sequences: List[PackedSequence] = []
    stats: Optional[PackingStats] = None
    for lineno, line in enumerate(fp, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {lineno}: invalid JSON: {exc}") from exc
        if "seq_index" in obj:
            segments = [
                Segment(
                    doc_id=s["doc_id"],
                    start=int(s["start"]),
                    length=int(s["length"]),
                    is_continuation=bool(s["continuation"]),
                )
                for s in obj["segments"]
            ]
            pad_length = int(obj["pad_length"])
            tokens = [int(t) for t in obj["tokens"]]
            content = tokens[: len(tokens) - pad_length]
            sequences.append(
                PackedSequence(
                    seq_index=int(obj["seq_index"]),
                    seq_len=len(tokens),
                    tokens=content,
                    segments=segments,
                    pad_length=pad_length,
                )
            )
        else:
            stats = PackingStats(**obj)
    return sequences, stats


def write_packed_corpus(
    docs: Iterable[TokenDoc],
    out: TextIO,
    seq_len: int,
    split_long_docs: bool = True,
    pad_id: int = 0,
) -> PackingStats:
    """Pack a document stream straight to JSONL; final line is the stats."""
    packer = Packer(seq_len, split_long_docs=split_long_docs)
    for seq in packer.pack(docs):
        out.write(json.dumps(seq.to_json_obj(pad_id), separators=(",", ":")))
        out.write("\n")
    stats = packer.stats
    out.write(json.dumps(stats.to_json_obj(), separators=(",", ":")))
    out.write("\n")
    return stats
