"""Instruction-residual arithmetic over tensor archives.

The two core operations are streaming, tensor-at-a-time transforms:

* extract: residual[t] = instruct[t] - base[t]
* apply:   out[t] = target[t] + alpha * residual[t]

Arithmetic runs in a promoted accumulation dtype (float32 by default,
float64 on request); results are stored in a configurable storage dtype.
Non-finite values propagate through the arithmetic but fail the whole
operation at the end, so a corrupt checkpoint can never produce a
silently corrupt merge.
"""

from __future__ import annotations

import fnmatch
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import __version__
from .archive import (
    ArchiveReader,
    ArchiveWriter,
    ModelSignature,
    PathLike,
    open_archive,
)
from .dtypes import Dtype, encode, storage_view
from .errors import CompatibilityError, FormatError, NonFiniteError

ACCUMULATION_DTYPES = {"f32": np.float32, "f64": np.float64}

META_INSTRUCT_HASH = "resforge.instruct_sha256"
META_BASE_HASH = "resforge.base_sha256"
META_ALPHA_DEFAULT = "resforge.alpha_default"
META_RESIDUAL_DTYPE = "resforge.residual_dtype"
META_TOOL_VERSION = "resforge.tool_version"
META_RESIDUAL_HASH = "resforge.residual_sha256"
META_ALPHA_APPLIED = "resforge.alpha"
META_VARIANT = "resforge.variant"


@dataclass(frozen=True)
class MergePolicy:
    """Knobs shared by compatibility checks, extraction, and application.

    alpha scales the residual on application; the element-wise-addition
    default is exactly 1.0. ``missing_tensor="skip"`` downgrades tensors
    present on only one side from hard mismatches to warnings, for
    derivatives that add heads on top of a shared trunk.
    """

    alpha: float = 1.0
    accumulation: str = "f32"
    output_dtype: Optional[Dtype] = None
    residual_dtype: Dtype = Dtype.F32
    missing_tensor: str = "error"
    match_dtype: bool = True
    exclude: Tuple[str, ...] = ()

    def __post_init__(self):
        if not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")
        if self.accumulation not in ACCUMULATION_DTYPES:
            raise ValueError(f"accumulation must be one of {sorted(ACCUMULATION_DTYPES)}")
        if self.missing_tensor not in ("error", "skip"):
            raise ValueError("missing_tensor must be 'error' or 'skip'")

    @property
    def accumulation_dtype(self) -> type:
        return ACCUMULATION_DTYPES[self.accumulation]

    def excludes(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, pattern) for pattern in self.exclude)


@dataclass(frozen=True)
class Mismatch:
    name: str
    kind: str  # missing-in-a | missing-in-b | shape-mismatch | dtype-mismatch
    detail: str

    def to_json_obj(self) -> Dict[str, str]:
        return {"name": self.name, "kind": self.kind, "detail": self.detail}


@dataclass
class CompatReport:
    """Verdict of a structural comparison; failures ride along, never raise."""

    ok: bool
    mismatches: List[Mismatch] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def to_json_obj(self) -> Dict[str, object]:
        return {
            "ok": self.ok,
            "mismatches": [m.to_json_obj() for m in self.mismatches],
            "warnings": list(self.warnings),
        }

    def summary(self) -> str:
        if self.ok:
            return "compatible" + (f" ({len(self.warnings)} warning(s))" if self.warnings else "")
        parts = [f"{m.name}: {m.kind} ({m.detail})" for m in self.mismatches]
        return "incompatible: " + "; ".join(parts)


def check_compat(
    a: ModelSignature, b: ModelSignature, policy: MergePolicy = MergePolicy()
) -> CompatReport:
    """Compare two signatures tensor by tensor.

    ok iff name sets, per-name shapes, and (when the policy demands it)
    per-name dtypes all match. Every offending tensor is named with a
    reason; order follows ``a`` for common/missing-in-b tensors and ``b``
    for missing-in-a ones.
    """
    a_entries = {e.name: e for e in a if not policy.excludes(e.name)}
    b_entries = {e.name: e for e in b if not policy.excludes(e.name)}
    report = CompatReport(ok=True)

    def missing(name: str, kind: str, side: str) -> None:
        if policy.missing_tensor == "skip":
            report.warnings.append(f"{name}: skipped ({kind}, not present in {side})")
        else:
            report.mismatches.append(Mismatch(name, kind, f"not present in {side}"))

    for name, ea in a_entries.items():
        eb = b_entries.get(name)
        if eb is None:
            missing(name, "missing-in-b", "b")
            continue
        if ea.shape != eb.shape:
            report.mismatches.append(
                Mismatch(name, "shape-mismatch", f"{list(ea.shape)} vs {list(eb.shape)}")
            )
        elif policy.match_dtype and ea.dtype is not eb.dtype:
            report.mismatches.append(
                Mismatch(
                    name, "dtype-mismatch", f"{ea.dtype.wire_name} vs {eb.dtype.wire_name}"
                )
            )
    for name in b_entries:
        if name not in a_entries:
            missing(name, "missing-in-a", "a")

    report.ok = not report.mismatches
    return report


def common_names(
    a: ModelSignature, b: ModelSignature, policy: MergePolicy
) -> List[str]:
    """Names processed by a merge: a's order, minus exclusions and skips."""
    b_names = {e.name for e in b}
    return [
        e.name
        for e in a
        if not policy.excludes(e.name) and e.name in b_names
    ]


@dataclass(frozen=True)
class TensorStats:
    name: str
    l2_norm: float
    max_abs: float

    def to_json_obj(self) -> Dict[str, object]:
        return {"name": self.name, "l2_norm": self.l2_norm, "max_abs": self.max_abs}


@dataclass
class ExtractDiagnostics:
    """Residual magnitudes gathered while the residual is being written."""

    per_tensor: List[TensorStats]
    global_l2: float
    zero_residual: bool
    self_residual: bool

    def to_json_obj(self) -> Dict[str, object]:
        return {
            "per_tensor": [t.to_json_obj() for t in self.per_tensor],
            "global_l2": self.global_l2,
            "zero_residual": self.zero_residual,
            "self_residual": self.self_residual,
        }


@dataclass(frozen=True)
class Provenance:
    instruct_hash: str
    base_hash: str
    residual_dtype: Dtype
    alpha_default: float
    tool_version: str

    def to_metadata(self) -> Dict[str, str]:
        return {
            META_INSTRUCT_HASH: self.instruct_hash,
            META_BASE_HASH: self.base_hash,
            META_RESIDUAL_DTYPE: self.residual_dtype.wire_name,
            META_ALPHA_DEFAULT: repr(self.alpha_default),
            META_TOOL_VERSION: self.tool_version,
        }


class ResidualSet:
    """A residual archive plus its provenance, read from ``__metadata__``."""

    def __init__(self, reader: ArchiveReader, provenance: Provenance,
                 diagnostics: Optional[ExtractDiagnostics] = None):
        self.reader = reader
        self.provenance = provenance
        self.diagnostics = diagnostics

    @property
    def path(self) -> Path:
        return self.reader.path

    def signature(self) -> ModelSignature:
        return self.reader.signature()

    def content_hash(self) -> str:
        return self.reader.content_hash()

    @classmethod
    def open(cls, path: PathLike) -> "ResidualSet":
        reader = open_archive(path)
        meta = reader.metadata
        missing = [k for k in (META_INSTRUCT_HASH, META_BASE_HASH) if k not in meta]
        if missing:
            reader.close()
            raise FormatError(
                f"{path} is not a residual archive: missing metadata {', '.join(missing)}"
            )
        try:
            provenance = Provenance(
                instruct_hash=meta[META_INSTRUCT_HASH],
                base_hash=meta[META_BASE_HASH],
                residual_dtype=Dtype.from_wire(meta.get(META_RESIDUAL_DTYPE, "F32")),
                alpha_default=float(meta.get(META_ALPHA_DEFAULT, "1.0")),
                tool_version=meta.get(META_TOOL_VERSION, "unknown"),
            )
        except ValueError as exc:
            reader.close()
            raise FormatError(f"{path}: malformed residual metadata: {exc}") from exc
        return cls(reader, provenance)

    def close(self) -> None:
        self.reader.close()

    def __enter__(self) -> "ResidualSet":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class _NonFiniteLog:
    """Collects per-tensor non-finite counts; raises once at the end."""

    def __init__(self):
        self.records: List[Tuple[str, int, int]] = []

    def inspect(self, name: str, stored: np.ndarray) -> None:
        if stored.size == 0:
            return
        finite = np.isfinite(stored)
        if finite.all():
            return
        flat = finite.ravel()
        count = int(flat.size - np.count_nonzero(flat))
        first = int(np.argmin(flat))
        self.records.append((name, count, first))

    def raise_if_any(self, operation: str) -> None:
        if self.records:
            listing = "; ".join(
                f"{name}: {count} non-finite element(s), first at flat index {idx}"
                for name, count, idx in self.records
            )
            raise NonFiniteError(f"{operation} produced non-finite values: {listing}",
                                 records=self.records)


def _require_compat(report: CompatReport, operation: str) -> None:
    if not report.ok:
        raise CompatibilityError(f"{operation}: {report.summary()}",
                                 mismatches=report.mismatches)


def extract_residual(
    instruct: ArchiveReader,
    base: ArchiveReader,
    out_path: PathLike,
    policy: MergePolicy = MergePolicy(),
) -> ResidualSet:
    """Compute the element-wise difference instruct - base, streamed to disk.

    Every common tensor is promoted to the accumulation dtype, subtracted,
    and stored in ``policy.residual_dtype``. Provenance (content hashes of
    both sources, default alpha, storage dtype) lands in the output's
    metadata. A residual of an archive with itself is permitted and flagged
    as zero in the diagnostics.
    """
    compat = check_compat(instruct.signature(), base.signature(), policy)
    _require_compat(compat, "extract")

    names = common_names(instruct.signature(), base.signature(), policy)
    provenance = Provenance(
        instruct_hash=instruct.content_hash(),
        base_hash=base.content_hash(),
        residual_dtype=policy.residual_dtype,
        alpha_default=policy.alpha,
        tool_version=__version__,
    )
    instruct_entries = instruct.signature().by_name()
    signature = [(n, policy.residual_dtype, instruct_entries[n].shape) for n in names]

    acc = policy.accumulation_dtype
    nonfinite = _NonFiniteLog()
    per_tensor: List[TensorStats] = []
    sq_sum = 0.0
    writer = ArchiveWriter(out_path, signature, provenance.to_metadata())
    with writer:
        for name in names:
            diff = instruct.read_array(name).astype(acc) - base.read_array(name).astype(acc)
            data = encode(diff, policy.residual_dtype)
            stored = storage_view(data, policy.residual_dtype, diff.shape)
            nonfinite.inspect(name, stored)
            l2 = float(np.linalg.norm(stored.astype(np.float64))) if stored.size else 0.0
            max_abs = float(np.max(np.abs(stored))) if stored.size else 0.0
            per_tensor.append(TensorStats(name, l2, max_abs))
            sq_sum += l2 * l2
            writer.write_tensor(name, data)
        nonfinite.raise_if_any("extract")
        writer.finish()

    global_l2 = math.sqrt(sq_sum)
    diagnostics = ExtractDiagnostics(
        per_tensor=per_tensor,
        global_l2=global_l2,
        zero_residual=global_l2 == 0.0,
        self_residual=provenance.instruct_hash == provenance.base_hash,
    )
    return ResidualSet(open_archive(out_path), provenance, diagnostics)


def apply_residual(
    target: ArchiveReader,
    residual: Union[ResidualSet, ArchiveReader],
    out_path: PathLike,
    policy: MergePolicy = MergePolicy(),
) -> str:
    """Add alpha-scaled residual tensors onto a target archive.

    Compatibility ignores dtype (residuals are stored at their own
    precision by design). Each output tensor is cast to
    ``policy.output_dtype`` or, by default, the target tensor's own dtype.
    alpha == 0 short-circuits to a byte-exact copy of the target payload,
    so it is an identity regardless of what the residual contains.
    Returns the content hash of the written archive.
    """
    if isinstance(residual, ResidualSet):
        residual_reader = residual.reader
        residual_meta = residual.provenance.to_metadata()
    else:
        residual_reader = residual
        residual_meta = {
            k: v for k, v in residual_reader.metadata.items() if k.startswith("resforge.")
        }

    compat_policy = MergePolicy(
        alpha=policy.alpha,
        accumulation=policy.accumulation,
        output_dtype=policy.output_dtype,
        residual_dtype=policy.residual_dtype,
        missing_tensor=policy.missing_tensor,
        match_dtype=False,
        exclude=policy.exclude,
    )
    compat = check_compat(target.signature(), residual_reader.signature(), compat_policy)
    _require_compat(compat, "apply")

    names = common_names(target.signature(), residual_reader.signature(), compat_policy)
    target_entries = target.signature().by_name()

    metadata = dict(target.metadata)
    metadata.update(residual_meta)
    metadata[META_RESIDUAL_HASH] = residual_reader.content_hash()
    metadata[META_ALPHA_APPLIED] = repr(policy.alpha)
    metadata[META_TOOL_VERSION] = __version__
    metadata[META_VARIANT] = "derived"

    out_dtypes = {
        n: (policy.output_dtype or target_entries[n].dtype) for n in names
    }
    signature = [(n, out_dtypes[n], target_entries[n].shape) for n in names]

    acc = policy.accumulation_dtype
    alpha = acc(policy.alpha)
    nonfinite = _NonFiniteLog()
    writer = ArchiveWriter(out_path, signature, metadata)
    with writer:
        for name in names:
            out_dtype = out_dtypes[name]
            if policy.alpha == 0.0 and out_dtype is target_entries[name].dtype:
                writer.write_tensor(name, target.read_bytes(name))
                continue
            base_values = target.read_array(name).astype(acc)
            if policy.alpha == 0.0:
                merged = base_values
            else:
                merged = base_values + alpha * residual_reader.read_array(name).astype(acc)
            data = encode(merged, out_dtype)
            nonfinite.inspect(name, storage_view(data, out_dtype, merged.shape))
            writer.write_tensor(name, data)
        nonfinite.raise_if_any("apply")
        return writer.finish()


@dataclass(frozen=True)
class TensorDiff:
    name: str
    l2_norm: float
    max_abs: float
    cosine_similarity: float

    def to_json_obj(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "l2_norm": self.l2_norm,
            "max_abs": self.max_abs,
            "cosine_similarity": self.cosine_similarity,
        }


@dataclass
class DiffReport:
    """Per-tensor and global statistics on the difference of two archives."""

    per_tensor: List[TensorDiff]
    global_l2: float
    tensor_count: int

    def to_jsonl(self) -> str:
        lines = [json.dumps(t.to_json_obj(), separators=(",", ":")) for t in self.per_tensor]
        lines.append(
            json.dumps(
                {"global_l2": self.global_l2, "tensor_count": self.tensor_count},
                separators=(",", ":"),
            )
        )
        return "\n".join(lines) + "\n"


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity with the degenerate cases pinned down.

    Zero-against-zero (including empty tensors) counts as identical (1.0);
    zero against non-zero counts as unrelated (0.0).
    """
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 and norm_b == 0.0:
        return 1.0
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    value = float(np.dot(a.ravel(), b.ravel()) / (norm_a * norm_b))
    return max(-1.0, min(1.0, value))


def diff_report(a: ArchiveReader, b: ArchiveReader) -> DiffReport:
    """Compare two strictly compatible archives tensor by tensor.

    Statistics are computed in float64: l2 and max-abs of (a - b) per
    tensor, cosine similarity between the two source tensors, and the
    global l2 over all tensors.
    """
    compat = check_compat(a.signature(), b.signature(), MergePolicy())
    _require_compat(compat, "diff")

    per_tensor: List[TensorDiff] = []
    sq_sum = 0.0
    for name in a.names:
        xa = a.read_array(name).astype(np.float64)
        xb = b.read_array(name).astype(np.float64)
        delta = xa - xb
        l2 = float(np.linalg.norm(delta)) if delta.size else 0.0
        max_abs = float(np.max(np.abs(delta))) if delta.size else 0.0
        per_tensor.append(TensorDiff(name, l2, max_abs, _cosine(xa, xb)))
        sq_sum += l2 * l2
    return DiffReport(per_tensor=per_tensor, global_l2=math.sqrt(sq_sum),
                      tensor_count=len(per_tensor))
