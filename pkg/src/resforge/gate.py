"""Pre-merge policy gate: may these two checkpoints be combined?

Structural compatibility is delegated to the residual module's checker;
on top of that, user-asserted lineage tags trigger advisory warnings for
usage patterns known to degrade quality. Lineage is asserted metadata,
never inferred from weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

from .archive import ModelSignature
from .residual import CompatReport, MergePolicy, check_compat

VARIANTS = ("base", "instruct", "derived")

ALLOW = "allow"
ALLOW_WITH_WARNINGS = "allow-with-warnings"
DENY = "deny"

INSTRUCT_TARGET_WARNING = (
    "target is an instruction-tuned variant: further weight updates on top of "
    "instruction-tuned checkpoints are known to erode instruction following; "
    "prefer merging onto the base variant and porting instruction capability "
    "via a residual"
)

CROSS_FAMILY_WARNING = (
    "target family {target!r} differs from residual family {residual!r}: "
    "residual transfer has only been demonstrated between sibling releases "
    "that share an ancestor, and typically trails the target family's own "
    "instruction-tuned model; no quality promise is made across families"
)


@dataclass(frozen=True)
class LineageTag:
    """User-asserted ancestry of a checkpoint."""

    family: str
    variant: str = "base"
    notes: str = ""

    def __post_init__(self):
        if not self.family:
            raise ValueError("family must be non-empty")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class GateReport:
    verdict: str
    structural: CompatReport
    warnings: List[str] = field(default_factory=list)

    @property
    def allowed(self) -> bool:
        return self.verdict != DENY

    def to_json_obj(self) -> Dict[str, object]:
        return {
            "verdict": self.verdict,
            "structural": self.structural.to_json_obj(),
            "warnings": list(self.warnings),
        }

    def to_text(self) -> str:
        lines = [f"verdict: {self.verdict}"]
        for mismatch in self.structural.mismatches:
            lines.append(f"  mismatch {mismatch.name}: {mismatch.kind} ({mismatch.detail})")
        for warning in self.structural.warnings + self.warnings:
            lines.append(f"  warning: {warning}")
        return "\n".join(lines)


def gate(
    target_sig: ModelSignature,
    residual_sig: ModelSignature,
    target_tag: LineageTag,
    residual_tag: LineageTag,
    policy: MergePolicy = MergePolicy(),
) -> GateReport:
    """Decide allow / allow-with-warnings / deny for a proposed merge.

    Denies on any structural mismatch, dtype included unless
    ``policy.match_dtype`` relaxes it (application itself promotes dtypes,
    so its internal gate runs relaxed). Warns when the target is an
    instruction-tuned variant or when the asserted families differ;
    warnings never block. Pure function of its inputs.
    """
    structural = check_compat(target_sig, residual_sig, policy)
    if not structural.ok:
        return GateReport(verdict=DENY, structural=structural)

    warnings: List[str] = []
    if target_tag.variant == "instruct":
        warnings.append(INSTRUCT_TARGET_WARNING)
    if target_tag.family != residual_tag.family:
        warnings.append(
            CROSS_FAMILY_WARNING.format(
                target=target_tag.family, residual=residual_tag.family
            )
        )

    if warnings or structural.warnings:
        return GateReport(verdict=ALLOW_WITH_WARNINGS, structural=structural, warnings=warnings)
    return GateReport(verdict=ALLOW, structural=structural)
