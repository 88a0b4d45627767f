"""Merge gate: structural denial, lineage warnings, purity."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resforge import Dtype, MergePolicy, ModelSignature, SignatureEntry, check_compat
from resforge.gate import (
    ALLOW,
    ALLOW_WITH_WARNINGS,
    DENY,
    INSTRUCT_TARGET_WARNING,
    LineageTag,
    gate,
)


def _sig(*entries):
    return ModelSignature(tuple(SignatureEntry(n, tuple(s), d) for n, s, d in entries))


BASE_SIG = _sig(("w", (4,), Dtype.F32), ("head", (2, 4), Dtype.F32))


def test_same_family_base_target_allows():
    report = gate(
        BASE_SIG,
        BASE_SIG,
        LineageTag("llama3", "base"),
        LineageTag("llama3", "instruct"),
    )
    assert report.verdict == ALLOW
    assert report.warnings == []


def test_instruct_target_warns():
    report = gate(
        BASE_SIG,
        BASE_SIG,
        LineageTag("llama3", "instruct"),
        LineageTag("llama3", "instruct"),
    )
    assert report.verdict == ALLOW_WITH_WARNINGS
    assert INSTRUCT_TARGET_WARNING in report.warnings
    assert "instruction-tuned" in report.warnings[0]


def test_cross_family_warns():
    report = gate(
        BASE_SIG,
        BASE_SIG,
        LineageTag("llama3", "base"),
        LineageTag("qwen2", "instruct"),
    )
    assert report.verdict == ALLOW_WITH_WARNINGS
    assert any("qwen2" in w and "llama3" in w for w in report.warnings)
    assert any("no quality promise" in w for w in report.warnings)


def test_structural_mismatch_denies():
    other = _sig(("w", (5,), Dtype.F32), ("head", (2, 4), Dtype.F32))
    report = gate(
        BASE_SIG, other, LineageTag("llama3", "base"), LineageTag("llama3", "instruct")
    )
    assert report.verdict == DENY
    assert not report.allowed
    assert any(m.name == "w" for m in report.structural.mismatches)


def test_dtype_mismatch_denies_unless_relaxed():
    half = _sig(("w", (4,), Dtype.F16), ("head", (2, 4), Dtype.F16))
    strict = gate(
        BASE_SIG, half, LineageTag("llama3", "base"), LineageTag("llama3", "instruct")
    )
    assert strict.verdict == DENY
    assert all(m.kind == "dtype-mismatch" for m in strict.structural.mismatches)
    relaxed = gate(
        BASE_SIG,
        half,
        LineageTag("llama3", "base"),
        LineageTag("llama3", "instruct"),
        MergePolicy(match_dtype=False),
    )
    assert relaxed.verdict == ALLOW


def test_skip_policy_surfaces_warning_verdict():
    extra = _sig(
        ("w", (4,), Dtype.F32), ("head", (2, 4), Dtype.F32), ("extra", (1,), Dtype.F32)
    )
    report = gate(
        BASE_SIG,
        extra,
        LineageTag("llama3", "base"),
        LineageTag("llama3", "instruct"),
        MergePolicy(missing_tensor="skip"),
    )
    assert report.verdict == ALLOW_WITH_WARNINGS
    assert report.structural.ok


def test_gate_never_allows_when_check_compat_fails():
    mismatched = [
        _sig(("w", (9,), Dtype.F32), ("head", (2, 4), Dtype.F32)),  # shape
        _sig(("head", (2, 4), Dtype.F32)),  # missing-in-b
        _sig(("w", (4,), Dtype.F32), ("head", (2, 4), Dtype.F32), ("x", (1,), Dtype.F32)),
    ]
    for other in mismatched:
        structural = check_compat(BASE_SIG, other)
        report = gate(
            BASE_SIG, other, LineageTag("f", "base"), LineageTag("f", "instruct")
        )
        assert structural.ok == (report.verdict != DENY)


def test_lineage_tag_validation():
    with pytest.raises(ValueError, match="family"):
        LineageTag("", "base")
    with pytest.raises(ValueError, match="variant"):
        LineageTag("llama3", "finetuned")


def test_report_serialization_shapes():
    report = gate(
        BASE_SIG,
        BASE_SIG,
        LineageTag("a", "instruct"),
        LineageTag("b", "instruct"),
    )
    obj = report.to_json_obj()
    assert obj["verdict"] == ALLOW_WITH_WARNINGS
    assert len(obj["warnings"]) == 2
    text = report.to_text()
    assert text.startswith("verdict: allow-with-warnings")
    assert "warning:" in text


@settings(max_examples=50, deadline=None)
@given(
    target_variant=st.sampled_from(["base", "instruct", "derived"]),
    families=st.tuples(st.sampled_from(["fam1", "fam2"]), st.sampled_from(["fam1", "fam2"])),
)
def test_property_gate_is_pure(target_variant, families):
    target_tag = LineageTag(families[0], target_variant)
    residual_tag = LineageTag(families[1], "instruct")
    first = gate(BASE_SIG, BASE_SIG, target_tag, residual_tag)
    second = gate(BASE_SIG, BASE_SIG, target_tag, residual_tag)
    assert first.verdict == second.verdict
    assert first.warnings == second.warnings
    expects_warning = target_variant == "instruct" or families[0] != families[1]
    assert (first.verdict == ALLOW_WITH_WARNINGS) == expects_warning
