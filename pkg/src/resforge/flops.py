"""Training-cost model: FLOPs = 6 * params * tokens * epochs.

The 6 FLOPs/token/parameter constant covers one forward and one backward
pass and deliberately ignores sequence-length quadratic attention terms.
All products are computed in exact integer arithmetic; ratios go through
``fractions.Fraction`` so round numbers come out exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Mapping

FLOPS_PER_PARAM_PER_TOKEN = 6

PARAMS_GUARD = 10**13  # keep products well inside 128-bit range


@dataclass(frozen=True)
class FlopsSpec:
    """One training run: parameter count, token count, epoch count."""

    params: int
    tokens: int
    epochs: int

    def __post_init__(self):
        for name in ("params", "tokens", "epochs"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValueError(f"{name} must be an integer, got {value!r}")
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.params > PARAMS_GUARD:
            raise ValueError(f"params must be <= {PARAMS_GUARD:.0e}, got {self.params}")


@dataclass(frozen=True)
class HardwareProfile:
    """Peak throughput of one accelerator, in FLOP/s per precision tag."""

    name: str
    peak_flops: Mapping[str, float]

    def __post_init__(self):
        if any(v <= 0 for v in self.peak_flops.values()):
            raise ValueError("peak_flops values must be positive")

    def peak(self, precision: str) -> float:
        try:
            return self.peak_flops[precision]
        except KeyError:
            raise ValueError(
                f"{self.name} has no peak rating for {precision!r}; "
                f"known: {sorted(self.peak_flops)}"
            ) from None


# NVIDIA A100 40GB SXM tensor-core peaks.
A100_40G = HardwareProfile(
    name="a100-40g",
    peak_flops={"bf16": 312e12, "f16": 312e12, "tf32": 156e12},
)

HARDWARE_PROFILES: Dict[str, HardwareProfile] = {A100_40G.name: A100_40G}


def flops_per_token(params: int, flops_per_param: int = FLOPS_PER_PARAM_PER_TOKEN) -> int:
    """FLOPs to train on one token: 6 * params, exactly."""
    if params < 0:
        raise ValueError(f"params must be non-negative, got {params}")
    return flops_per_param * params


def training_flops(spec: FlopsSpec, flops_per_param: int = FLOPS_PER_PARAM_PER_TOKEN) -> int:
    """Total training cost: 6 * params * tokens * epochs, exactly."""
    return flops_per_param * spec.params * spec.tokens * spec.epochs


def flops_ratio(a: FlopsSpec, b: FlopsSpec) -> float:
    """training_flops(a) / training_flops(b), exact whenever representable."""
    denominator = training_flops(b)
    if denominator == 0:
        raise ZeroDivisionError("denominator spec has zero training FLOPs")
    return float(Fraction(training_flops(a), denominator))


def wallclock_estimate(
    spec: FlopsSpec,
    hw: HardwareProfile,
    utilization: float,
    precision: str = "bf16",
) -> float:
    """Seconds to run ``spec`` on one device at the given utilization."""
    if not (0.0 < utilization <= 1.0):
        raise ValueError(f"utilization must be in (0, 1], got {utilization}")
    return training_flops(spec) / (hw.peak(precision) * utilization)


def samples_to_tokens(samples: int, max_seq_len: int) -> int:
    """Upper-bound token count: samples * max sequence length.

    Real corpora rarely fill every sequence, so treat this as a ceiling,
    not an estimate.
    """
    if samples < 0 or max_seq_len < 0:
        raise ValueError("samples and max_seq_len must be non-negative")
    return samples * max_seq_len


def parse_count(text: str) -> int:
    """Parse a human-friendly count: plain ints, 8e9, 204800M, 1.5B, 2T.

    The result must be an exact integer; "1.0000000001e9" is rejected.
    """
    text = text.strip().replace(",", "").replace("_", "")
    if not text:
        raise ValueError("empty count")
    multiplier = 1
    suffixes = {"k": 10**3, "K": 10**3, "M": 10**6, "B": 10**9, "G": 10**9, "T": 10**12}
    if text[-1] in suffixes:
        multiplier = suffixes[text[-1]]
        text = text[:-1]
    try:
        value = Fraction(text) * multiplier
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"cannot parse count {text!r}") from exc
    if value.denominator != 1:
        raise ValueError(f"count {text!r} is not an integer")
    return int(value)
