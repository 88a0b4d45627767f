"""Floating-point dtypes supported by the archive container.

bf16 has no native numpy dtype, so it is carried as raw uint16 bit
patterns on disk and expanded to float32 (exactly representable) for any
arithmetic.
"""

from __future__ import annotations

import enum
import math
from typing import Sequence

import numpy as np

from .errors import FormatError


class Dtype(enum.Enum):
    """Element type of a stored tensor, keyed by its wire name."""

    F64 = ("F64", 8)
    F32 = ("F32", 4)
    BF16 = ("BF16", 2)
    F16 = ("F16", 2)

    def __init__(self, wire_name: str, byte_width: int):
        self.wire_name = wire_name
        self.byte_width = byte_width

    @classmethod
    def from_wire(cls, name: str) -> "Dtype":
        for member in cls:
            if member.wire_name == name:
                return member
        raise FormatError(f"unknown dtype {name!r}")

    @classmethod
    def parse(cls, name: str) -> "Dtype":
        """Accept either wire names ("F32") or lowercase aliases ("f32")."""
        try:
            return cls.from_wire(name.upper())
        except FormatError:
            raise ValueError(f"unknown dtype {name!r}") from None


# Native numpy equivalents; BF16 is handled separately.
_NUMPY_DTYPES = {
    Dtype.F64: np.dtype("<f8"),
    Dtype.F32: np.dtype("<f4"),
    Dtype.F16: np.dtype("<f2"),
}

_BF16_QUIET_NAN = np.uint16(0x7FC0)


def element_count(shape: Sequence[int]) -> int:
    return math.prod(shape)


def payload_nbytes(dtype: Dtype, shape: Sequence[int]) -> int:
    return element_count(shape) * dtype.byte_width


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    """Expand raw bf16 bit patterns (uint16) to float32, losslessly."""
    return (bits.astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round float32 down to bf16 bit patterns (round-to-nearest-even).

    NaNs map to a sign-preserving quiet NaN instead of being rounded,
    which could otherwise turn a NaN payload into infinity.
    """
    values = np.ascontiguousarray(values, dtype=np.float32)
    bits = values.view(np.uint32)
    rounding_bias = ((bits >> 16) & 1) + np.uint32(0x7FFF)
    rounded = ((bits + rounding_bias) >> 16).astype(np.uint16)
    nan_mask = np.isnan(values)
    if nan_mask.any():
        sign = (bits[nan_mask] >> 16).astype(np.uint16) & np.uint16(0x8000)
        rounded[nan_mask] = sign | _BF16_QUIET_NAN
    return rounded


def decode(data: bytes, dtype: Dtype, shape: Sequence[int]) -> np.ndarray:
    """Decode a raw little-endian payload into an array ready for arithmetic.

    f64/f32/f16 come back in their native numpy dtype; bf16 comes back as
    float32 (an exact superset), since numpy has no bf16.
    """
    expected = payload_nbytes(dtype, shape)
    if len(data) != expected:
        raise FormatError(
            f"payload is {len(data)} bytes, expected {expected} for "
            f"{dtype.wire_name} {list(shape)}"
        )
    if dtype is Dtype.BF16:
        bits = np.frombuffer(data, dtype="<u2")
        return bf16_bits_to_f32(bits).reshape(shape)
    return np.frombuffer(data, dtype=_NUMPY_DTYPES[dtype]).reshape(shape).copy()


def encode(values: np.ndarray, dtype: Dtype) -> bytes:
    """Cast a float array to ``dtype`` and serialize it row-major little-endian.

    Casting to bf16 from float64 rounds through float32 first.
    """
    values = np.ascontiguousarray(values)
    # Overflowing casts produce inf on purpose; callers inspect the result
    # and fail with the offending tensors named.
    with np.errstate(over="ignore"):
        if dtype is Dtype.BF16:
            return f32_to_bf16_bits(values.astype(np.float32)).tobytes(order="C")
        return values.astype(_NUMPY_DTYPES[dtype]).tobytes(order="C")


def storage_view(data: bytes, dtype: Dtype, shape: Sequence[int]) -> np.ndarray:
    """Like :func:`decode` but without copying native-dtype payloads.

    Used for finiteness checks on freshly encoded payloads.
    """
    if dtype is Dtype.BF16:
        bits = np.frombuffer(data, dtype="<u2")
        return bf16_bits_to_f32(bits).reshape(shape)
    return np.frombuffer(data, dtype=_NUMPY_DTYPES[dtype]).reshape(shape)
