"""Exception hierarchy shared by all resforge modules."""

from __future__ import annotations


class ResforgeError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(ResforgeError):
    """A file (archive container, JSONL corpus, config) is malformed."""


class CompatibilityError(ResforgeError):
    """Two checkpoints cannot be combined under the requested policy."""

    def __init__(self, message: str, mismatches=None):
        super().__init__(message)
        self.mismatches = list(mismatches) if mismatches else []


class NonFiniteError(ResforgeError):
    """Tensor arithmetic produced (or received) NaN/inf values.

    ``records`` holds one ``(tensor_name, count, first_flat_index)`` triple
    per offending tensor.
    """

    def __init__(self, message: str, records=None):
        super().__init__(message)
        self.records = list(records) if records else []


class PackingError(ResforgeError):
    """Corpus packing preconditions were violated."""
