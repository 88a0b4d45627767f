"""resforge: checkpoint arithmetic, corpus packing, and compute budgeting.

A toolkit for extracting instruction residuals (the element-wise weight
difference between an instruction-tuned model and its base model),
re-applying them to a continually-pre-trained base model, packing token
corpora into fixed-length training sequences with per-document attention
boundaries, and accounting for training FLOPs.
"""

__version__ = "0.1.0"

from .archive import (  # noqa: E402
    ArchiveReader,
    ArchiveWriter,
    ModelSignature,
    SignatureEntry,
    TensorRecord,
    open_archive,
    signature_of,
    write_archive,
)
from .dtypes import Dtype  # noqa: E402
from .errors import (  # noqa: E402
    CompatibilityError,
    FormatError,
    NonFiniteError,
    PackingError,
    ResforgeError,
)
from .residual import (  # noqa: E402
    CompatReport,
    DiffReport,
    MergePolicy,
    Mismatch,
    ResidualSet,
    apply_residual,
    check_compat,
    diff_report,
    extract_residual,
)

__all__ = [
    "ArchiveReader",
    "ArchiveWriter",
    "CompatReport",
    "CompatibilityError",
    "DiffReport",
    "Dtype",
    "FormatError",
    "MergePolicy",
    "Mismatch",
    "ModelSignature",
    "NonFiniteError",
    "PackingError",
    "ResforgeError",
    "ResidualSet",
    "SignatureEntry",
    "TensorRecord",
    "apply_residual",
    "check_compat",
    "diff_report",
    "extract_residual",
    "open_archive",
    "signature_of",
    "write_archive",
    "__version__",
]
