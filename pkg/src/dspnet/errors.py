"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes, so new error paths should reuse
one of these classes rather than raising bare ValueError.
"""


class DspnetError(Exception):
    """Base class for all package errors."""


class DimensionError(DspnetError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(DspnetError):
    """An operation precondition was violated (non-scalar loss, tape mixing, ...)."""


class DegenerateBatchError(DspnetError):
    """Batch statistics requested on a batch of fewer than 2 samples."""


class NonFiniteError(DspnetError):
    """A forward result contained NaN/Inf; the step is aborted, not propagated."""


class ConfigError(DspnetError):
    """Invalid run configuration, family definition, or CLI flags."""


class FormatError(DspnetError):
    """Malformed external input file (IDX dataset, config file)."""


class CheckpointError(DspnetError):
    """Corrupt or unreadable checkpoint (bad magic, CRC mismatch, truncation)."""


class MetricsError(DspnetError):
    """Malformed or empty metrics CSV."""
