"""Error taxonomy shared across the package.

The CLI maps these onto categorized exit codes (config / data / numeric);
library code raises them directly.
"""


class DistillVCError(Exception):
    """Base class for all package errors."""


class ParameterError(DistillVCError):
    """Invalid argument: out-of-range step index, shape mismatch, bad preset."""


class ConfigError(DistillVCError):
    """Malformed or inconsistent run configuration."""


class FormatError(DistillVCError):
    """Unreadable or malformed file: WAV, mel matrix, manifest, checkpoint."""


class DataError(DistillVCError):
    """Missing or inconsistent artifact: absent checkpoint, empty corpus, bad split."""


class NumericError(DistillVCError):
    """Non-finite loss, divergence, or failed numerical validation."""


class ContractError(DistillVCError):
    """Violation of an operation contract: frozen parameters mutated,
    nonzero noise at the final reverse step, and similar."""
