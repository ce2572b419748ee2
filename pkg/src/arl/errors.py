"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes, so new failure modes should
reuse one of the classes below rather than raising bare ValueErrors.
"""


class ArlError(Exception):
    """Base class for all package errors."""


class DimensionError(ArlError):
    """Tensor shapes or axes are incompatible for the requested op."""


class ContractError(ArlError):
    """An API precondition was violated by the caller."""


class CapacityError(ArlError):
    """A dataset or sampler cannot satisfy the requested sizes."""


class FormatError(ArlError):
    """An on-disk artifact (manifest, CSV, config, checkpoint) is malformed."""


class ConfigError(ArlError):
    """A run configuration is invalid or contains unknown keys."""


class StatsUninitializedError(ArlError):
    """Eval-mode batch norm was invoked before running stats were ever set."""


class NonFiniteLossError(ArlError):
    """Training produced a NaN/Inf loss; carries the failing iteration."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite-loss(iteration={iteration})")
        self.iteration = iteration


class DescriptorMismatchError(ArlError):
    """A checkpoint's architecture descriptor disagrees with the dataset."""
