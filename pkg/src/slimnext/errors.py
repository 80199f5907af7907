"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, ContractError
subclasses exit 2, FormatError/IO problems exit 3.
"""


class SlimnextError(Exception):
    """Base class for all package errors."""


class ContractError(SlimnextError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Tensor extents inconsistent with an operation's contract."""


class ConfigError(ContractError):
    """Invalid model/training/dataset configuration."""


class DegenerateWidthError(ContractError):
    """A slimming ratio would leave a block with zero channels."""


class ChannelOverflowError(ContractError):
    """A residual branch is wider than the skip it must pad up to."""


class SearchInfeasibleError(SlimnextError):
    """No block can be reduced further but the target mean ratio is unmet."""


class TrainingAborted(SlimnextError):
    """Training hit a non-finite loss; message carries step diagnostics."""


class FormatError(SlimnextError):
    """A persisted file has bad magic, version, or structure."""


class IntegrityError(FormatError):
    """A persisted file is truncated or fails its checksum."""
