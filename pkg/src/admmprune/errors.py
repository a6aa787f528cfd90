"""Exception hierarchy shared across the library."""


class AdmmPruneError(Exception):
    """Base class for all library-specific errors."""


class StructureError(AdmmPruneError):
    """Model topology is inconsistent (channel counts, flatten boundary, ...)."""


class ShapeError(AdmmPruneError):
    """Tensor shapes disagree where they are required to match."""


class UnknownLayerError(AdmmPruneError, KeyError):
    """A layer id does not name any conv layer of the model."""


class NumericError(AdmmPruneError):
    """A non-finite value appeared where finite math is required.

    Carries ``layer_id`` when the offending layer is known.
    """

    def __init__(self, message, layer_id=None):
        super().__init__(message)
        self.layer_id = layer_id


class PruneSpecError(AdmmPruneError):
    """A sparsity/prune request is infeasible (e.g. would empty a layer)."""


class ConfigError(AdmmPruneError):
    """A run configuration failed validation."""


class CheckpointError(AdmmPruneError):
    """A checkpoint archive is missing, malformed, or corrupt."""


class DatasetError(AdmmPruneError):
    """Dataset files are absent or malformed."""
