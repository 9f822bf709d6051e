"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes or dimensions."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(RuntimeError):
    """A runtime contract was violated (missing grads, non-finite values, ...)."""


class IngestError(RuntimeError):
    """A dataset file is missing or unreadable."""


class DatasetSchemaError(IngestError):
    """On-disk data disagrees with the manifest schema."""


class DataError(IngestError):
    """Dataset content is invalid (non-finite values, bad labels, ...)."""


class ProtocolError(ValueError):
    """A split or episode protocol precondition does not hold."""


class SamplingError(RuntimeError):
    """Episode or snapshot sampling could not satisfy its quota."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or has an unsupported version."""
