"""Exception hierarchy shared by all modules."""


class PLDRError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PLDRError, ValueError):
    """Operand shapes are incompatible."""


class InputError(PLDRError, ValueError):
    """Operand values violate an operation's precondition."""


class ContractError(PLDRError, ValueError):
    """A caller-side contract was broken (e.g. a fully masked row)."""


class ConfigError(PLDRError, ValueError):
    """Invalid configuration key or value."""


class TokenizerFileError(PLDRError, ValueError):
    """Vocabulary file is malformed or inconsistent with the model."""


class CheckpointError(PLDRError):
    """Checkpoint cannot be read or does not match the requested config."""


class DagOverflowError(PLDRError, FloatingPointError):
    """A regularized DAG-loss term overflowed during training."""
