"""Exception hierarchy shared across the package."""


class LenoError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LenoError, ValueError):
    pass


class DomainError(LenoError, ValueError):
    pass


class ContractError(LenoError, ValueError):
    pass


class ConfigError(LenoError, ValueError):
    pass


class NonFiniteError(LenoError, ArithmeticError):
    pass


class AttackError(LenoError, RuntimeError):
    pass


class DatasetError(LenoError, IOError):
    pass


class CheckpointError(LenoError, IOError):
    pass


class MagicError(CheckpointError):
    pass


class CRCError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass
