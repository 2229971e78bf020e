"""Exception types shared across the package."""


class FlowsegError(Exception):
    """Base class for all flowseg errors."""


class ShapeError(FlowsegError):
    """Operands have incompatible shapes."""


class DomainError(FlowsegError):
    """A value lies outside an operation's numeric domain."""


class ContractError(FlowsegError):
    """A precondition of an operation was violated."""


class DataError(FlowsegError):
    """Input data (labels, files) is malformed."""


class ConfigError(FlowsegError):
    """Invalid configuration.  CLI exit code 2."""


class NumericError(FlowsegError):
    """Non-finite value encountered during training.  CLI exit code 3."""
