"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI uses when it escapes a
subcommand.
"""


class NamestError(Exception):
    exit_code = 1


class ShapeError(NamestError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 10


class ContractError(NamestError, ValueError):
    """A documented precondition was violated."""

    exit_code = 11


class ConfigError(NamestError, ValueError):
    exit_code = 2


class MissingArtifactError(NamestError, FileNotFoundError):
    """A file produced by another subcommand does not exist."""

    exit_code = 3

    def __init__(self, path, producer):
        super().__init__(f"missing artifact {path!s}; produce it with `namest {producer}`")
        self.path = path
        self.producer = producer


class DataError(NamestError, ValueError):
    exit_code = 4


class NonFiniteGradientError(NamestError, FloatingPointError):
    exit_code = 5


class DivergenceError(NamestError, FloatingPointError):
    """Training loss became NaN or infinite."""

    exit_code = 6


class TopologyError(NamestError, ValueError):
    """Checkpoints do not share parameter names and shapes."""

    exit_code = 7
