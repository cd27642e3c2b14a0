"""Exception hierarchy; each class carries the CLI exit code for its category.

Exit code 2 is left to command-line usage errors.
"""


class EdpaError(Exception):
    exit_code = 1


class FormatError(EdpaError):
    exit_code = 3


class ConfigError(EdpaError):
    exit_code = 4


class DivergenceError(EdpaError):
    exit_code = 5


class ShapeError(EdpaError, ValueError):
    exit_code = 6


class DomainError(EdpaError, ValueError):
    exit_code = 6
