"""Error taxonomy shared by all modules.

Exit-code contract: usage errors (bad flags, unknown subcommand) exit 2,
which argparse produces on its own; everything below maps to exit 1.
"""


class SelectionPError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SelectionPError):
    """Invalid configuration value (bad ratio, segment length, mode...)."""


class ContractViolation(SelectionPError):
    """Caller broke an operation precondition (shape/length mismatch)."""


class DataError(SelectionPError):
    """Malformed or out-of-vocabulary input data."""


class LengthError(SelectionPError):
    """Input exceeds the model's maximum sequence length."""
