# backend/errors.py

"""
Exception hierarchy for pedalign.

Domain errors subclass ValueError so callers that only know the builtin
types still catch them; I/O and configuration problems are kept apart so
the CLI can map them to a different exit code.
"""


class PedalignError(Exception):
    """Base class for every error raised by this package."""


# --- I/O and configuration -------------------------------------------------

class IoFailure(PedalignError, OSError):
    """A file could not be read or written."""


class ConfigError(PedalignError):
    """Configuration file or override is invalid."""


# --- schema ----------------------------------------------------------------

class SchemaError(PedalignError, ValueError):
    """A conversation record does not follow the tutor schema."""


class NonObjectInput(SchemaError):
    def __init__(self, got):
        self.got = got
        super().__init__(f"Expected a key/value object, got {type(got).__name__}")


class MissingField(SchemaError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"Missing field: {name}")


class UnknownCode(SchemaError):
    def __init__(self, field, value):
        self.field = field
        self.value = value
        super().__init__(f"Unknown code for {field}: {value!r}")


class MalformedRecord(SchemaError):
    """A line of a conversation file could not be decoded."""

    def __init__(self, line_no, reason):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"Line {line_no}: {reason}")


# --- preference data -------------------------------------------------------

class TurnOutOfRange(PedalignError, IndexError):
    def __init__(self, turn, n_turns):
        self.turn = turn
        self.n_turns = n_turns
        super().__init__(f"Turn {turn} outside 1..{n_turns}")


class MisalignedStreams(PedalignError, ValueError):
    """Tutor and SFT streams do not describe the same conversations."""


class MissingSolution(PedalignError, KeyError):
    def __init__(self, subproblem):
        self.subproblem = subproblem
        super().__init__(f"No solution for subproblem: {subproblem!r}")

    def __str__(self):
        return self.args[0]


class InsufficientCorpus(PedalignError, ValueError):
    def __init__(self, needed, available):
        self.needed = needed
        self.available = available
        super().__init__(f"Split needs {needed} conversations, corpus has {available}")


# --- numerics --------------------------------------------------------------

class EmptyBatch(PedalignError, ValueError):
    pass


class EmptyDataset(PedalignError, ValueError):
    pass


class EmptyInput(PedalignError, ValueError):
    pass


class EmptyTokens(PedalignError, ValueError):
    pass


class PositiveLogProb(PedalignError, ValueError):
    def __init__(self, value):
        self.value = value
        super().__init__(f"Log-probability must be <= 0, got {value}")


class ShapeMismatch(PedalignError, ValueError):
    pass


class InvalidBeta(PedalignError, ValueError):
    def __init__(self, value):
        self.value = value
        super().__init__(f"Beta must be > 0, got {value}")
