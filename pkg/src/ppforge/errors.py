"""Exception hierarchy shared by all ppforge modules."""


class PPForgeError(Exception):
    """Base class for all errors raised by this package."""


class PreconditionError(PPForgeError):
    """An operation was called on input that violates its contract."""


class BudgetExceeded(PPForgeError):
    """A search or materialization exceeded its node/size budget."""


class ParseError(PPForgeError):
    """Malformed input file or formula text."""

    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        if line is not None:
            message = f"{message} (line {line}" + (f", col {col})" if col is not None else ")")
        super().__init__(message)


class UnknownRelation(PPForgeError):
    """A formula referenced a relation name absent from its environment."""


class FallbackFailed(PPForgeError):
    """The bounded fallback decomposition found no usable component."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class InternalCheckError(PPForgeError):
    """A cross-check that should hold by construction failed.

    Raised instead of returning wrong output; indicates a bug, never
    bad user input.
    """
