"""Exception hierarchy shared by the services and the command-line front end."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:  # pragma: no cover
    from services.traces import RunTrace


class LabError(Exception):
    """Base class for every error raised by the lab."""


class ConfigError(LabError, ValueError):
    """An experiment file failed to parse or validate."""

    def __init__(
        self,
        message: str,
        *,
        field: str | None = None,
        line: int | None = None,
        path: str | None = None,
    ) -> None:
        self.message = message
        self.field = field
        self.line = line
        self.path = path
        super().__init__(self.render())

    def render(self) -> str:
        location = self.path or "<config>"
        if self.line is not None:
            location = f"{location}:{self.line}"
        if self.field:
            return f"{location}: {self.field}: {self.message}"
        return f"{location}: {self.message}"


class InvalidParameterError(LabError, ValueError):
    """A precondition on an operation's arguments does not hold."""


class UnsupportedCompressorError(InvalidParameterError):
    """No closed form or implementation exists for the (kind, n, d) combination."""


class EnumerationTooLargeError(LabError):
    """The exhaustive randomness space exceeds the configured limit."""

    def __init__(self, size: int, limit: int) -> None:
        self.size = size
        self.limit = limit
        super().__init__(f"Enumeration space of {size} outcomes exceeds the limit of {limit}")


class NonConvergenceError(LabError, ArithmeticError):
    """An iterative solver did not reach its tolerance."""


class IdxFormatError(LabError, ValueError):
    """An IDX container is malformed."""


class TaskFormatError(LabError, ValueError):
    """A serialized task artifact is malformed or of an unknown version."""


class DivergenceError(LabError, ArithmeticError):
    """Iterates left the finite region; the partial trace is kept for inspection."""

    def __init__(self, round_: int, reason: str, trace: "RunTrace | None" = None) -> None:
        self.round = round_
        self.reason = reason
        self.trace = trace
        super().__init__(f"Run diverged at round {round_}: {reason}")


class FingerprintMismatchError(LabError):
    """Traces produced on different tasks were handed to a comparison."""

    def __init__(self, fingerprints: dict[str, Any]) -> None:
        self.fingerprints = fingerprints
        listed = ", ".join(f"{run}={fp}" for run, fp in sorted(fingerprints.items()))
        super().__init__(f"Traces do not share a task fingerprint: {listed}")
