"""Exception hierarchy shared by all paircal modules."""

from __future__ import annotations

from dataclasses import dataclass


class PaircalError(Exception):
    """Base class for every error raised by the package."""


class InputError(PaircalError):
    """Bad input data or configuration (CLI exit code 1)."""


class NumericalError(PaircalError):
    """A numerical procedure failed (CLI exit code 2)."""


@dataclass(frozen=True)
class Issue:
    kind: str
    message: str
    pair_id: str | None = None
    role: str | None = None

    def __str__(self) -> str:
        where = []
        if self.pair_id is not None:
            where.append(f"pair {self.pair_id}")
        if self.role is not None:
            where.append(self.role)
        prefix = f"[{', '.join(where)}] " if where else ""
        return f"{self.kind}: {prefix}{self.message}"


class ValidationError(InputError):
    """Aggregated study validation failure.

    ``issues`` holds every problem found, not just the first one. The concrete
    subclass raised matches the kind of the first issue.
    """

    def __init__(self, issues: list[Issue]):
        self.issues = list(issues)
        super().__init__("\n".join(str(i) for i in self.issues))


class MissingArm(ValidationError):
    pass


class TooFewPatients(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class DuplicatePair(ValidationError):
    pass


class ParseError(InputError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)


class NegativeVariance(InputError):
    pass


class UnknownFormat(InputError):
    pass


class ConfigError(InputError):
    pass


class TooFewPairs(InputError):
    pass


class TooManyPairs(InputError):
    pass


class RankDeficient(NumericalError):
    def __init__(self, columns: list[str]):
        self.columns = list(columns)
        super().__init__("design matrix is rank deficient; collinear columns: " + ", ".join(self.columns))


class NoConvergence(NumericalError):
    def __init__(self, message: str, trace: list[float] | None = None):
        self.trace = list(trace or [])
        super().__init__(message)


class ZeroPooledSD(NumericalError):
    pass


class ZeroVariance(NumericalError):
    pass


class DegenerateVariances(NumericalError):
    pass


_ISSUE_CLASSES = {
    "MissingArm": MissingArm,
    "TooFewPatients": TooFewPatients,
    "SchemaMismatch": SchemaMismatch,
    "DuplicatePair": DuplicatePair,
}


def raise_issues(issues: list[Issue]) -> None:
    if not issues:
        return
    cls = _ISSUE_CLASSES.get(issues[0].kind, ValidationError)
    raise cls(issues)
