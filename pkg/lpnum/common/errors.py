class LpnumError(Exception):
    pass


class FormatError(LpnumError):
    pass


class DomainError(LpnumError, ValueError):
    pass


class MissingRngError(LpnumError):

    def __str__(self) -> str:
        return "Stochastic rounding requires an RNG stream, but none was passed"


class ShapeMismatch(LpnumError):
    pass


class ContextError(LpnumError):
    pass


class InvalidScheme(LpnumError):

    def __init__(self, scheme: str = None, reason: str = None):
        self.scheme = scheme
        self.reason = reason

    def __str__(self) -> str:
        msg = f"The scheme {self.scheme + ' ' if self.scheme else ''}is invalid"
        return f"{msg}: {self.reason}" if self.reason else msg


class DatasetError(LpnumError):
    pass


class TruncatedFile(DatasetError):

    def __init__(self, path: str = None, expected: int = 0, actual: int = 0):
        self.path = path
        self.expected = expected
        self.actual = actual

    def __str__(self) -> str:
        return (f"The file {self.path} is truncated at offset {self.actual}: "
                f"expected {self.expected} bytes, found {self.actual}")


class CheckpointError(LpnumError):
    pass


class CostTableError(LpnumError):

    def __init__(self, entry: str = None, source: str = None):
        self.entry = entry
        self.source = source

    def __str__(self) -> str:
        where = f" in {self.source}" if self.source else ""
        return f"The cost table{where} has no entry for '{self.entry}'"


class ConformanceFailure(LpnumError):

    def __init__(self, suite: str = None, detail: str = None, seed: int = None):
        self.suite = suite
        self.detail = detail
        self.seed = seed

    def __str__(self) -> str:
        return f"Conformance suite '{self.suite}' failed (seed={self.seed}): {self.detail}"
