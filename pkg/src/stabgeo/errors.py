"""Exception and warning types raised across the package."""


class StabGeoError(Exception):
    """Base class for all package errors."""


class CliqueCapExceeded(StabGeoError):
    """A clique larger than the configured cap exists; the Euler sum would be truncated."""

    def __init__(self, cap: int):
        super().__init__(f"clique of size {cap + 2} found; raise clique_cap above {cap}")
        self.cap = cap


class KnnUndefined(StabGeoError):
    """The k-NN graph is undefined because 2 <= |P| <= k."""


class NotCertifiable(StabGeoError):
    """No radius on the schedule satisfied the stabilization criterion."""


class ConvergenceNotReached(StabGeoError):
    """Doubling the truncation radius still changed the value at the end of the schedule."""


class DegenerateFit(StabGeoError):
    """Tail fit impossible because the samples carry no spread."""


class DegenerateSample(StabGeoError):
    """Sample standard deviation is zero, so standardization is impossible."""


class ConfigParseError(StabGeoError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{loc}")
        self.line = line
        self.column = column


class ConfigValidationError(StabGeoError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class NonPositiveEstimate(UserWarning):
    """A second-moment estimate came out <= 0 (sampling noise on a near-degenerate functional)."""
