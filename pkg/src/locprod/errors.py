"""
Error hierarchy
===============

Every failure raised by locprod derives from ``LocProdError``. Each class carries the
process exit code the CLI uses and renders a machine-readable payload.

    exit 2 - configuration or data problems
    exit 3 - numerical failures
"""

from typing import Any, Dict, Optional


class LocProdError(Exception):
    """Base class for all locprod errors"""

    exit_code = 2
    kind = "error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_payload(self) -> Dict[str, Any]:
        payload = {
            "error": self.kind,
            "type": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
        }
        if self.details:
            payload["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return payload


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)


# =============================================================================
# CONFIGURATION / DATA ERRORS (exit 2)
# =============================================================================

class ConfigError(LocProdError):
    kind = "config"


class PanelSchemaError(LocProdError):
    """A mandatory column is missing from the source"""

    kind = "data"

    def __init__(self, column: str, message: Optional[str] = None):
        super().__init__(message or f"missing required column '{column}'", column=column)
        self.column = column


class PanelParseError(LocProdError):
    """Malformed row in the source file"""

    kind = "data"

    def __init__(self, row: int, message: str, column: Optional[str] = None):
        super().__init__(f"row {row}: {message}", row=row, column=column)
        self.row = row
        self.column = column


class PanelDomainError(LocProdError):
    """A level that must be positive (before logging) is not"""

    kind = "data"

    def __init__(self, firm: Any, period: Any, column: str, value: Any):
        super().__init__(
            f"nonpositive or non-finite value {value!r} in column '{column}' "
            f"for firm {firm!r}, period {period!r}",
            firm=firm, period=period, column=column, value=value,
        )
        self.firm = firm
        self.period = period
        self.column = column


class PanelIntegrityError(LocProdError):
    kind = "data"


class BandwidthError(LocProdError):
    """Neighbor count outside [1, number of observations]"""

    kind = "config"


class DimensionMismatchError(LocProdError):
    kind = "data"


class InsufficientDataError(LocProdError):
    kind = "data"


# =============================================================================
# NUMERICAL ERRORS (exit 3)
# =============================================================================

class NumericalError(LocProdError):
    exit_code = 3
    kind = "numerical"


class ZeroWeightError(NumericalError):
    pass


class SingularDesignError(NumericalError):
    """Rank-deficient weighted design"""

    def __init__(self, condition: float, rank: int, n_params: int):
        super().__init__(
            f"weighted design is rank deficient (rank {rank} < {n_params}, "
            f"condition estimate {condition:.3g})",
            condition=condition, rank=rank, n_params=n_params,
        )
        self.condition = condition
        self.rank = rank


class InferenceError(NumericalError):
    pass


class MonteCarloFailure(NumericalError):
    pass
