"""Exception types shared across the package."""


class UwbFuseError(Exception):
    """Base class for all package-specific errors."""


class StructuralError(UwbFuseError):
    """Problem wiring is inconsistent (unknown block id, dimension mismatch)."""


class NumericalFailure(UwbFuseError):
    """Residual or Jacobian evaluation produced non-finite or undefined values."""


class DegenerateGeometry(UwbFuseError):
    """Geometric configuration at which a residual or its Jacobian is undefined."""


class OutOfRange(UwbFuseError):
    """Interpolation query outside the trajectory's time span."""

    def __init__(self, t: float, span: tuple | None = None):
        self.t = t
        self.span = span
        msg = f"time {t!r} outside trajectory span"
        if span is not None:
            msg += f" [{span[0]!r}, {span[1]!r}]"
        super().__init__(msg)


class ParseError(UwbFuseError):
    """Malformed input file."""

    def __init__(self, path, line: int | None, reason: str):
        self.path = str(path)
        self.line = line
        self.reason = reason
        where = f"{path}" if line is None else f"{path}:{line}"
        super().__init__(f"{where}: {reason}")


class DuplicateTimestamp(ParseError):
    """Two records carry the same timestamp where strict ordering is required."""


class VersionMismatch(UwbFuseError):
    """Document format version is not supported."""


class InsufficientData(UwbFuseError):
    """An anchor has too few usable measurements for a 3D position fix."""

    def __init__(self, anchor_id, count: int, needed: int):
        self.anchor_id = anchor_id
        self.count = count
        self.needed = needed
        super().__init__(
            f"anchor {anchor_id!r} has {count} usable measurements, needs >= {needed}"
        )


class NoOverlap(UwbFuseError):
    """No measurement (or pose pair) falls inside the common time span."""


class InsufficientInit(UwbFuseError):
    """Too few stationary measurements / anchors to initialize the pose."""


class WindowUnderflow(UwbFuseError):
    """Sliding window holds fewer than two poses."""


class ConfigError(UwbFuseError):
    """Invalid or infeasible configuration."""


class TooFewPairs(UwbFuseError):
    """Fewer than the minimum number of associated pose pairs for evaluation."""
