"""Exception types shared across the package."""


class ScoopGpError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(ScoopGpError, ValueError):
    """Array or parameter-vector dimensions do not match a network spec."""


class NumericalError(ScoopGpError, ArithmeticError):
    """Linear algebra failed beyond recoverable jitter."""


class ConfigError(ScoopGpError, ValueError):
    """Invalid configuration or configuration file."""


class SerializationError(ScoopGpError, ValueError):
    """Malformed checkpoint or container file."""


class IngestError(ScoopGpError, ValueError):
    """Dataset file violates the canonical schema.

    Carries enough context to point at the offending record.
    """

    def __init__(self, message: str, path: str = "", line: int = 0, field: str = ""):
        parts = [message]
        if path:
            parts.append(f"file={path}")
        if line:
            parts.append(f"line={line}")
        if field:
            parts.append(f"field={field}")
        super().__init__(" | ".join(parts))
        self.path = path
        self.line = line
        self.field = field


class SelectionError(ScoopGpError, RuntimeError):
    """Action selection has no feasible candidate."""
