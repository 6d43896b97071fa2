class GradShieldError(Exception):
    """Base class for all package errors."""


class ShapeError(GradShieldError, ValueError):
    def __init__(self, message: str, layer: str | None = None):
        self.layer = layer
        prefix = f"layer {layer!r}: " if layer else ""
        super().__init__(prefix + message)


class TraceMismatchError(GradShieldError, ValueError):
    pass


class KeyMismatchError(GradShieldError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class FormatError(GradShieldError, ValueError):
    """Malformed checkpoint or dataset file."""


class ConfigError(GradShieldError, ValueError):
    pass


class ReconstructionError(GradShieldError, ArithmeticError):
    """Raised when a closed-form inversion is not applicable (e.g. dead neuron)."""
