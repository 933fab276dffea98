"""Exception hierarchy. Every error the CLI can surface derives from HOIError."""


class HOIError(Exception):
    pass


class DegenerateRotation(HOIError, ValueError):
    pass


class InvalidRotationMatrix(HOIError, ValueError):
    pass


class ShapeMismatch(HOIError, ValueError):
    pass


class InvalidInput(HOIError, ValueError):
    pass


class InvalidLength(HOIError, ValueError):
    pass


class InvalidHandType(HOIError, ValueError):
    pass


class InvalidConfig(HOIError, ValueError):
    pass


class ConfigError(HOIError, RuntimeError):
    pass


class JointLimitViolation(HOIError, ValueError):
    pass


class EmptyGeometry(HOIError, ValueError):
    pass


class InvalidGeometry(HOIError, ValueError):
    pass


class InvalidTimestep(HOIError, ValueError):
    pass


class NumericalError(HOIError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class AssemblyError(HOIError, ValueError):
    pass


class InsufficientFrames(HOIError, ValueError):
    pass


class InsufficientSamples(HOIError, ValueError):
    pass


class DependencyError(HOIError, RuntimeError):
    pass


class ParseError(HOIError, ValueError):
    pass


class FileNotFound(HOIError, FileNotFoundError):
    pass
