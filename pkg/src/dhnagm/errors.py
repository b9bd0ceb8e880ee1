"""Exception types raised across the package."""

from __future__ import annotations


class DhnError(Exception):
    """Base class for all package errors."""


class ConfigError(DhnError, ValueError):
    """Invalid network, scenario or experiment description."""


class DuplicateId(ConfigError):
    pass


class DanglingReference(ConfigError):
    pass


class MassImbalance(ConfigError):
    def __init__(self, node, imbalance, message=None):
        self.node = node
        self.imbalance = imbalance
        super().__init__(
            message or f"mass imbalance of {imbalance:.6g} kg/s at node {node!r}"
        )


class NonTreeRouting(ConfigError):
    def __init__(self, source, load, message=None):
        self.source = source
        self.load = load
        super().__init__(
            message
            or f"supply graph has more than one path from source {source!r} to {load!r}"
        )


class DisconnectedNode(ConfigError):
    pass


class ZeroMassFlow(ConfigError):
    pass


class HorizonTooShort(DhnError, ValueError):
    pass


class EmptyPath(DhnError, ValueError):
    pass


class ShapeMismatch(DhnError, ValueError):
    pass


class InsufficientData(DhnError, ValueError):
    """Not enough samples to build the requested regression or split."""

    def __init__(self, message, needed=None, available=None, channel=None):
        self.needed = needed
        self.available = available
        self.channel = channel
        super().__init__(message)


class MissingChannel(InsufficientData):
    pass


class DegenerateProblem(DhnError, ArithmeticError):
    pass


class NotConverged(DhnError, RuntimeError):
    """IRLS hit its iteration cap; ``result`` holds the last iterate."""

    def __init__(self, result, message=None):
        self.result = result
        super().__init__(
            message or f"IRLS did not converge in {result.iterations} iterations"
        )


class MapeUndefined(DhnError, ZeroDivisionError):
    pass


class R2Undefined(DhnError, ZeroDivisionError):
    pass


class ParseError(DhnError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class InfeasibleBounds(DhnError, ValueError):
    pass


class Infeasible(DhnError, RuntimeError):
    pass


class MaxIterations(DhnError, RuntimeError):
    pass
