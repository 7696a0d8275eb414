"""Exception types raised across the engine."""


class EngineError(Exception):
    pass


class DimensionError(EngineError, ValueError):
    pass


class RangeError(EngineError, ValueError):
    pass


class FormatError(EngineError, ValueError):
    """Malformed binary tensor or parameter stream."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ShapeError(EngineError, ValueError):
    pass


class ParameterError(EngineError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConsistencyError(EngineError, RuntimeError):
    pass


class PlanError(EngineError, ValueError):
    pass


class LabelError(EngineError, ValueError):
    pass


class CoverageError(EngineError, ValueError):
    pass


class TieError(EngineError, RuntimeError):
    pass


class UnsupportedError(EngineError, NotImplementedError):
    pass


class ParseError(EngineError, ValueError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class DuplicateNameError(FormatError):
    def __init__(self, name):
        super().__init__("name", f"duplicate entry {name!r}")
        self.name = name
