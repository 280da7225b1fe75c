"""Exception types raised across the package."""


class MapParseError(ValueError):
    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", col {col})" if col is not None else ")")
        super().__init__(message + where)


class MalformedHeader(MapParseError):
    pass


class RaggedRows(MapParseError):
    pass


class UnknownGlyph(MapParseError):
    pass


class InsufficientFreeCells(ValueError):
    pass


class InvalidActionIndex(ValueError):
    pass


class EpisodeFinished(RuntimeError):
    pass


class NoPath(Exception):
    pass


class ShapeMismatch(ValueError):
    pass


class NameMismatch(KeyError):
    pass


class LengthMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class UnknownKey(KeyError):
    pass


class ConfigTypeError(TypeError):
    def __init__(self, key, value, expected):
        self.key = key
        super().__init__(f"{key}: cannot interpret {value!r} as {expected}")


class MissingCheckpoint(FileNotFoundError):
    pass


class CorruptManifest(ValueError):
    pass
