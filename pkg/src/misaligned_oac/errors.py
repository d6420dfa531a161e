"""Exception hierarchy shared by every module."""


class OACError(Exception):
    """Base class for all errors raised by misaligned_oac."""


class EmptyDeviceList(OACError, ValueError):
    pass


class OffsetOutOfRange(OACError, ValueError):
    pass


class ZeroSignalPower(OACError, ValueError):
    pass


class ShapeMismatch(OACError, ValueError):
    pass


class ZeroNoise(OACError, ValueError):
    pass


class SingularMarginalization(OACError, ArithmeticError):
    pass


class RankDeficientMarginal(OACError, ArithmeticError):
    pass


class SingularModel(OACError, ArithmeticError):
    pass


class LengthMismatch(OACError, ValueError):
    pass


class InsufficientData(OACError, ValueError):
    pass


class ConfigParse(OACError, ValueError):
    """Malformed experiment configuration.

    ``line`` and ``key`` locate the offending entry when known.
    """

    def __init__(self, message, *, line=None, key=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.key = key


class SchemaMismatch(OACError, ValueError):
    pass
