"""Exception hierarchy shared by every layer of the engine."""


class HedbError(Exception):
    """Base class; ``code`` is the machine-readable name used on the wire."""

    code = "Error"


class NoiseOverflow(HedbError):
    code = "NoiseOverflow"


class BootstrapUnavailable(HedbError):
    code = "BootstrapUnavailable"


class KeyFormatError(HedbError):
    code = "KeyFormatError"


class ValueOverflow(HedbError):
    code = "ValueOverflow"


class InvalidCharacter(HedbError):
    code = "InvalidCharacter"


class MalformedHeader(HedbError):
    code = "MalformedHeader"


class TruncatedPayload(HedbError):
    code = "TruncatedPayload"


class SchemaMismatch(HedbError):
    code = "SchemaMismatch"


class InvalidSchema(HedbError):
    code = "InvalidSchema"


class WidthMismatch(HedbError):
    code = "WidthMismatch"


class PatternTooLong(HedbError):
    code = "PatternTooLong"


class QuerySyntaxError(HedbError):
    code = "SyntaxError"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedFeature(QuerySyntaxError):
    code = "UnsupportedFeature"


class ValidationError(HedbError):
    code = "ValidationError"


class UnknownColumn(ValidationError):
    code = "UnknownColumn"


class TypeMismatch(ValidationError):
    code = "TypeMismatch"


class BadPattern(ValidationError):
    code = "BadPattern"


class PartialUpdateUnsupported(ValidationError):
    code = "PartialUpdateUnsupported"


class UnknownTable(HedbError):
    code = "UnknownTable"


class DuplicateTable(HedbError):
    code = "DuplicateTable"


class ShapeMismatch(HedbError):
    code = "ShapeMismatch"


class PayloadTooLarge(HedbError):
    code = "PayloadTooLarge"


class MalformedFrame(HedbError):
    code = "MalformedFrame"


class ServerError(HedbError):
    """An ERROR frame received by the client; ``code`` mirrors the server's."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
