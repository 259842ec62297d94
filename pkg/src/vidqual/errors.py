"""Exception hierarchy.

Two broad families matter to callers (and to the CLI exit codes):
``DataError`` for malformed or inconsistent inputs, ``InvariantViolation``
for model files or states that break a documented invariant.
"""


class VidqualError(Exception):
    """Base class for every error raised by this package."""


class DataError(VidqualError):
    """Input data is malformed, missing, or inconsistent."""


class MalformedHello(DataError):
    """A TLS ClientHello length field overruns the buffer or the structure is inconsistent."""


class TruncatedHello(MalformedHello):
    """The ClientHello is cut short; more bytes might complete it."""


class RecordFormatError(DataError):
    """A packet record file (JSONL or pcap) cannot be decoded."""


class EmptyInput(DataError, ValueError):
    pass


class InsufficientData(DataError, ValueError):
    pass


class MissingQuality(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class ConfigMismatch(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class EmptyModel(DataError):
    pass


class LengthMismatch(DataError, ValueError):
    pass


class InvalidSpec(DataError, ValueError):
    pass


class IoFailure(DataError, OSError):
    pass


class ModelUnloaded(VidqualError):
    pass


class InvariantViolation(VidqualError):
    pass


class NonMonotoneTime(InvariantViolation, ValueError):
    pass
