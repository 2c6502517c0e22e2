"""Exception hierarchy shared by every component."""


class HybridError(Exception):
    """Base class for all errors raised by hybridrec."""


class PreconditionError(HybridError, ValueError):
    pass


class ConfigError(HybridError, ValueError):
    """Invalid configuration. ``line`` is set when the error comes from a file."""

    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        where = ""
        if path is not None and line is not None:
            where = f"{path}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class DivergenceError(HybridError, ArithmeticError):
    pass


class InternalConsistencyError(HybridError, RuntimeError):
    pass


class UndefinedMetricError(HybridError, ValueError):
    pass


class CheckpointCorruptError(HybridError):
    pass


class ProtocolError(HybridError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CorruptPayloadError(ProtocolError):
    pass


class TransportError(HybridError, ConnectionError):
    """Endpoint unreachable. ``retriable`` marks timeouts."""

    def __init__(self, message, retriable=False):
        self.retriable = retriable
        super().__init__(message)


class RemoteError(HybridError):
    """An endpoint answered with an Error frame of an unmapped kind."""


class BackpressureError(HybridError):
    pass


class StaleSampleError(HybridError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class WouldBlock(HybridError):
    pass


class SyncFailureError(HybridError):
    pass


class ConsistencyError(HybridError):
    pass


class ClockError(HybridError):
    pass


class UnrecoverableRunError(HybridError):
    pass
