"""Exception hierarchy shared across the package."""


class LenPruneError(Exception):
    """Base class for all package errors."""


class ConfigError(LenPruneError, ValueError):
    """Invalid configuration or degenerate parameters."""


class InputError(LenPruneError, ValueError):
    """Malformed input data (bad token ids, misaligned sequences)."""


class TrainingError(LenPruneError, RuntimeError):
    """Training aborted (NaN loss, failed warm-start gate)."""

    def __init__(self, message, dump_path=None, partial=None):
        super().__init__(message)
        self.dump_path = dump_path
        self.partial = partial


class TransportError(LenPruneError, RuntimeError):
    """Endpoint unreachable or exhausted its retries."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class AuthError(TransportError):
    """Missing or rejected credentials. Never retried."""


class MalformedResponseError(TransportError):
    """Endpoint returned a payload we could not interpret."""

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw


class CapabilityError(TransportError):
    """Endpoint lacks a required feature (e.g. echoed log-probs)."""


class ParseError(LenPruneError, ValueError):
    """An LLM response could not be parsed; the raw text is retained."""

    def __init__(self, message, raw=""):
        super().__init__(message)
        self.raw = raw
