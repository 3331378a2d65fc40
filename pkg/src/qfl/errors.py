"""Exception hierarchy shared by every qfl module."""


class QflError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(QflError, ValueError):
    """Invalid configuration, architecture, or call arguments."""


class ShapeError(QflError, ValueError):
    """Input dimensions do not match what the architecture expects."""


class NumericError(QflError, ArithmeticError):
    """Non-finite values appeared during training."""


class StaleCacheError(QflError, RuntimeError):
    """A forward cache was used with parameters or a batch it was not built from."""


class FormatError(QflError, ValueError):
    """Malformed binary payload (bad magic or inconsistent framing)."""


class LengthError(FormatError):
    """Payload is shorter or longer than its header declares."""


class VersionError(FormatError):
    """Unknown wire-format version."""


class KeyMaterialError(QflError):
    """Key is missing, too short, or does not match the ciphertext."""


class KeyExhaustionError(KeyMaterialError):
    """Not enough QKD key bits; run additional sessions and retry."""


class TamperError(QflError):
    """Integrity tag does not match the decrypted plaintext."""


class ProtocolError(QflError):
    """A federation protocol rule was violated (e.g. key reuse)."""


class SecurityAbort(QflError):
    """Every link of a round aborted, or a round failed under fail-fast."""
