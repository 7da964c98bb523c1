"""Exception hierarchy.

Every error class carries the process exit code the CLI maps it to, so the
command line can distinguish syntax, scheme, epoch and backend failures.
"""


class OpeProxyError(Exception):
    exit_code = 1


class InputError(OpeProxyError):
    """Malformed CSV/NDJSON input, or a cell that does not parse."""

    exit_code = 7


class SchemaError(OpeProxyError):
    exit_code = 3


class QuerySyntaxError(OpeProxyError):
    exit_code = 2

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class SchemeError(OpeProxyError):
    """Operation is not supported by the column's encryption scheme."""

    exit_code = 3


class CollisionError(OpeProxyError):
    """No free order code left between two neighbours; re-encode required."""

    exit_code = 6


class ReencodeRequired(OpeProxyError):
    exit_code = 6


class EpochError(OpeProxyError):
    """Chunks were encoded under a different OPE epoch; GC required."""

    exit_code = 4


class BackendError(OpeProxyError):
    exit_code = 5

    def __init__(self, code, message=""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


class KeysetError(OpeProxyError):
    """Keyset file missing, malformed, or lacking a required key."""

    exit_code = 8


class CryptoError(OpeProxyError):
    """Ciphertext failed to decrypt (bad padding, truncation, foreign key)."""

    exit_code = 8
