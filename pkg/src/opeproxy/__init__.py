"""Client-side encryption proxy, query client and mock untrusted backend.

Tables are sorted, encrypted column by column and uploaded in gzip chunks;
the backend sees order codes for order-preserving columns and opaque
ciphertext for everything else.
"""

from .errors import (
    BackendError,
    CollisionError,
    CryptoError,
    EpochError,
    InputError,
    KeysetError,
    OpeProxyError,
    QuerySyntaxError,
    ReencodeRequired,
    SchemaError,
    SchemeError,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "CollisionError",
    "CryptoError",
    "EpochError",
    "InputError",
    "KeysetError",
    "OpeProxyError",
    "QuerySyntaxError",
    "ReencodeRequired",
    "SchemaError",
    "SchemeError",
    "__version__",
]
