"""Key handling and the per-column encryption schemes.

Symmetric schemes are AES-256-CBC with PKCS#7 padding.  The deterministic
scheme uses an all-zero IV on purpose: equal plaintexts must give equal
ciphertexts so the backend can match them.  Pseudonyms and searchword tokens
are HMAC-SHA256 outputs and cannot be inverted.  Paillier gives the backend
an additive homomorphism for SUM over encrypted integers.
"""

import base64
import hashlib
import hmac
import json
import math
import os
import secrets
import time
from dataclasses import dataclass, field

import gmpy2
import numpy as np
from cryptography.hazmat.primitives import hashes, padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import CryptoError, KeysetError, SchemeError

SCHEMES = (
    "none",
    "deterministic",
    "probabilistic",
    "pseudonym",
    "searchwords",
    "homomorphic",
    "order_preserving",
)

KDF_ID = "HKDF-SHA256/salt=none/info=table/column/scheme/len=32"
KEYSET_FORMAT = "opeproxy-keyset/1"
BLOCK = 16
ZERO_IV = bytes(BLOCK)
_PADS = [bytes([n]) * n for n in range(BLOCK + 1)]
DEFAULT_PAILLIER_BITS = 512


@dataclass(frozen=True)
class ColumnKey:
    key_bytes: bytes
    scheme: str

    def __repr__(self):
        # never print key material
        return f"ColumnKey(scheme={self.scheme!r})"


def derive_column_key(master_key, table, column, scheme):
    if len(master_key) != 32:
        raise KeysetError("master key must be 32 bytes")
    if scheme not in SCHEMES:
        raise SchemeError(f"unknown scheme {scheme!r}")
    info = f"{table}/{column}/{scheme}".encode()
    hkdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=info)
    return ColumnKey(hkdf.derive(master_key), scheme)


def _require(key, *schemes):
    if key.scheme not in schemes:
        raise SchemeError(f"key for scheme {key.scheme!r} used where {'/'.join(schemes)} is required")


def _pad(data):
    padder = padding.PKCS7(128).padder()
    return padder.update(data) + padder.finalize()


def _unpad(data):
    if not data or len(data) % BLOCK:
        raise CryptoError("ciphertext length is not a positive multiple of the block size")
    n = data[-1]
    if not 1 <= n <= BLOCK or data[-n:] != bytes([n]) * n:
        raise CryptoError("invalid padding")
    return data[:-n]


def _cbc_encrypt(key_bytes, iv, plaintext):
    enc = Cipher(algorithms.AES(key_bytes), modes.CBC(iv)).encryptor()
    return enc.update(_pad(plaintext)) + enc.finalize()


def _cbc_decrypt(key_bytes, iv, ciphertext):
    if not ciphertext or len(ciphertext) % BLOCK:
        raise CryptoError("ciphertext length is not a positive multiple of the block size")
    dec = Cipher(algorithms.AES(key_bytes), modes.CBC(iv)).decryptor()
    return _unpad(dec.update(ciphertext) + dec.finalize())


def det_encrypt(key, plaintext):
    _require(key, "deterministic", "order_preserving")
    return _cbc_encrypt(key.key_bytes, ZERO_IV, plaintext)


def det_decrypt(key, ciphertext):
    _require(key, "deterministic", "order_preserving")
    return _cbc_decrypt(key.key_bytes, ZERO_IV, ciphertext)


def det_encrypt_many(key, plaintexts):
    """Batch form of :func:`det_encrypt`; output matches it item for item.

    With a fixed IV every message starts from the same chaining value, so
    messages of equal padded length are processed block column by block
    column: one ECB call per column, chained with a numpy XOR.
    """
    _require(key, "deterministic", "order_preserving")
    ecb = Cipher(algorithms.AES(key.key_bytes), modes.ECB()).encryptor()
    out = [None] * len(plaintexts)
    groups = {}
    for i, p in enumerate(plaintexts):
        groups.setdefault(len(p) // BLOCK + 1, []).append(i)
    for nblocks, idx in groups.items():
        width = nblocks * BLOCK
        joined = b"".join(plaintexts[i] + _PADS[width - len(plaintexts[i])] for i in idx)
        buf = np.frombuffer(joined, dtype=np.uint8).reshape(len(idx), width).copy()
        data = _cbc_rows(ecb, buf).tobytes()
        for row, i in enumerate(idx):
            out[i] = data[row * width:(row + 1) * width]
    return out


def _cbc_rows(ecb, buf):
    """CBC-encrypt every row of ``buf`` in place from a zero IV."""
    m, width = buf.shape
    prev = np.zeros((m, BLOCK), dtype=np.uint8)
    for b in range(0, width, BLOCK):
        col = buf[:, b:b + BLOCK] ^ prev
        prev = np.frombuffer(ecb.update(col.tobytes()), dtype=np.uint8).reshape(m, BLOCK)
        buf[:, b:b + BLOCK] = prev
    return buf


def det_encrypt_b64(key, values):
    """Base64 deterministic ciphertexts for a numpy ``S`` array.

    Equals ``[b64(det_encrypt(key, v)) for v in values]`` as an ``S`` array.
    Fixed-width byte arrays drop trailing NUL bytes, so plaintexts ending in
    NUL are not representable here; use :func:`det_encrypt_many` for those.
    """
    _require(key, "deterministic", "order_preserving")
    values = np.asarray(values)
    if values.dtype.kind != "S":
        raise TypeError("det_encrypt_b64 needs a bytes (S) array")
    ecb = Cipher(algorithms.AES(key.key_bytes), modes.ECB()).encryptor()
    lens = np.char.str_len(values)
    nblocks = lens // BLOCK + 1
    widest = int(nblocks.max(initial=1)) * BLOCK
    out = np.empty(values.shape, dtype=f"S{(widest + 2) // 3 * 4}")
    for nb in np.unique(nblocks).tolist():
        idx = np.flatnonzero(nblocks == nb)
        width = nb * BLOCK
        buf = values[idx].astype(f"S{width}").view(np.uint8).reshape(idx.size, width).copy()
        pad = (width - lens[idx]).astype(np.uint8)
        tail = np.arange(width)[None, :] >= lens[idx][:, None]
        buf = np.where(tail, pad[:, None], buf)
        out[idx] = b64_rows(_cbc_rows(ecb, buf))
    return out


def b64_rows(rows):
    """Standard base64 of each row of a uint8 matrix, as an ``S`` array."""
    m, width = rows.shape
    extra = -width % 3
    if extra:
        rows = np.concatenate([rows, np.zeros((m, extra), dtype=np.uint8)], axis=1)
    chars = (width + extra) // 3 * 4
    text = np.frombuffer(base64.b64encode(rows.tobytes()), dtype=np.uint8).reshape(m, chars).copy()
    # zero fill bytes encode as 'A'; standard output marks them with '='
    if extra:
        text[:, chars - extra:] = ord("=")
    return text.view(f"S{chars}").reshape(m)


def det_decrypt_many(key, ciphertexts):
    """Batch form of :func:`det_decrypt`."""
    _require(key, "deterministic", "order_preserving")
    dec = Cipher(algorithms.AES(key.key_bytes), modes.ECB()).decryptor()
    out = [None] * len(ciphertexts)
    groups = {}
    for i, c in enumerate(ciphertexts):
        if not c or len(c) % BLOCK:
            raise CryptoError("ciphertext length is not a positive multiple of the block size")
        groups.setdefault(len(c), []).append(i)
    for width, idx in groups.items():
        ct = np.frombuffer(b"".join(ciphertexts[i] for i in idx), dtype=np.uint8).reshape(len(idx), width)
        plain = np.frombuffer(dec.update(ct.tobytes()), dtype=np.uint8).reshape(len(idx), width).copy()
        plain[:, BLOCK:] ^= ct[:, :-BLOCK]
        pads = plain[:, -1].astype(np.int64)
        tail = plain[:, -BLOCK:]
        in_pad = np.arange(BLOCK) >= BLOCK - pads[:, None]
        if pads.min() < 1 or pads.max() > BLOCK or np.any(in_pad & (tail != pads[:, None])):
            raise CryptoError("invalid padding")
        data = plain.tobytes()
        ends = (np.arange(len(idx)) * width + width - pads).tolist()
        for row, i in enumerate(idx):
            out[i] = data[row * width:ends[row]]
    return out


def prob_encrypt(key, plaintext):
    _require(key, "probabilistic")
    iv = os.urandom(BLOCK)
    return iv + _cbc_encrypt(key.key_bytes, iv, plaintext)


def prob_decrypt(key, ciphertext):
    _require(key, "probabilistic")
    if len(ciphertext) < 2 * BLOCK:
        raise CryptoError("ciphertext too short")
    return _cbc_decrypt(key.key_bytes, ciphertext[:BLOCK], ciphertext[BLOCK:])


def pseudonym(key, plaintext):
    _require(key, "pseudonym", "searchwords")
    return hmac.new(key.key_bytes, plaintext, hashlib.sha256).digest()


def normalize_words(text):
    return text.lower().split()


def searchwords(key, text):
    _require(key, "searchwords")
    return [pseudonym(key, w.encode()) for w in normalize_words(text)]


def _seal_keys(key_bytes, context):
    okm = HKDF(algorithm=hashes.SHA256(), length=64, salt=None, info=b"seal/" + context).derive(key_bytes)
    return okm[:32], okm[32:]


def seal(key, data, context):
    """Encrypt-then-MAC ``data`` for local storage: IV, AES-CBC body, HMAC tag.

    Encryption and MAC keys are derived from ``key`` per ``context``, so the
    column key itself is never used on this path.
    """
    enc_key, mac_key = _seal_keys(key.key_bytes, context)
    iv = os.urandom(BLOCK)
    body = iv + _cbc_encrypt(enc_key, iv, data)
    return body + hmac.new(mac_key, body, hashlib.sha256).digest()


def unseal(key, blob, context):
    enc_key, mac_key = _seal_keys(key.key_bytes, context)
    body, tag = blob[:-32], blob[-32:]
    if len(blob) < 2 * BLOCK + 32 or not hmac.compare_digest(tag, hmac.new(mac_key, body, hashlib.sha256).digest()):
        raise CryptoError("sealed data failed authentication (wrong key or corrupted)")
    return _cbc_decrypt(enc_key, body[:BLOCK], body[BLOCK:])


# --- Paillier ----------------------------------------------------------------


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int

    @property
    def g(self):
        return self.n + 1

    @property
    def nsquare(self):
        return self.n * self.n

    def encrypt(self, m, r=None):
        if not 0 <= m < self.n:
            raise ValueError(f"plaintext {m} outside [0, n)")
        n, n2 = self.n, self.nsquare
        if r is None:
            while True:
                r = secrets.randbelow(n - 1) + 1
                if math.gcd(r, n) == 1:
                    break
        # g = n + 1, so g^m = 1 + m*n (mod n^2)
        gm = (1 + m * n) % n2
        return int(gm * gmpy2.powmod(r, n, n2) % n2)

    def add(self, c1, c2):
        return c1 * c2 % self.nsquare


@dataclass(frozen=True)
class PaillierPrivateKey:
    public: PaillierPublicKey
    p: int
    q: int
    lam: int = field(init=False)
    mu: int = field(init=False)

    def __post_init__(self):
        n = self.public.n
        lam = math.lcm(self.p - 1, self.q - 1)
        x = pow(self.public.g, lam, self.public.nsquare)
        mu = pow((x - 1) // n, -1, n)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)

    def decrypt(self, c):
        n, n2 = self.public.n, self.public.nsquare
        if not 0 < c < n2:
            raise CryptoError("Paillier ciphertext out of range")
        x = int(gmpy2.powmod(c, self.lam, n2))
        return (x - 1) // n * self.mu % n

    def __repr__(self):
        return f"PaillierPrivateKey(n_bits={self.public.n.bit_length()})"


def paillier_keygen(bits=DEFAULT_PAILLIER_BITS, primes=None):
    """Return ``(public, private)``.  ``primes=(p, q)`` forces textbook keys."""
    if primes is not None:
        p, q = primes
        if p == q or not (gmpy2.is_prime(p) and gmpy2.is_prime(q)):
            raise ValueError("p and q must be distinct primes")
    else:
        if bits < 64:
            raise ValueError("Paillier modulus must be at least 64 bits")
        half = bits // 2
        while True:
            p = _random_prime(half)
            q = _random_prime(bits - half)
            n = p * q
            if p != q and n.bit_length() == bits and math.gcd(n, (p - 1) * (q - 1)) == 1:
                break
    public = PaillierPublicKey(p * q)
    return public, PaillierPrivateKey(public, p, q)


def _random_prime(bits):
    while True:
        cand = secrets.randbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if gmpy2.is_prime(cand, 40):
            return int(cand)


def paillier_encrypt(public, m, r=None):
    return public.encrypt(m, r)


def paillier_decrypt(private, c):
    return private.decrypt(c)


def paillier_add(public, c1, c2):
    return public.add(c1, c2)


# --- keysets -------------------------------------------------------------------


def b64(data):
    return base64.b64encode(data).decode("ascii")


def unb64(text):
    try:
        return base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise CryptoError(f"invalid base64: {exc}") from None


@dataclass
class Keyset:
    """Master key, Paillier keypair and optional explicit column keys.

    A restricted keyset (see :meth:`restrict`) carries no master key, only the
    column keys a client was granted; any other column stays opaque to it.
    """

    master_key: bytes | None
    paillier_public: PaillierPublicKey | None = None
    paillier_private: PaillierPrivateKey | None = None
    column_keys: dict = field(default_factory=dict)
    created_at: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))

    @classmethod
    def generate(cls, paillier_bits=DEFAULT_PAILLIER_BITS):
        public, private = paillier_keygen(paillier_bits)
        return cls(os.urandom(32), public, private)

    def column_key(self, table, column, scheme):
        """Derived key, or ``None`` when this keyset does not hold it."""
        ident = f"{table}/{column}/{scheme}"
        if ident in self.column_keys:
            return ColumnKey(self.column_keys[ident], scheme)
        if self.master_key is None:
            return None
        return derive_column_key(self.master_key, table, column, scheme)

    def require_key(self, table, column, scheme):
        key = self.column_key(table, column, scheme)
        if key is None:
            raise KeysetError(f"keyset holds no key for column {column!r}")
        return key

    def restrict(self, schema, columns, include_paillier_private=False):
        """Keyset granting only ``columns`` of ``schema``."""
        keys = {}
        for spec in schema.columns:
            if spec.name not in columns or spec.scheme in ("none", "homomorphic"):
                continue
            # searchwords cells also carry a probabilistic ciphertext of the full text
            schemes = (spec.scheme, "probabilistic") if spec.scheme == "searchwords" else (spec.scheme,)
            for scheme in schemes:
                k = self.require_key(schema.table, spec.name, scheme)
                keys[f"{schema.table}/{spec.name}/{scheme}"] = k.key_bytes
        return Keyset(
            None,
            self.paillier_public,
            self.paillier_private if include_paillier_private else None,
            keys,
        )

    def secret_material(self):
        """Every secret byte string in this keyset (for leak scans)."""
        out = []
        if self.master_key is not None:
            out.append(self.master_key)
        out.extend(self.column_keys.values())
        if self.paillier_private is not None:
            priv = self.paillier_private
            out.extend(str(v).encode() for v in (priv.p, priv.q, priv.lam, priv.mu))
        return out

    def to_json(self):
        doc = {
            "format": KEYSET_FORMAT,
            "kdf": KDF_ID,
            "created_at": self.created_at,
            "master_key": b64(self.master_key) if self.master_key is not None else None,
            "column_keys": {k: b64(v) for k, v in sorted(self.column_keys.items())},
            "paillier": None,
        }
        if self.paillier_public is not None:
            pail = {"n": str(self.paillier_public.n), "g": str(self.paillier_public.g)}
            if self.paillier_private is not None:
                priv = self.paillier_private
                pail.update(p=str(priv.p), q=str(priv.q), **{"lambda": str(priv.lam), "mu": str(priv.mu)})
            doc["paillier"] = pail
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise KeysetError(f"keyset is not valid JSON: {exc}") from None
        if doc.get("format") != KEYSET_FORMAT:
            raise KeysetError(f"unsupported keyset format {doc.get('format')!r}")
        if doc.get("kdf") != KDF_ID:
            raise KeysetError(f"keyset was derived with unknown KDF {doc.get('kdf')!r}")
        master = unb64(doc["master_key"]) if doc.get("master_key") else None
        if master is not None and len(master) != 32:
            raise KeysetError("master key must be 32 bytes")
        public = private = None
        pail = doc.get("paillier")
        if pail:
            public = PaillierPublicKey(int(pail["n"]))
            if "p" in pail:
                private = PaillierPrivateKey(public, int(pail["p"]), int(pail["q"]))
        keys = {k: unb64(v) for k, v in doc.get("column_keys", {}).items()}
        return cls(master, public, private, keys, doc.get("created_at", ""))

    def save(self, path, force=False):
        flags = os.O_WRONLY | os.O_CREAT | (os.O_TRUNC if force else os.O_EXCL)
        try:
            fd = os.open(path, flags, 0o600)
        except FileExistsError:
            raise KeysetError(f"{path} exists; use --force to overwrite") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(self.to_json())
        try:
            os.chmod(path, 0o600)
        except OSError:
            pass

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_json(fh.read())
        except FileNotFoundError:
            raise KeysetError(f"keyset file {path} not found") from None
