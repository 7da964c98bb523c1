"""Mutable order-preserving encoding held on the proxy.

Each (table, column) owns an :class:`OpeState`: the distinct plaintext
comparison keys in sorted order next to their 64-bit order codes.  A new key
takes the midpoint of the gap between its neighbours' codes, which is the
code a search tree over the keys would give it.  When a gap is exhausted the
insert fails with :class:`CollisionError` and the column must be re-encoded
(evenly spaced codes, new epoch) before it can grow further.

Codes live in the open interval ``(0, 2**64 - 1)``; the backend compares them
as unsigned integers and learns nothing but their order.
"""

import json
import struct
from bisect import bisect_left
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from . import _kernels
from . import crypto
from .errors import CollisionError, CryptoError, OpeProxyError

CODE_MIN = 0
CODE_MAX = (1 << 64) - 1
FIRST_CODE = 1 << 63
COLUMN_TYPES = ("integer", "decimal", "text")

_MAGIC = b"OPEST"
_VERSION = 2


@dataclass
class OpeState:
    column_type: str
    scale: int = 0
    epoch: int = 0
    keys: list = field(default_factory=list)
    codes: list = field(default_factory=list)
    collision_pending: bool = False

    def __len__(self):
        return len(self.keys)

    def code_of(self, key):
        i = bisect_left(self.keys, key)
        if i < len(self.keys) and self.keys[i] == key:
            return self.codes[i]
        return None

    def _bounds(self, i):
        lo = self.codes[i - 1] if i > 0 else CODE_MIN
        hi = self.codes[i] if i < len(self.codes) else CODE_MAX
        return lo, hi


@dataclass(frozen=True)
class ProbeResult:
    code: int
    exact: bool
    ambiguous: bool = False


@dataclass(frozen=True)
class ReencodeMap:
    epoch_from: int
    epoch_to: int
    pairs: list

    def as_dict(self):
        return dict(self.pairs)


def new_state(column_type, scale=0):
    if column_type not in COLUMN_TYPES:
        raise ValueError(f"unknown column type {column_type!r}")
    return OpeState(column_type, scale)


def normalize_key(column_type, value, scale=0):
    """Comparison key for a typed cell.

    Integers compare by value, decimals as integers scaled by ``10**scale``
    and text by the bytes of its UTF-8 encoding.
    """
    if column_type == "integer":
        return int(value)
    if column_type == "decimal":
        sign, digits, exp = Decimal(value).as_tuple()
        if not isinstance(exp, int):
            raise ValueError(f"{value} is not a finite decimal")
        # exact integer arithmetic: no decimal context, so no rounding at any size
        units = int("".join(map(str, digits)) or "0")
        shift = exp + scale
        if shift < 0:
            units, rest = divmod(units, 10**-shift)
            if rest:
                raise ValueError(f"{value} has more than {scale} decimal places")
        else:
            units *= 10**shift
        return -units if sign else units
    if column_type == "text":
        return value.encode("utf-8") if isinstance(value, str) else bytes(value)
    raise ValueError(f"unknown column type {column_type!r}")


def _midpoint(state, lo, hi):
    # the first key of a column sits at the centre of the full 64-bit space
    return FIRST_CODE if not state.keys else (lo + hi) // 2


def encode_insert(state, key):
    i = bisect_left(state.keys, key)
    if i < len(state.keys) and state.keys[i] == key:
        return state.codes[i]
    lo, hi = state._bounds(i)
    if hi - lo <= 1:
        state.collision_pending = True
        raise CollisionError(f"no free order code between {lo} and {hi}; re-encode required")
    code = _midpoint(state, lo, hi)
    state.keys.insert(i, key)
    state.codes.insert(i, code)
    return code


def encode_batch(state, keys):
    """Encode many keys at once; returns one code per input key.

    New keys that fall into the same gap are spread over it with balanced
    midpoints.  The result is identical to calling :func:`encode_insert` on
    the new keys of each gap in median-first order, but a sorted bulk load no
    longer walks down one side of the range (which would exhaust it after 63
    keys).  All-or-nothing: on collision the state is left untouched.
    """
    arr = _as_int64(state, keys)
    if arr is not None:
        return encode_array(state, arr).tolist()
    uniq = set(keys)
    known = {}
    if state.keys:
        for k in uniq:
            code = state.code_of(k)
            if code is not None:
                known[k] = code
        fresh = sorted(uniq.difference(known))
    else:
        fresh = sorted(uniq)
    if fresh:
        gaps = []
        g = 0
        for k in fresh:
            g = bisect_left(state.keys, k, lo=g)
            gaps.append(g)
        new_codes = _allocate(state, gaps).tolist()
        # both sequences are sorted runs, so this is a linear merge
        state.keys = sorted(state.keys + fresh)
        state.codes = sorted(state.codes + new_codes)
        known.update(zip(fresh, new_codes))
    return [known[k] for k in keys]


_I64 = (-(1 << 63), (1 << 63) - 1)


def _as_int64(state, keys):
    if state.column_type == "text" or not keys:
        return None
    if state.keys and not (_I64[0] <= state.keys[0] and state.keys[-1] <= _I64[1]):
        return None
    try:
        return np.asarray(keys, dtype=np.int64)
    except (OverflowError, TypeError, ValueError):
        return None


def encode_array(state, arr):
    """:func:`encode_batch` for an int64 array; returns a uint64 array."""
    if state.keys and not (_I64[0] <= state.keys[0] and state.keys[-1] <= _I64[1]):
        raise ValueError("stored keys exceed the int64 range")
    arr = np.asarray(arr, dtype=np.int64)
    if arr.size == 0:
        return np.empty(0, dtype=np.uint64)
    if arr.size > 1 and (arr[1:] >= arr[:-1]).all():
        # sorted input: skip the sort inside np.unique
        start = np.empty(arr.size, dtype=bool)
        start[0] = True
        np.not_equal(arr[1:], arr[:-1], out=start[1:])
        uniq = arr[start]
        inverse = np.cumsum(start) - 1
    else:
        uniq, inverse = np.unique(arr, return_inverse=True)
    old_keys = np.asarray(state.keys, dtype=np.int64)
    old_codes = np.asarray(state.codes, dtype=np.uint64)
    pos = np.searchsorted(old_keys, uniq)
    present = pos < old_keys.size
    present[present] = old_keys[pos[present]] == uniq[present]
    uniq_codes = np.empty(uniq.size, dtype=np.uint64)
    uniq_codes[present] = old_codes[pos[present]]
    fresh_mask = ~present
    if fresh_mask.any():
        new_codes = _allocate(state, pos[fresh_mask].tolist())
        uniq_codes[fresh_mask] = new_codes
        if old_keys.size:
            all_keys = np.concatenate([old_keys, uniq[fresh_mask]])
            order = np.argsort(all_keys, kind="stable")
            state.keys = all_keys[order].tolist()
            state.codes = np.concatenate([old_codes, new_codes])[order].tolist()
        else:
            state.keys = uniq.tolist()
            state.codes = new_codes.tolist()
    return uniq_codes[inverse.ravel()]


def _allocate(state, gaps):
    """Codes for sorted fresh keys whose gap indices are ``gaps``."""
    m = len(gaps)
    if not state.keys:
        root = (m - 1) // 2
        return np.concatenate(
            [
                _kernels.midpoint_codes(CODE_MIN, FIRST_CODE, root),
                np.array([FIRST_CODE], dtype=np.uint64),
                _kernels.midpoint_codes(FIRST_CODE, CODE_MAX, m - root - 1),
            ]
        )
    out = np.empty(m, dtype=np.uint64)
    start = 0
    for j in range(1, m + 1):
        if j == m or gaps[j] != gaps[start]:
            lo, hi = state._bounds(gaps[start])
            if hi - lo - 1 < j - start:
                state.collision_pending = True
                raise CollisionError(
                    f"{j - start} new keys do not fit between codes {lo} and {hi}; re-encode required"
                )
            out[start:j] = _kernels.midpoint_codes(lo, hi, j - start)
            start = j
    return out


def probe(state, key):
    """Code to compare against for ``key`` without inserting it.

    Exact keys return their code.  An absent key returns the midpoint of its
    gap; every stored code lies strictly on the correct side of it.  If the
    gap has no interior code the result is ``lo`` flagged ``ambiguous``.
    """
    i = bisect_left(state.keys, key)
    if i < len(state.keys) and state.keys[i] == key:
        return ProbeResult(state.codes[i], True)
    lo, hi = state._bounds(i)
    if hi - lo <= 1:
        return ProbeResult(lo, False, ambiguous=True)
    return ProbeResult(_midpoint(state, lo, hi), False)


def reencode(state):
    if not state.keys:
        raise OpeProxyError("cannot re-encode an empty OPE state")
    new_codes = _kernels.spaced_codes(len(state.keys)).tolist()
    mapping = ReencodeMap(state.epoch, state.epoch + 1, list(zip(state.codes, new_codes)))
    state.codes = new_codes
    state.epoch += 1
    state.collision_pending = False
    return mapping


def check_invariants(state):
    """Raise AssertionError if keys and codes disagree on order."""
    assert len(state.keys) == len(state.codes)
    for a, b in zip(state.keys, state.keys[1:]):
        assert a < b, "keys not strictly increasing"
    for a, b in zip(state.codes, state.codes[1:]):
        assert a < b, "codes not strictly increasing"
    assert not state.codes or (CODE_MIN < state.codes[0] and state.codes[-1] < CODE_MAX)


# --- persistence -----------------------------------------------------------------


_STATE_CONTEXT = b"ope-state"


def _encode_keys(state):
    if state.column_type != "text":
        try:
            return "i64", np.array(state.keys, dtype="<i8").tobytes()
        except OverflowError:
            pass
    raw = [k if state.column_type == "text" else str(k).encode("ascii") for k in state.keys]
    return "bytes", np.array([len(r) for r in raw], dtype="<u4").tobytes() + b"".join(raw)


def _decode_keys(column_type, encoding, n, blob):
    if encoding == "i64":
        if len(blob) != 8 * n:
            raise OpeProxyError("corrupt OPE state: key section size")
        return np.frombuffer(blob, dtype="<i8").tolist()
    lengths = np.frombuffer(blob, dtype="<u4", count=n).tolist()
    ends = np.cumsum([4 * n] + lengths).tolist()
    if ends[-1] != len(blob):
        raise OpeProxyError("corrupt OPE state: key section size")
    raw = [blob[a:b] for a, b in zip(ends, ends[1:])]
    return raw if column_type == "text" else [int(r) for r in raw]


def save_state(state, column_key=None):
    """Serialize; with ``column_key`` the plaintext keys are sealed.

    Layout: magic, version byte, u32 header length, JSON header, ``n`` u64
    codes, then the key section (int64 array, or u32 lengths plus bytes),
    all little endian.  Codes stay in clear: the backend holds them anyway.
    """
    encoding, keys = _encode_keys(state)
    if column_key is not None:
        keys = crypto.seal(column_key, keys, _STATE_CONTEXT)
    header = json.dumps(
        {
            "column_type": state.column_type,
            "scale": state.scale,
            "epoch": state.epoch,
            "count": len(state.keys),
            "collision_pending": state.collision_pending,
            "key_encoding": encoding,
            "keys_sealed": column_key is not None,
        },
        sort_keys=True,
    ).encode()
    codes = np.array(state.codes, dtype="<u8").tobytes()
    return b"".join([_MAGIC, bytes([_VERSION]), struct.pack("<I", len(header)), header, codes, keys])


def load_state(data, column_key=None):
    if data[:len(_MAGIC)] != _MAGIC or len(data) <= len(_MAGIC):
        raise OpeProxyError("not an OPE state file")
    pos = len(_MAGIC)
    if data[pos] != _VERSION:
        raise OpeProxyError(f"unsupported OPE state version {data[pos]}")
    pos += 1
    try:
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + hlen])
        pos += hlen
        n = header["count"]
        codes = np.frombuffer(data, dtype="<u8", count=n, offset=pos).tolist()
        pos += 8 * n
        keys = data[pos:]
        if header["keys_sealed"]:
            if column_key is None:
                raise OpeProxyError("OPE state keys are sealed; column key required")
            try:
                keys = crypto.unseal(column_key, keys, _STATE_CONTEXT)
            except CryptoError as exc:
                raise OpeProxyError(f"cannot open OPE state: {exc}") from None
        state = OpeState(header["column_type"], header["scale"], header["epoch"])
        state.keys = _decode_keys(state.column_type, header["key_encoding"], n, keys)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise OpeProxyError(f"corrupt OPE state: {exc}") from None
    state.codes = codes
    state.collision_pending = header["collision_pending"]
    return state
