"""Hot loops over 64-bit order codes.

Each kernel has a numba implementation and a pure-numpy one with identical
results.  The numba path is used unless ``OPEPROXY_DISABLE_NUMBA`` is set to a
non-empty value other than ``0`` (or numba cannot be imported).  Both are
importable directly as ``numba_impl`` / ``numpy_impl`` for testing and for
``benchmarks/bench_kernels.py``.

All codes are ``np.uint64``.  Scalars are coerced to ``np.uint64`` before
reaching numba so that no comparison silently promotes to float64.
"""

import logging
import os
from types import SimpleNamespace

import numpy as np

logger = logging.getLogger(__name__)

CODE_DTYPE = np.uint64
CODE_MAX = (1 << 64) - 1


def _numba_disabled():
    return os.environ.get("OPEPROXY_DISABLE_NUMBA", "") not in ("", "0")


# --- pure numpy ------------------------------------------------------------


def _np_midpoint_codes(lo, hi, m):
    out = np.empty(m, dtype=CODE_DTYPE)
    if m == 0:
        return out
    # breadth-first over the implicit balanced tree: one vectorised step per level
    los = np.array([lo], dtype=CODE_DTYPE)
    his = np.array([hi], dtype=CODE_DTYPE)
    starts = np.array([0], dtype=np.int64)
    ends = np.array([m], dtype=np.int64)
    while starts.size:
        mids = starts + (ends - starts - 1) // 2
        codes = los + (his - los) // CODE_DTYPE(2)
        out[mids] = codes
        left = mids > starts
        right = ends > mids + 1
        los = np.concatenate([los[left], codes[right]])
        his = np.concatenate([codes[left], his[right]])
        starts, ends = (
            np.concatenate([starts[left], mids[right] + 1]),
            np.concatenate([mids[left], ends[right]]),
        )
    return out


def _np_spaced_codes(n):
    one = CODE_DTYPE(1)
    denom = CODE_DTYPE(n + 1)
    q = CODE_DTYPE(CODE_MAX // (n + 1))
    r = CODE_DTYPE(CODE_MAX % (n + 1))
    i1 = np.arange(n, dtype=CODE_DTYPE) + one
    return i1 * q + (i1 * r) // denom


def _np_in_range(codes, lo, hi):
    return (codes >= lo) & (codes <= hi)


numpy_impl = SimpleNamespace(
    name="numpy",
    midpoint_codes=_np_midpoint_codes,
    spaced_codes=_np_spaced_codes,
    in_range=_np_in_range,
)


# --- numba -----------------------------------------------------------------


def _build_numba():
    import numba as nb

    @nb.njit(cache=True)
    def midpoint_codes(lo, hi, m):
        out = np.empty(m, dtype=np.uint64)
        if m == 0:
            return out
        two = np.uint64(2)
        # depth is bounded by 64 halvings; a DFS stack never exceeds depth + 1
        st_lo = np.empty(130, dtype=np.uint64)
        st_hi = np.empty(130, dtype=np.uint64)
        st_s = np.empty(130, dtype=np.int64)
        st_e = np.empty(130, dtype=np.int64)
        top = 0
        st_lo[0] = lo
        st_hi[0] = hi
        st_s[0] = 0
        st_e[0] = m
        top = 1
        while top > 0:
            top -= 1
            a = st_lo[top]
            b = st_hi[top]
            s = st_s[top]
            e = st_e[top]
            mid = s + (e - s - 1) // 2
            c = a + (b - a) // two
            out[mid] = c
            if mid > s:
                st_lo[top] = a
                st_hi[top] = c
                st_s[top] = s
                st_e[top] = mid
                top += 1
            if e > mid + 1:
                st_lo[top] = c
                st_hi[top] = b
                st_s[top] = mid + 1
                st_e[top] = e
                top += 1
        return out

    @nb.njit(cache=True)
    def _spaced(n, q, r, denom):
        out = np.empty(n, dtype=np.uint64)
        k = np.uint64(0)
        one = np.uint64(1)
        for i in range(n):
            k += one
            out[i] = k * q + (k * r) // denom
        return out

    def spaced_codes(n):
        return _spaced(
            n,
            CODE_DTYPE(CODE_MAX // (n + 1)),
            CODE_DTYPE(CODE_MAX % (n + 1)),
            CODE_DTYPE(n + 1),
        )

    @nb.njit(cache=True)
    def _in_range(codes, lo, hi):
        out = np.empty(codes.shape[0], dtype=np.bool_)
        for i in range(codes.shape[0]):
            c = codes[i]
            out[i] = c >= lo and c <= hi
        return out

    def in_range(codes, lo, hi):
        return _in_range(codes, CODE_DTYPE(lo), CODE_DTYPE(hi))

    def midpoint(lo, hi, m):
        return midpoint_codes(CODE_DTYPE(lo), CODE_DTYPE(hi), m)

    return SimpleNamespace(
        name="numba",
        midpoint_codes=midpoint,
        spaced_codes=spaced_codes,
        in_range=in_range,
    )


try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None
    logger.warning("numba unavailable; using numpy kernels")

active = numpy_impl if (numba_impl is None or _numba_disabled()) else numba_impl


def midpoint_codes(lo, hi, m):
    """Codes for ``m`` sorted new keys filling the open gap ``(lo, hi)``.

    The lower median takes the midpoint of the gap and each half recurses,
    i.e. the codes a balanced search tree would give.  Requires
    ``m <= hi - lo - 1``; callers check this.
    """
    return active.midpoint_codes(lo, hi, m)


def spaced_codes(n):
    """``floor((i + 1) * (2**64 - 1) / (n + 1))`` for ``i`` in ``range(n)``."""
    if n >= 1 << 32:
        raise ValueError("spaced_codes supports n < 2**32")
    return active.spaced_codes(n)


def in_range(codes, lo, hi):
    """Boolean mask of ``lo <= codes <= hi`` (inclusive, unsigned)."""
    return active.in_range(codes, CODE_DTYPE(lo), CODE_DTYPE(hi))
