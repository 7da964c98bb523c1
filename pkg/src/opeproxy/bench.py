"""Encryption throughput benchmark over random 16-digit card numbers.

For each sample size the timed work is what the proxy does per load: stable
sort, order-code assignment, deterministic AES of every value and assembly of
the combined ``ciphertext|code`` field.  The "equivalent file size" is the
plaintext as one number per line.
"""

import gc
import os
import time

import numpy as np

from . import crypto, ope
from .datagen import random_pans
from .ingest import SEP

TIME_RATIO_BOUNDS = (7.0, 13.0)
SIZE_RATIO_BOUNDS = (9.5, 10.5)


BLOCK_ROWS = 1 << 15


def encrypt_sample(values, key):
    """Combined ``ciphertext|code`` fields for an int64 array, in sorted order.

    Sorting and code assignment are global; the per-row work runs in blocks of
    ``BLOCK_ROWS`` so temporaries stay cache-sized.  Returns a list of blocks.
    """
    ordered = np.sort(values, kind="stable")
    codes = ope.encode_array(ope.new_state("integer"), ordered)
    sep = SEP.encode()
    out = []
    for i in range(0, ordered.size, BLOCK_ROWS):
        cts = crypto.det_encrypt_b64(key, ordered[i : i + BLOCK_ROWS].astype("S20"))
        out.append(np.char.add(np.char.add(cts, sep), codes[i : i + BLOCK_ROWS].astype("S20")))
    return out


def _timed(values, key, repeat):
    best = float("inf")
    for _ in range(repeat):
        gc.collect()
        gc.disable()
        try:
            t0 = time.perf_counter()
            encrypt_sample(values, key)
            best = min(best, time.perf_counter() - t0)
        finally:
            gc.enable()
    return best


def bench_encrypt(sizes, seed=0, repeat=None):
    """One row per size: digits, plaintext bytes, best-of-``repeat`` seconds."""
    rng = np.random.default_rng(seed)
    key = crypto.derive_column_key(os.urandom(32), "bench", "pan", "order_preserving")
    encrypt_sample(random_pans(rng, 1000), key)  # JIT and cache warm-up
    rows = []
    for n in sizes:
        values = random_pans(rng, n)
        size = int(np.char.str_len(values.astype("S20")).sum()) + n
        reps = repeat if repeat is not None else max(5, min(50, 5_000_000 // max(n, 1)))
        rows.append({"n": n, "digits": 16, "bytes": size, "seconds": _timed(values, key, reps), "repeat": reps})
    return rows


def linearity(rows):
    """Consecutive size and time ratios plus a pass/fail verdict."""
    steps = []
    ok = True
    for a, b in zip(rows, rows[1:]):
        t = b["seconds"] / a["seconds"]
        s = b["bytes"] / a["bytes"]
        step_ok = TIME_RATIO_BOUNDS[0] <= t <= TIME_RATIO_BOUNDS[1] and SIZE_RATIO_BOUNDS[0] <= s <= SIZE_RATIO_BOUNDS[1]
        ok &= step_ok
        steps.append({"from": a["n"], "to": b["n"], "time_ratio": t, "size_ratio": s, "ok": step_ok})
    return {"steps": steps, "linear": ok}


def format_table(rows, verdict):
    lines = [f"{'Sample Size':>12}  {'Digits':>6}  {'Equivalent File Size':>20}  {'Time Consumption':>16}"]
    for r in rows:
        lines.append(f"{r['n']:>12,}  {r['digits']:>6}  {_human(r['bytes']):>20}  {r['seconds']:>14.4f} s")
    for st in verdict["steps"]:
        lines.append(
            f"{st['from']:,} -> {st['to']:,}: time x{st['time_ratio']:.2f}, size x{st['size_ratio']:.2f}"
            f" {'ok' if st['ok'] else 'OUT OF BOUNDS'}"
        )
    lines.append(f"linear: {'yes' if verdict['linear'] else 'no'}")
    return "\n".join(lines)


def _human(n):
    for unit in ("B", "kB", "MB", "GB"):
        if n < 1000 or unit == "GB":
            return f"{n:.1f} {unit}" if unit != "B" else f"{n} B"
        n /= 1000
