"""Simulated credit-card records for loads and benchmarks."""

import csv
import json

import numpy as np

from .schema import parse_schema

PAN_LOW = 10**15
PAN_HIGH = 10**16

_HOLDERS = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy"]
_CITIES = ["Berlin", "Regensburg", "Munich", "Vienna", "Zurich", "Paris", "Lyon", "Oslo"]
_WORDS = ["big", "data", "cloud", "order", "secure", "query", "proxy", "chunk", "merge", "sort", "key", "table"]

FULL_SCHEMA = {
    "table": "cc",
    "columns": [
        {"name": "id", "type": "integer", "encrypt": "none"},
        {"name": "pan", "type": "integer", "encrypt": "order_preserving"},
        {"name": "holder", "type": "text", "encrypt": "deterministic"},
        {"name": "city", "type": "text", "encrypt": "none"},
        {"name": "balance", "type": "integer", "encrypt": "homomorphic"},
        {"name": "memo", "type": "text", "encrypt": "searchwords"},
        {"name": "email", "type": "text", "encrypt": "pseudonym"},
        {"name": "cvv", "type": "text", "encrypt": "probabilistic"},
    ],
}

MINIMAL_SCHEMA = {
    "table": "cc",
    "columns": [
        {"name": "id", "type": "integer", "encrypt": "none"},
        {"name": "pan", "type": "integer", "encrypt": "order_preserving"},
        {"name": "city", "type": "text", "encrypt": "none"},
    ],
}

PROFILES = {"full": FULL_SCHEMA, "minimal": MINIMAL_SCHEMA}


def profile_schema(profile, table="cc"):
    doc = dict(PROFILES[profile], table=table)
    return parse_schema(json.dumps(doc))


def random_pans(rng, n, dup_fraction=0.0):
    """``n`` random 16-digit integers; about ``dup_fraction`` repeat earlier ones."""
    pans = rng.integers(PAN_LOW, PAN_HIGH, size=n, dtype=np.int64)
    if dup_fraction > 0 and n > 1:
        dup = np.flatnonzero(rng.random(n) < dup_fraction)
        dup = dup[dup > 0]
        pans[dup] = pans[rng.integers(0, dup, dtype=np.int64)]
    return pans


def generate_rows(n, seed=0, profile="full", dup_fraction=0.1):
    """Rows as dicts of typed values, in the column order of the profile."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    pans = random_pans(rng, n, dup_fraction).tolist()
    cities = rng.integers(0, len(_CITIES), size=n).tolist()
    rows = []
    if profile == "minimal":
        for i in range(n):
            rows.append({"id": i, "pan": pans[i], "city": _CITIES[cities[i]]})
        return rows
    holders = rng.integers(0, len(_HOLDERS), size=n).tolist()
    balances = rng.integers(0, 10**6, size=n).tolist()
    nwords = rng.integers(1, 5, size=n).tolist()
    words = rng.integers(0, len(_WORDS), size=(n, 4)).tolist()
    cvvs = rng.integers(0, 1000, size=n).tolist()
    for i in range(n):
        holder = _HOLDERS[holders[i]]
        rows.append(
            {
                "id": i,
                "pan": pans[i],
                "holder": holder,
                "city": _CITIES[cities[i]],
                "balance": balances[i],
                "memo": " ".join(_WORDS[w] for w in words[i][: nwords[i]]),
                "email": f"{holder}{holders[i] * 7 % 5}@example.org",
                "cvv": f"{cvvs[i]:03d}",
            }
        )
    return rows


def write_csv(rows, path, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([r[c] for c in columns])


def genload(n, path, seed=0, profile="full", dup_fraction=0.1):
    columns = [c["name"] for c in PROFILES[profile]["columns"]]
    write_csv(generate_rows(n, seed, profile, dup_fraction), path, columns)
    return path
