"""The encryption proxy: plaintext files in, encrypted chunk tables out.

Pipeline per chunk: read rows, stable-sort by the order-preserving column,
encrypt every cell according to its scheme, serialize as CSV, gzip into a
temporary file and upload.  :func:`garbage_collect` merges a table's chunks
into one and rewrites stale order codes after a re-encode.

Chunk CSV columns per schema column:

=================  ============================================================
scheme             fields
=================  ============================================================
none               ``<col>`` (plaintext)
deterministic      ``<col>__enc`` (base64 AES-CBC, zero IV)
probabilistic      ``<col>__enc`` (base64 IV + AES-CBC)
pseudonym          ``<col>__enc`` (base64 HMAC token)
searchwords        ``<col>__enc`` (base64 probabilistic ciphertext of the text),
                   ``<col>__sw`` (space separated base64 word tokens)
homomorphic        ``<col>__enc`` (Paillier ciphertext, decimal)
order_preserving   ``<col>__enc`` (``base64|code``), ``<col>__ope`` (code)
=================  ============================================================
"""

import csv
import gzip
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import crypto, ope
from .errors import CollisionError, EpochError, InputError, OpeProxyError, SchemaError
from .schema import validate_header

logger = logging.getLogger(__name__)

SEP = "|"
DEFAULT_CHUNK_SIZE = 100_000


class PlainRow(NamedTuple):
    line: int
    values: tuple


@dataclass
class ChunkTable:
    table: str
    epoch: int
    row_count: int
    header: list
    payload: bytes
    raw_bytes: int
    chunk_id: int | None = None


@dataclass
class LoadReport:
    table: str
    rows: int = 0
    chunks: list = field(default_factory=list)
    phases: dict = field(default_factory=dict)
    input_bytes: int = 0
    serialized_bytes: int = 0
    compressed_bytes: int = 0
    reencoded: bool = False

    def add_time(self, phase, seconds):
        self.phases[phase] = self.phases.get(phase, 0.0) + seconds

    def as_dict(self):
        return {
            "table": self.table,
            "rows": self.rows,
            "chunks": self.chunks,
            "phases": {k: round(v, 6) for k, v in self.phases.items()},
            "input_bytes": self.input_bytes,
            "serialized_bytes": self.serialized_bytes,
            "compressed_bytes": self.compressed_bytes,
            "compression_ratio": (self.compressed_bytes / self.serialized_bytes) if self.serialized_bytes else None,
            "reencoded": self.reencoded,
            "gc_required": self.reencoded,
        }


def column_fields(spec):
    if spec.scheme == "none":
        return [spec.name]
    if spec.scheme == "order_preserving":
        return [f"{spec.name}__enc", f"{spec.name}__ope"]
    if spec.scheme == "searchwords":
        return [f"{spec.name}__enc", f"{spec.name}__sw"]
    return [f"{spec.name}__enc"]


def chunk_header(schema):
    return [f for spec in schema.columns for f in column_fields(spec)]


def table_meta(schema, keyset=None):
    """Column metadata shipped to the backend; contains no secrets."""
    meta = {
        "columns": [
            {"name": c.name, "type": c.type_name, "scheme": c.scheme, "fields": column_fields(c)}
            for c in schema.columns
        ]
    }
    if any(c.scheme == "homomorphic" for c in schema.columns):
        if keyset is None or keyset.paillier_public is None:
            raise SchemaError("homomorphic columns need a Paillier public key")
        meta["paillier_n"] = str(keyset.paillier_public.n)
    return meta


def ope_key(spec, value):
    return ope.normalize_key(spec.data_type, value, spec.scale)


# --- reading ---------------------------------------------------------------------


def detect_format(path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".csv":
        return "csv"
    if ext in (".json", ".ndjson", ".jsonl"):
        return "json"
    raise InputError(f"cannot infer input format of {path}; use .csv or .json/.ndjson")


def _typed(schema, values, line):
    out = []
    for spec, raw in zip(schema.columns, values):
        try:
            out.append(spec.parse_value(raw))
        except ValueError as exc:
            raise InputError(f"line {line}, column {spec.name!r}: {exc}") from None
    return PlainRow(line, tuple(out))


def read_input(path, fmt, schema):
    """Yield typed :class:`PlainRow` objects in file order."""
    if fmt == "csv":
        yield from _read_csv(path, schema)
    elif fmt == "json":
        yield from _read_ndjson(path, schema)
    else:
        raise InputError(f"unknown input format {fmt!r}")


def _read_csv(path, schema):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file, expected a header row") from None
        except csv.Error as exc:
            raise InputError(f"{path}, line 1: {exc}") from None
        order = validate_header(schema, header)
        width = len(header)
        while True:
            try:
                cells = next(reader)
            except StopIteration:
                return
            except csv.Error as exc:
                raise InputError(f"{path}, line {reader.line_num}: {exc}") from None
            if not cells:
                continue
            if len(cells) != width:
                raise InputError(f"{path}, line {reader.line_num}: expected {width} fields, got {len(cells)}")
            yield _typed(schema, [cells[i] for i in order], reader.line_num)


def _read_ndjson(path, schema):
    names = schema.names
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}, line {line_no}: invalid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise InputError(f"{path}, line {line_no}: expected a JSON object")
            for name in names:
                if name not in doc:
                    raise InputError(f"{path}, line {line_no}: missing key {name!r}")
            extra = set(doc) - set(names)
            if extra:
                raise InputError(f"{path}, line {line_no}: keys not in schema: {sorted(extra)}")
            yield _typed(schema, [doc[n] for n in names], line_no)


# --- sorting and encryption ---------------------------------------------------------


def stable_sort(rows, schema, column=None):
    """Sort rows by the order-preserving column; equal keys keep input order."""
    spec = schema.column(column) if column else schema.ope_column
    if spec is None:
        return list(rows)
    if spec.scheme != "order_preserving":
        raise SchemaError(f"column {spec.name!r} is not order_preserving")
    i = schema.columns.index(spec)
    # list.sort is timsort: stable, O(n) on presorted input, O(n log n) worst case
    return sorted(rows, key=lambda r: ope_key(spec, r.values[i]))


def encrypt_rows(schema, keyset, ope_state, rows):
    """Encrypt typed rows column by column; returns CSV-ready string rows.

    The order-preserving column is encoded with one batch call, so a
    collision aborts the whole batch before any state changes.
    """
    n = len(rows)
    out_cols = []
    for ci, spec in enumerate(schema.columns):
        values = [r.values[ci] for r in rows]
        out_cols.extend(_encrypt_column(schema, spec, keyset, ope_state, values))
    return [list(r) for r in zip(*out_cols)] if n else []


def _encrypt_column(schema, spec, keyset, ope_state, values):
    scheme = spec.scheme
    if scheme == "none":
        return [[spec.format_value(v) for v in values]]
    if scheme == "homomorphic":
        pub = keyset.paillier_public
        if pub is None:
            raise SchemaError("homomorphic column needs a Paillier public key")
        for v in values:
            if not 0 <= v < pub.n:
                raise OpeProxyError(f"column {spec.name!r}: value {v} outside the Paillier plaintext range")
        return [[str(pub.encrypt(v)) for v in values]]
    raw = [spec.format_value(v).encode("utf-8") for v in values]
    b64 = crypto.b64
    if scheme == "deterministic":
        key = keyset.require_key(schema.table, spec.name, scheme)
        return [_det_b64(key, raw)]
    if scheme == "probabilistic":
        key = keyset.require_key(schema.table, spec.name, scheme)
        return [[b64(crypto.prob_encrypt(key, p)) for p in raw]]
    if scheme == "pseudonym":
        key = keyset.require_key(schema.table, spec.name, scheme)
        return [[b64(crypto.pseudonym(key, p)) for p in raw]]
    if scheme == "searchwords":
        tkey = keyset.require_key(schema.table, spec.name, "searchwords")
        ekey = keyset.require_key(schema.table, spec.name, "probabilistic")
        enc = [b64(crypto.prob_encrypt(ekey, p)) for p in raw]
        words = [" ".join(b64(t) for t in crypto.searchwords(tkey, v)) for v in values]
        return [enc, words]
    if scheme == "order_preserving":
        if ope_state is None:
            raise SchemaError(f"column {spec.name!r} needs an OPE state")
        key = keyset.require_key(schema.table, spec.name, scheme)
        codes = ope.encode_batch(ope_state, [ope_key(spec, v) for v in values])
        codes_txt = [str(c) for c in codes]
        combined = [f"{c}{SEP}{k}" for c, k in zip(_det_b64(key, raw), codes_txt)]
        return [combined, codes_txt]
    raise SchemaError(f"unknown scheme {scheme!r}")


def _det_b64(key, raw):
    if raw and not any(r.endswith(b"\0") for r in raw):
        return np.char.decode(crypto.det_encrypt_b64(key, np.array(raw, dtype="S")), "ascii").tolist()
    return [crypto.b64(c) for c in crypto.det_encrypt_many(key, raw)]


# --- chunk serialization --------------------------------------------------------------


def serialize_chunk(header, rows):
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def parse_chunk(data):
    reader = csv.reader(io.StringIO(data.decode("utf-8"), newline=""))
    header = next(reader)
    return header, list(reader)


def compress(data, level=6):
    return gzip.compress(data, compresslevel=level, mtime=0)


def decompress(data):
    return gzip.decompress(data)


def split_combined(cell):
    ct, sep, code = cell.partition(SEP)
    if not sep or SEP in code:
        raise OpeProxyError(f"malformed combined field {cell[:40]!r}")
    return ct, int(code)


def build_chunk(schema, keyset, ope_state, rows):
    rows = stable_sort(rows, schema)
    enc = encrypt_rows(schema, keyset, ope_state, rows)
    raw = serialize_chunk(chunk_header(schema), enc)
    epoch = ope_state.epoch if ope_state is not None else 0
    return ChunkTable(schema.table, epoch, len(enc), chunk_header(schema), compress(raw), len(raw))


# --- upload --------------------------------------------------------------------------


def _key_forms(keyset):
    forms = []
    for secret in keyset.secret_material():
        forms.extend([secret, crypto.b64(secret).encode(), secret.hex().encode()])
    return [f for f in forms if len(f) >= 8]


def assert_no_key_material(blob, keyset):
    for form in _key_forms(keyset):
        if form in blob:
            raise OpeProxyError("refusing to transmit: payload contains key material")


def ensure_table(backend, schema, keyset=None):
    backend.create_table(schema.table, table_meta(schema, keyset))


def upload(backend, schema, chunk, keyset=None):
    """Send one finalized chunk; returns its backend-assigned id."""
    if keyset is not None:
        assert_no_key_material(chunk.payload, keyset)
    ensure_table(backend, schema, keyset)
    chunk.chunk_id = backend.insert_chunk(schema.table, chunk.chunk_id, chunk.epoch, chunk.payload, chunk.row_count)
    return chunk.chunk_id


def _batches(rows, size):
    batch = []
    for row in rows:
        batch.append(row)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def load(
    paths,
    schema,
    keyset,
    backend,
    ope_state=None,
    chunk_size=DEFAULT_CHUNK_SIZE,
    fmt=None,
    tmp_dir=None,
    on_collision="abort",
):
    """Read, sort, encrypt, compress and upload ``paths`` in chunks.

    ``on_collision="reencode"`` re-encodes the OPE state and carries on; the
    chunks already stored then carry a stale epoch until GC rewrites them.
    On failure the raised error has a ``partial_manifest`` attribute listing
    chunks that were uploaded before it.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    if schema.ope_column is not None and ope_state is None:
        raise SchemaError("schema has an order_preserving column; an OPE state is required")
    report = LoadReport(schema.table)
    ensure_table(backend, schema, keyset)
    header = chunk_header(schema)
    try:
        for path in paths:
            report.input_bytes += os.path.getsize(path)
            rows_iter = read_input(path, fmt or detect_format(path), schema)
            while True:
                t0 = time.perf_counter()
                batch = next(_batches(rows_iter, chunk_size), None)
                report.add_time("read", time.perf_counter() - t0)
                if batch is None:
                    break
                _load_batch(batch, schema, keyset, backend, ope_state, header, report, tmp_dir, on_collision)
    except Exception as exc:
        exc.partial_manifest = report.as_dict()
        raise
    return report


def _load_batch(batch, schema, keyset, backend, ope_state, header, report, tmp_dir, on_collision):
    t0 = time.perf_counter()
    rows = stable_sort(batch, schema)
    report.add_time("sort", time.perf_counter() - t0)

    t0 = time.perf_counter()
    try:
        enc = encrypt_rows(schema, keyset, ope_state, rows)
    except CollisionError:
        if on_collision != "reencode":
            raise
        logger.warning("order code collision; re-encoding %s (GC required afterwards)", schema.table)
        ope.reencode(ope_state)
        report.reencoded = True
        enc = encrypt_rows(schema, keyset, ope_state, rows)
    report.add_time("encrypt", time.perf_counter() - t0)

    t0 = time.perf_counter()
    raw = serialize_chunk(header, enc)
    report.add_time("serialize", time.perf_counter() - t0)
    t0 = time.perf_counter()
    payload = compress(raw)
    report.add_time("compress", time.perf_counter() - t0)

    fd, tmp_path = tempfile.mkstemp(prefix=f"{schema.table}.", suffix=".chunk.gz", dir=tmp_dir)
    with os.fdopen(fd, "wb") as fh:
        fh.write(payload)
    t0 = time.perf_counter()
    with open(tmp_path, "rb") as fh:
        chunk = ChunkTable(
            schema.table,
            ope_state.epoch if ope_state is not None else 0,
            len(enc),
            header,
            fh.read(),
            len(raw),
        )
    upload(backend, schema, chunk, keyset)
    report.add_time("upload", time.perf_counter() - t0)
    # kept on failure for inspection; removed once the backend has the chunk
    os.remove(tmp_path)

    report.rows += len(enc)
    report.serialized_bytes += len(raw)
    report.compressed_bytes += len(payload)
    report.chunks.append(
        {
            "chunk_id": chunk.chunk_id,
            "epoch": chunk.epoch,
            "row_count": chunk.row_count,
            "raw_bytes": len(raw),
            "compressed_bytes": len(payload),
        }
    )


# --- garbage collection ----------------------------------------------------------------


def decrypt_ope_column(schema, keyset, header, rows):
    """Typed plaintext values of the order-preserving column of stored rows."""
    spec = schema.ope_column
    pos = header.index(f"{spec.name}__enc")
    key = keyset.require_key(schema.table, spec.name, "order_preserving")
    cts = [crypto.unb64(split_combined(r[pos])[0]) for r in rows]
    return [spec.parse_value(p.decode("utf-8")) for p in crypto.det_decrypt_many(key, cts)] if cts else []


def garbage_collect(backend, schema, keyset, ope_state=None, force=False):
    """Merge all chunks of the table into one, refreshing stale order codes.

    No-op (returns ``None``) when the table already is a single chunk at the
    current epoch with no pending collision, unless ``force``.  Nothing on
    the backend changes until the final atomic swap.
    """
    chunks = sorted(backend.list_chunks(schema.table), key=lambda c: c["chunk_id"])
    epoch = ope_state.epoch if ope_state is not None else 0
    pending = ope_state is not None and ope_state.collision_pending
    stale = any(c["epoch"] != epoch for c in chunks)
    if not chunks or (len(chunks) < 2 and not stale and not pending and not force):
        return None

    header = chunk_header(schema)
    rows = []
    for c in chunks:
        _, payload = backend.fetch_chunk(schema.table, c["chunk_id"])
        chunk_head, chunk_rows = parse_chunk(decompress(payload))
        if chunk_head != header:
            raise OpeProxyError(f"chunk {c['chunk_id']} header does not match the schema")
        rows.extend(chunk_rows)

    reencoded = False
    spec = schema.ope_column
    if spec is not None:
        values = decrypt_ope_column(schema, keyset, header, rows)
        keys = [ope_key(spec, v) for v in values]
        if pending:
            ope.reencode(ope_state)
            reencoded = True
        codes = ope.encode_batch(ope_state, keys)
        enc_pos = header.index(f"{spec.name}__enc")
        ope_pos = header.index(f"{spec.name}__ope")
        for r, code in zip(rows, codes):
            ct, _ = split_combined(r[enc_pos])
            r[enc_pos] = f"{ct}{SEP}{code}"
            r[ope_pos] = str(code)
        # chunks are concatenated in id order, so ties keep (chunk, row) order
        perm = sorted(range(len(rows)), key=keys.__getitem__)
        rows = [rows[i] for i in perm]
        epoch = ope_state.epoch

    raw = serialize_chunk(header, rows)
    payload = compress(raw)
    assert_no_key_material(payload, keyset)
    new_id = backend.swap_chunks(
        schema.table,
        [c["chunk_id"] for c in chunks],
        {"chunk_id": None, "epoch": epoch, "payload": payload, "row_count": len(rows)},
    )
    return {
        "table": schema.table,
        "merged_chunks": [c["chunk_id"] for c in chunks],
        "new_chunk": new_id,
        "rows": len(rows),
        "epoch": epoch,
        "reencoded": reencoded,
    }


def require_current_epoch(chunks, epoch):
    stale = sorted({c["epoch"] for c in chunks if c["epoch"] != epoch})
    if stale:
        raise EpochError(f"table has chunks at epoch(s) {stale}, current epoch is {epoch}; GC required")
