"""Untrusted storage/query service standing in for the IaaS provider.

The backend keeps compressed chunk tables and answers per-chunk plans using
only what ciphertexts allow: byte equality on ``__enc`` cells, unsigned
comparison of ``__ope`` order codes, token membership for searchword cells
and modular multiplication of Paillier ciphertexts under the public modulus.
It holds no secret key and has no decryption routine.

Wire protocol: each message is a 4-byte big-endian length followed by a UTF-8
JSON object ``{"op": ..., ...}``.  Responses are ``{"ok": result}`` or
``{"err": code, "msg": text}``.  Chunk payloads travel base64-encoded.
"""

import base64
import binascii
import csv
import gzip
import io
import json
import logging
import os
import socket
import socketserver
import struct
import threading
from decimal import Decimal

import numpy as np

from . import _kernels
from .errors import BackendError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
CODE_MAX = (1 << 64) - 1
_FRAME = struct.Struct(">I")
MAX_FRAME = 1 << 30


class _Columns(dict):
    """Column lists materialised on first access."""

    def __init__(self, positions, rows):
        super().__init__()
        self._pos = positions
        self._rows = rows

    def __missing__(self, field):
        i = self._pos[field]
        col = self[field] = [r[i] for r in self._rows]
        return col


class _Chunk:
    """Row store of one decompressed chunk payload with lazy column views."""

    def __init__(self, payload):
        text = gzip.decompress(payload).decode("utf-8")
        reader = csv.reader(io.StringIO(text, newline=""))
        self.header = next(reader)
        self.rows = list(reader)
        self.n = len(self.rows)
        self.positions = {name: i for i, name in enumerate(self.header)}
        self.columns = _Columns(self.positions, self.rows)
        self._codes = {}

    def codes(self, field):
        if field not in self._codes:
            self._codes[field] = np.array(self.columns[field], dtype=np.str_).astype(np.uint64)
        return self._codes[field]


def _plain_value(type_name, text):
    if type_name == "integer":
        return int(text)
    if type_name.startswith("decimal"):
        return Decimal(text)
    return text


_CMP = {
    "=": lambda a, b: a == b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


class Backend:
    """In-process backend.  With ``root`` set, tables persist under it."""

    def __init__(self, root=None):
        self.root = root
        self._tables = {}
        self._lock = threading.RLock()
        self._cache = {}
        if root is not None:
            os.makedirs(root, exist_ok=True)
            for name in sorted(os.listdir(root)):
                path = os.path.join(root, name, "manifest.json")
                if os.path.exists(path):
                    with open(path) as fh:
                        manifest = json.load(fh)
                    if manifest.get("version") != MANIFEST_VERSION:
                        raise BackendError("bad_manifest", f"unsupported manifest version in {path}")
                    self._tables[name] = manifest

    # --- table management ----------------------------------------------------

    def create_table(self, name, meta):
        with self._lock:
            existing = self._tables.get(name)
            if existing is not None:
                if existing["meta"] != meta:
                    raise BackendError("schema_mismatch", f"table {name!r} exists with different columns")
                return {"created": False}
            self._tables[name] = {
                "version": MANIFEST_VERSION,
                "table": name,
                "meta": meta,
                "next_id": 0,
                "chunks": [],
            }
            self._persist(name)
            return {"created": True}

    def table_meta(self, name):
        return self._table(name)["meta"]

    def list_chunks(self, name):
        table = self._table(name)
        with self._lock:
            return [{k: c[k] for k in ("chunk_id", "epoch", "row_count", "bytes")} for c in table["chunks"]]

    def insert_chunk(self, name, chunk_id, epoch, payload, row_count):
        with self._lock:
            table = self._table(name)
            entry = self._new_entry(table, chunk_id, epoch, payload, row_count)
            self._write_payload(name, entry, payload)
            table["chunks"].append(entry)
            self._persist(name)
            return entry["chunk_id"]

    def fetch_chunk(self, name, chunk_id):
        entry = self._entry(name, chunk_id)
        public = {k: entry[k] for k in ("chunk_id", "epoch", "row_count", "bytes")}
        return public, self._read_payload(name, entry)

    def swap_chunks(self, name, remove_ids, add_chunk):
        """Atomically replace chunks ``remove_ids`` by one new chunk."""
        with self._lock:
            table = self._table(name)
            present = {c["chunk_id"] for c in table["chunks"]}
            missing = [i for i in remove_ids if i not in present]
            if missing:
                raise BackendError("unknown_chunk", f"chunks {missing} not in table {name!r}")
            entry = self._new_entry(
                table, add_chunk.get("chunk_id"), add_chunk["epoch"], add_chunk["payload"], add_chunk["row_count"]
            )
            self._write_payload(name, entry, add_chunk["payload"])
            old = [c for c in table["chunks"] if c["chunk_id"] in set(remove_ids)]
            # readers hold a reference to the old list, so replace it rather than mutate
            table["chunks"] = [c for c in table["chunks"] if c["chunk_id"] not in set(remove_ids)] + [entry]
            self._persist(name)
            for c in old:
                self._cache.pop((name, c["chunk_id"]), None)
                if self.root is not None:
                    try:
                        os.remove(os.path.join(self.root, name, c["file"]))
                    except FileNotFoundError:
                        pass
            return entry["chunk_id"]

    def drop_table(self, name):
        with self._lock:
            table = self._table(name)
            for c in table["chunks"]:
                self._cache.pop((name, c["chunk_id"]), None)
            del self._tables[name]
            if self.root is not None:
                tdir = os.path.join(self.root, name)
                for fname in os.listdir(tdir):
                    os.remove(os.path.join(tdir, fname))
                os.rmdir(tdir)

    # --- query execution ---------------------------------------------------------

    def exec_chunk_query(self, name, chunk_id, plan):
        entry = self._entry(name, chunk_id)
        if plan.get("epoch") != entry["epoch"]:
            raise BackendError(
                "epoch_mismatch",
                f"chunk {chunk_id} has epoch {entry['epoch']}, plan expects {plan.get('epoch')}; run GC",
            )
        chunk = self._load_chunk(name, entry)
        try:
            mask = self._filter(chunk, plan.get("where", []))
            idx = np.flatnonzero(mask)
            if plan.get("sum"):
                return dict(self._sum(name, chunk, plan["sum"], idx), chunk_id=chunk_id)
            order = plan.get("order_by")
            order_keys = None
            if order:
                idx, order_keys = self._order(chunk, order, idx)
            limit = plan.get("limit")
            if limit is not None:
                idx = idx[:limit]
                if order_keys is not None:
                    order_keys = order_keys[:limit]
            if isinstance(order_keys, np.ndarray):
                order_keys = [str(c) for c in order_keys.tolist()]
            fields = plan.get("select") or chunk.header
            pos = [chunk.positions[f] for f in fields]
            rows = [[chunk.rows[i][j] for j in pos] for i in idx.tolist()]
        except KeyError as exc:
            raise BackendError("bad_plan", f"unknown field {exc}") from None
        return {
            "chunk_id": chunk_id,
            "fields": list(fields),
            "rows": rows,
            "row_index": idx.tolist(),
            "order_keys": order_keys,
            "row_count": len(rows),
        }

    def _filter(self, chunk, predicates):
        mask = np.ones(chunk.n, dtype=bool)
        bounds = {}
        for pred in predicates:
            op, kind = pred.get("op"), pred.get("kind")
            if op == "false":
                mask[:] = False
            elif kind == "code":
                lo, hi = bounds.get(pred["field"], (0, CODE_MAX))
                v = int(pred["value"])
                if op == "=":
                    lo, hi = max(lo, v), min(hi, v)
                elif op in (">", ">="):
                    lo = max(lo, v + 1 if op == ">" else v)
                elif op in ("<", "<="):
                    hi = min(hi, v - 1 if op == "<" else v)
                else:
                    raise BackendError("bad_plan", f"operator {op!r} not valid on order codes")
                bounds[pred["field"]] = (lo, hi)
            elif kind == "bytes" and op == "=":
                col = np.array(chunk.columns[pred["field"]], dtype=object)
                mask &= col == pred["value"]
            elif kind == "token" and op == "contains":
                token = pred["value"]
                mask &= np.fromiter(
                    (token in cell.split(" ") for cell in chunk.columns[pred["field"]]), dtype=bool, count=chunk.n
                )
            elif kind == "plain" and op in _CMP:
                cmp, typ = _CMP[op], pred["type"]
                v = _plain_value(typ, pred["value"])
                mask &= np.fromiter(
                    (cmp(_plain_value(typ, c), v) for c in chunk.columns[pred["field"]]), dtype=bool, count=chunk.n
                )
            else:
                raise BackendError("bad_plan", f"unsupported predicate {op!r}/{kind!r}")
        for field, (lo, hi) in bounds.items():
            if lo > hi:
                mask[:] = False
            else:
                mask &= _kernels.in_range(chunk.codes(field), lo, hi)
        return mask

    def _order(self, chunk, order, idx):
        field, desc = order["field"], bool(order.get("desc"))
        if order.get("kind") == "code":
            codes = chunk.codes(field)[idx]
            # ~code reverses unsigned order; a stable sort keeps ties in row order
            perm = np.argsort(~codes if desc else codes, kind="stable")
            return idx[perm], codes[perm]
        typ = order["type"]
        col = chunk.columns[field]
        ordered = sorted(idx.tolist(), key=lambda i: _plain_value(typ, col[i]), reverse=desc)
        return np.array(ordered, dtype=np.int64), [col[i] for i in ordered]

    def _sum(self, name, chunk, field, idx):
        meta = self.table_meta(name)
        n = int(meta["paillier_n"])
        n2 = n * n
        acc = 1
        col = chunk.columns[field]
        for i in idx.tolist():
            acc = acc * int(col[i]) % n2
        return {"sum": str(acc), "row_count": len(idx)}

    # --- wire dispatch ---------------------------------------------------------------

    def handle(self, message):
        """Serve one decoded request; never raises."""
        try:
            if not isinstance(message, dict):
                raise BackendError("bad_request", "message must be a JSON object")
            op = message.get("op")
            if op == "create_table":
                result = self.create_table(message["table"], message["meta"])
            elif op == "insert_chunk":
                result = self.insert_chunk(
                    message["table"],
                    message.get("chunk_id"),
                    message["epoch"],
                    _unb64(message["payload"]),
                    message["row_count"],
                )
            elif op == "list_chunks":
                result = self.list_chunks(message["table"])
            elif op == "table_meta":
                result = self.table_meta(message["table"])
            elif op == "fetch_chunk":
                entry, payload = self.fetch_chunk(message["table"], message["chunk"])
                result = {"entry": entry, "payload": base64.b64encode(payload).decode("ascii")}
            elif op == "swap_chunks":
                add = dict(message["add"])
                add["payload"] = _unb64(add["payload"])
                result = self.swap_chunks(message["table"], message["remove"], add)
            elif op == "exec_chunk_query":
                result = self.exec_chunk_query(message["table"], message["chunk"], message["plan"])
            elif op == "drop_table":
                result = self.drop_table(message["table"])
            else:
                raise BackendError("unknown_op", f"unknown operation {op!r}")
            return {"ok": result}
        except BackendError as exc:
            return {"err": exc.code, "msg": str(exc)}
        except (KeyError, TypeError, ValueError) as exc:
            return {"err": "bad_request", "msg": f"{type(exc).__name__}: {exc}"}

    # --- internals -------------------------------------------------------------

    def _table(self, name):
        try:
            return self._tables[name]
        except KeyError:
            raise BackendError("unknown_table", f"no table {name!r}") from None

    def _entry(self, name, chunk_id):
        table = self._table(name)
        for c in table["chunks"]:
            if c["chunk_id"] == chunk_id:
                return c
        raise BackendError("unknown_chunk", f"table {name!r} has no chunk {chunk_id}")

    def _new_entry(self, table, chunk_id, epoch, payload, row_count):
        if chunk_id is None:
            chunk_id = table["next_id"]
        if any(c["chunk_id"] == chunk_id for c in table["chunks"]) or chunk_id < table["next_id"]:
            raise BackendError("duplicate_chunk", f"chunk id {chunk_id} already used")
        table["next_id"] = chunk_id + 1
        return {
            "chunk_id": chunk_id,
            "epoch": epoch,
            "row_count": row_count,
            "bytes": len(payload),
            "file": f"{chunk_id}.csv.gz",
        }

    def _write_payload(self, name, entry, payload):
        if self.root is None:
            entry["_payload"] = payload
            return
        path = os.path.join(self.root, name, entry["file"])
        with open(path + ".tmp", "wb") as fh:
            fh.write(payload)
        os.replace(path + ".tmp", path)

    def _read_payload(self, name, entry):
        if self.root is None:
            return entry["_payload"]
        with open(os.path.join(self.root, name, entry["file"]), "rb") as fh:
            return fh.read()

    def _load_chunk(self, name, entry):
        key = (name, entry["chunk_id"])
        chunk = self._cache.get(key)
        if chunk is None:
            chunk = _Chunk(self._read_payload(name, entry))
            self._cache[key] = chunk
        return chunk

    def _persist(self, name):
        if self.root is None:
            return
        tdir = os.path.join(self.root, name)
        os.makedirs(tdir, exist_ok=True)
        path = os.path.join(tdir, "manifest.json")
        with open(path + ".tmp", "w") as fh:
            json.dump(self._tables[name], fh, indent=2)
        os.replace(path + ".tmp", path)


def _unb64(text):
    try:
        return base64.b64decode(text, validate=True)
    except binascii.Error as exc:
        raise BackendError("bad_request", f"payload is not base64: {exc}") from None


# --- clients -----------------------------------------------------------------------


class _Client:
    """Backend API over a message transport; subclasses implement ``_call``."""

    def __init__(self, record=False):
        self.transcript = [] if record else None

    def _request(self, message):
        raw = json.dumps(message).encode()
        reply_raw = self._call(raw)
        if self.transcript is not None:
            self.transcript.append(raw)
            self.transcript.append(reply_raw)
        reply = json.loads(reply_raw)
        if "err" in reply:
            raise BackendError(reply["err"], reply.get("msg", ""))
        return reply["ok"]

    def create_table(self, name, meta):
        return self._request({"op": "create_table", "table": name, "meta": meta})

    def table_meta(self, name):
        return self._request({"op": "table_meta", "table": name})

    def list_chunks(self, name):
        return self._request({"op": "list_chunks", "table": name})

    def insert_chunk(self, name, chunk_id, epoch, payload, row_count):
        return self._request(
            {
                "op": "insert_chunk",
                "table": name,
                "chunk_id": chunk_id,
                "epoch": epoch,
                "row_count": row_count,
                "payload": base64.b64encode(payload).decode("ascii"),
            }
        )

    def fetch_chunk(self, name, chunk_id):
        res = self._request({"op": "fetch_chunk", "table": name, "chunk": chunk_id})
        return res["entry"], base64.b64decode(res["payload"])

    def swap_chunks(self, name, remove_ids, add_chunk):
        add = dict(add_chunk)
        add["payload"] = base64.b64encode(add["payload"]).decode("ascii")
        return self._request({"op": "swap_chunks", "table": name, "remove": list(remove_ids), "add": add})

    def exec_chunk_query(self, name, chunk_id, plan):
        return self._request({"op": "exec_chunk_query", "table": name, "chunk": chunk_id, "plan": plan})

    def drop_table(self, name):
        return self._request({"op": "drop_table", "table": name})


class LoopbackBackend(_Client):
    """Talks to an in-process :class:`Backend` through the JSON message layer."""

    def __init__(self, backend, record=False):
        super().__init__(record)
        self.backend = backend

    def _call(self, raw):
        try:
            message = json.loads(raw)
        except json.JSONDecodeError as exc:
            return json.dumps({"err": "bad_request", "msg": str(exc)}).encode()
        return json.dumps(self.backend.handle(message)).encode()


class RemoteBackend(_Client):
    """Client for a backend served by :func:`serve`.  One connection, serialised."""

    def __init__(self, address, record=False, timeout=60.0):
        super().__init__(record)
        self.address = address
        self._sock = socket.create_connection(address, timeout=timeout)
        self._lock = threading.Lock()

    def _call(self, raw):
        with self._lock:
            send_frame(self._sock, raw)
            reply = recv_frame(self._sock)
        if reply is None:
            raise BackendError("unreachable", "backend closed the connection")
        return reply

    def close(self):
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def send_frame(sock, data):
    sock.sendall(_FRAME.pack(len(data)) + data)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            return None
        buf.extend(part)
    return bytes(buf)


def recv_frame(sock):
    head = _recv_exact(sock, _FRAME.size)
    if head is None:
        return None
    (length,) = _FRAME.unpack(head)
    if length > MAX_FRAME:
        raise BackendError("bad_request", "frame too large")
    return _recv_exact(sock, length)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                raw = recv_frame(self.request)
            except (BackendError, OSError):
                return
            if raw is None:
                return
            try:
                message = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                reply = {"err": "bad_request", "msg": f"malformed JSON: {exc}"}
            else:
                reply = self.server.backend.handle(message)
            send_frame(self.request, json.dumps(reply).encode())


class BackendServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, backend):
        super().__init__(address, _Handler)
        self.backend = backend


def serve(backend, address=("127.0.0.1", 0), background=True):
    """Start serving ``backend``; returns the server (``server.server_address``)."""
    server = BackendServer(address, backend)
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        server.serve_forever()
    return server
