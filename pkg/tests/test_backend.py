import base64
import gzip
import json
import socket
import threading

import pytest

from opeproxy import ingest
from opeproxy.backend import Backend, LoopbackBackend, RemoteBackend, recv_frame, send_frame, serve
from opeproxy.errors import BackendError

META = {"columns": [{"name": "k", "type": "integer", "scheme": "order_preserving", "fields": ["k__enc", "k__ope"]},
                    {"name": "v", "type": "text", "scheme": "none", "fields": ["v"]}]}


def payload(rows):
    return ingest.compress(ingest.serialize_chunk(["k__enc", "k__ope", "v"], rows))


def rows_for(codes, tag):
    return [[f"ct{c}|{c}", str(c), f"{tag}{i}"] for i, c in enumerate(codes)]


@pytest.fixture(params=["memory", "disk"])
def backend(request, tmp_path):
    b = Backend(str(tmp_path / "b") if request.param == "disk" else None)
    b.create_table("t", META)
    return b


def plan(**kw):
    base = {"table": "t", "epoch": 0, "select": ["v"], "where": [], "order_by": None, "limit": None, "sum": None}
    base.update(kw)
    return base


def test_insert_list_fetch(backend):
    p = payload(rows_for([10, 20], "a"))
    cid = backend.insert_chunk("t", None, 0, p, 2)
    assert backend.list_chunks("t") == [{"chunk_id": cid, "epoch": 0, "row_count": 2, "bytes": len(p)}]
    entry, data = backend.fetch_chunk("t", cid)
    assert data == p and entry["chunk_id"] == cid


def test_create_table_is_idempotent_but_checks_meta(backend):
    assert backend.create_table("t", META) == {"created": False}
    with pytest.raises(BackendError) as info:
        backend.create_table("t", {"columns": []})
    assert info.value.code == "schema_mismatch"


def test_code_range_filter_and_order(backend):
    backend.insert_chunk("t", None, 0, payload(rows_for([10, 20, 30, 40], "a")), 4)
    res = backend.exec_chunk_query(
        "t", 0,
        plan(where=[{"field": "k__ope", "kind": "code", "op": ">", "value": "10"},
                    {"field": "k__ope", "kind": "code", "op": "<=", "value": "30"}],
             order_by={"field": "k__ope", "kind": "code", "desc": True}, limit=5),
    )
    assert [r[0] for r in res["rows"]] == ["a2", "a1"]
    assert res["order_keys"] == ["30", "20"] and res["row_index"] == [2, 1]


def test_codes_compare_unsigned(backend):
    big = (1 << 64) - 2
    backend.insert_chunk("t", None, 0, payload(rows_for([1, 1 << 63, big], "a")), 3)
    res = backend.exec_chunk_query(
        "t", 0, plan(where=[{"field": "k__ope", "kind": "code", "op": ">=", "value": str(1 << 63)}])
    )
    assert [r[0] for r in res["rows"]] == ["a1", "a2"]


def test_epoch_mismatch_refused(backend):
    backend.insert_chunk("t", None, 0, payload(rows_for([1], "a")), 1)
    with pytest.raises(BackendError) as info:
        backend.exec_chunk_query("t", 0, plan(epoch=1))
    assert info.value.code == "epoch_mismatch"


def test_atomic_swap(backend):
    a = backend.insert_chunk("t", None, 0, payload(rows_for([1], "a")), 1)
    b = backend.insert_chunk("t", None, 0, payload(rows_for([2], "b")), 1)
    new = backend.swap_chunks("t", [a, b], {"chunk_id": None, "epoch": 1, "payload": payload(rows_for([5, 6], "c")),
                                            "row_count": 2})
    assert [c["chunk_id"] for c in backend.list_chunks("t")] == [new]
    with pytest.raises(BackendError):
        backend.swap_chunks("t", [a], {"chunk_id": None, "epoch": 1, "payload": b"", "row_count": 0})
    assert [c["chunk_id"] for c in backend.list_chunks("t")] == [new]


def test_duplicate_chunk_id_rejected(backend):
    backend.insert_chunk("t", 3, 0, payload([]), 0)
    with pytest.raises(BackendError):
        backend.insert_chunk("t", 3, 0, payload([]), 0)


def test_persistence_reopens(tmp_path):
    root = str(tmp_path / "b")
    b = Backend(root)
    b.create_table("t", META)
    b.insert_chunk("t", None, 0, payload(rows_for([1, 2], "a")), 2)
    again = Backend(root)
    assert again.list_chunks("t")[0]["row_count"] == 2
    assert again.exec_chunk_query("t", 0, plan())["row_count"] == 2
    again.drop_table("t")
    assert not (tmp_path / "b" / "t").exists()


@pytest.mark.parametrize(
    "message,code",
    [
        ("not a dict", "bad_request"),
        ({"op": "nope"}, "unknown_op"),
        ({"op": "list_chunks"}, "bad_request"),
        ({"op": "list_chunks", "table": "missing"}, "unknown_table"),
        ({"op": "insert_chunk", "table": "t", "epoch": 0, "payload": "!!", "row_count": 1}, "bad_request"),
        ({"op": "exec_chunk_query", "table": "t", "chunk": 99, "plan": plan()}, "unknown_chunk"),
    ],
)
def test_handle_never_raises(backend, message, code):
    reply = backend.handle(message)
    assert reply["err"] == code


def test_bad_plan_reported(backend):
    backend.insert_chunk("t", None, 0, payload(rows_for([1], "a")), 1)
    reply = backend.handle({"op": "exec_chunk_query", "table": "t", "chunk": 0,
                            "plan": plan(where=[{"field": "k__ope", "kind": "code", "op": "contains", "value": "1"}])})
    assert reply["err"] == "bad_plan"
    reply = backend.handle({"op": "exec_chunk_query", "table": "t", "chunk": 0, "plan": plan(select=["nope"])})
    assert reply["err"] == "bad_plan"


def test_loopback_transcript_records_wire_bytes(backend):
    client = LoopbackBackend(backend, record=True)
    client.insert_chunk("t", None, 0, payload(rows_for([1], "a")), 1)
    assert client.list_chunks("t")[0]["row_count"] == 1
    assert len(client.transcript) == 4
    assert all(isinstance(x, bytes) for x in client.transcript)


def test_tcp_server_round_trip(backend):
    server = serve(backend)
    try:
        with RemoteBackend(server.server_address) as client:
            client.insert_chunk("t", None, 0, payload(rows_for([7, 8], "z")), 2)
            res = client.exec_chunk_query("t", 0, plan())
            assert [r[0] for r in res["rows"]] == ["z0", "z1"]
            with pytest.raises(BackendError) as info:
                client.list_chunks("missing")
            assert info.value.code == "unknown_table"
        with socket.create_connection(server.server_address) as s:
            send_frame(s, b"{not json")
            assert json.loads(recv_frame(s))["err"] == "bad_request"
    finally:
        server.shutdown()


def test_concurrent_inserts_and_queries(backend):
    server = serve(backend)
    errors = []

    def worker(i):
        try:
            with RemoteBackend(server.server_address) as c:
                for j in range(5):
                    c.insert_chunk("t", None, 0, payload(rows_for([i * 100 + j], f"w{i}")), 1)
                    for ch in c.list_chunks("t"):
                        c.exec_chunk_query("t", ch["chunk_id"], plan())
        except Exception as exc:  # noqa: BLE001 - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    server.shutdown()
    assert not errors
    ids = [c["chunk_id"] for c in backend.list_chunks("t")]
    assert len(ids) == 30 and len(set(ids)) == 30


def test_fetch_reply_is_plain_json(backend):
    p = payload(rows_for([1], "a"))
    backend.insert_chunk("t", None, 0, p, 1)
    reply = backend.handle({"op": "fetch_chunk", "table": "t", "chunk": 0})
    json.dumps(reply)
    assert base64.b64decode(reply["ok"]["payload"]) == p
    assert gzip.decompress(p).startswith(b"k__enc")
