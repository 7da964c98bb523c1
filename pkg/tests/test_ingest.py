import gzip
import json

import pytest

from opeproxy import crypto, datagen, ingest, ope
from opeproxy.backend import Backend, LoopbackBackend
from opeproxy.errors import CollisionError, InputError, OpeProxyError, SchemaError
from opeproxy.schema import parse_schema

from reference import load_rows


def schema3():
    return datagen.profile_schema("minimal")


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_chunking_10_rows_at_size_4(tmp_path, keyset, loopback):
    rows = datagen.generate_rows(10, seed=1, profile="minimal")
    _, report, _ = load_rows(tmp_path, rows, schema3(), keyset, loopback, chunk_size=4)
    assert [c["row_count"] for c in report.chunks] == [4, 4, 2]
    assert [c["row_count"] for c in loopback.list_chunks("cc")] == [4, 4, 2]
    assert report.rows == 10


def test_chunk_payload_layout(tmp_path, keyset, full_schema, loopback):
    rows = datagen.generate_rows(20, seed=2)
    state, _, stored = load_rows(tmp_path, rows, full_schema, keyset, loopback, chunk_size=50)
    _, payload = loopback.fetch_chunk("cc", 0)
    header, cells = ingest.parse_chunk(gzip.decompress(payload))
    assert header == [
        "id", "pan__enc", "pan__ope", "holder__enc", "city", "balance__enc",
        "memo__enc", "memo__sw", "email__enc", "cvv__enc",
    ]
    codes = [int(r[2]) for r in cells]
    assert codes == sorted(codes)
    for r in cells:
        ct, code = ingest.split_combined(r[1])
        assert code == int(r[2])
        assert int(crypto.det_decrypt(keyset.require_key("cc", "pan", "order_preserving"), crypto.unb64(ct))) > 0
    assert [int(r[0]) for r in cells] == [row[0] for row in stored]
    assert all(state.code_of(row[1]) == c for row, c in zip(stored, codes))


def test_plaintext_never_in_payload(tmp_path, keyset, full_schema, loopback):
    rows = datagen.generate_rows(30, seed=3)
    load_rows(tmp_path, rows, full_schema, keyset, loopback, chunk_size=100)
    _, payload = loopback.fetch_chunk("cc", 0)
    raw = gzip.decompress(payload).decode()
    for r in rows:
        assert str(r["pan"]) not in raw
        assert r["email"] not in raw
        assert r["memo"] not in raw or not r["memo"]


def test_stable_sort_keeps_input_order_for_ties(minimal_schema):
    rows = [ingest.PlainRow(i, (i, pan, "x")) for i, pan in enumerate([5, 3, 5, 3, 1])]
    assert [r.values[0] for r in ingest.stable_sort(rows, minimal_schema)] == [4, 1, 3, 0, 2]


def test_ndjson_input(tmp_path, keyset, loopback, minimal_schema):
    lines = [json.dumps({"id": i, "pan": 10**15 + i, "city": "Oslo"}) for i in range(5)]
    path = write(tmp_path / "in.ndjson", "\n".join(lines) + "\n\n")
    state = ope.new_state("integer")
    report = ingest.load([path], minimal_schema, keyset, loopback, state, chunk_size=10)
    assert report.rows == 5 and len(state) == 5


@pytest.mark.parametrize(
    "name,text,needle",
    [
        ("a.csv", "id,pan,city\n1,2,x\n2,notanumber,y\n", "line 3"),
        ("b.csv", "id,pan,city\n1,2,x\n2,3\n", "line 3"),
        ("c.csv", "id,pan\n1,2\n", "city"),
        ("d.csv", "", "empty"),
        ("e.csv", 'id,pan,city\n1,2,"unterminated\n', "line"),
        ("f.ndjson", '{"id": 1, "pan": 2, "city": "x"}\n{"id": 2, "pan": 3}\n', "line 2"),
        ("g.ndjson", '{"id": 1, "pan": 2, "city": "x"}\n[1]\n', "line 2"),
        ("h.ndjson", "{broken\n", "line 1"),
        ("i.ndjson", '{"id": 1, "pan": 2, "city": "x", "zip": 1}\n', "zip"),
        ("j.txt", "id\n", "format"),
    ],
)
def test_bad_input_names_the_line(tmp_path, keyset, loopback, minimal_schema, name, text, needle):
    path = write(tmp_path / name, text)
    with pytest.raises((InputError, SchemaError)) as info:
        ingest.load([path], minimal_schema, keyset, loopback, ope.new_state("integer"), chunk_size=10)
    assert needle in str(info.value)


def test_failed_load_reports_partial_manifest(tmp_path, keyset, loopback, minimal_schema):
    good = "".join(f"{i},{10**15 + i},x\n" for i in range(6))
    path = write(tmp_path / "p.csv", "id,pan,city\n" + good + "7,bad,x\n")
    with pytest.raises(InputError) as info:
        ingest.load([path], minimal_schema, keyset, loopback, ope.new_state("integer"), chunk_size=3)
    assert [c["row_count"] for c in info.value.partial_manifest["chunks"]] == [3, 3]


def test_load_requires_ope_state(tmp_path, keyset, loopback, minimal_schema):
    path = write(tmp_path / "x.csv", "id,pan,city\n1,2,x\n")
    with pytest.raises(SchemaError):
        ingest.load([path], minimal_schema, keyset, loopback, None)


def test_compression_shrinks_payload(tmp_path, keyset, full_schema, loopback):
    _, report, _ = load_rows(tmp_path, datagen.generate_rows(500, seed=5), full_schema, keyset, loopback, 250)
    d = report.as_dict()
    assert 0 < d["compression_ratio"] < 1
    assert d["compressed_bytes"] == sum(c["compressed_bytes"] for c in d["chunks"])


def test_payload_with_key_material_is_refused(keyset):
    blob = b"prefix" + crypto.b64(keyset.master_key).encode() + b"suffix"
    with pytest.raises(OpeProxyError):
        ingest.assert_no_key_material(blob, keyset)
    ingest.assert_no_key_material(b"harmless", keyset)


def test_temp_files_are_removed(tmp_path, keyset, loopback):
    load_rows(tmp_path, datagen.generate_rows(10, seed=1, profile="minimal"), schema3(), keyset, loopback, 3)
    assert not list(tmp_path.glob("*.chunk.gz"))


def _descending_rows(n):
    return [{"id": i, "pan": -i, "city": "x"} for i in range(n)]


def _tiny_schema():
    return parse_schema(
        json.dumps(
            {"table": "d", "columns": [
                {"name": "id", "type": "integer"},
                {"name": "pan", "type": "integer", "encrypt": "order_preserving"},
                {"name": "city", "type": "text"},
            ]}
        )
    )


def test_collision_aborts_load_by_default(tmp_path, keyset):
    backend = LoopbackBackend(Backend())
    with pytest.raises(CollisionError) as info:
        load_rows(tmp_path, _descending_rows(80), _tiny_schema(), keyset, backend, chunk_size=1)
    assert len(info.value.partial_manifest["chunks"]) == 64


def test_collision_reencode_then_gc(tmp_path, keyset):
    schema = _tiny_schema()
    backend = LoopbackBackend(Backend())
    path = tmp_path / "d.csv"
    from reference import write_rows_csv

    write_rows_csv(path, _descending_rows(80), schema)
    state = ope.new_state("integer")
    report = ingest.load([str(path)], schema, keyset, backend, state, chunk_size=1, on_collision="reencode")
    assert report.reencoded and state.epoch == 1
    epochs = {c["epoch"] for c in backend.list_chunks("d")}
    assert epochs == {0, 1}
    gc = ingest.garbage_collect(backend, schema, keyset, state)
    assert gc["rows"] == 80 and len(backend.list_chunks("d")) == 1
    assert ingest.garbage_collect(backend, schema, keyset, state) is None


def test_gc_applies_pending_reencode(tmp_path, keyset):
    schema = _tiny_schema()
    backend = LoopbackBackend(Backend())
    state = ope.new_state("integer")
    with pytest.raises(CollisionError):
        load_rows(tmp_path, _descending_rows(70), schema, keyset, backend, chunk_size=1, state=state)
    assert state.collision_pending
    gc = ingest.garbage_collect(backend, schema, keyset, state)
    assert gc["reencoded"] and state.epoch == 1 and not state.collision_pending
    _, payload = backend.fetch_chunk("d", gc["new_chunk"])
    _, cells = ingest.parse_chunk(gzip.decompress(payload))
    codes = [int(r[2]) for r in cells]
    assert codes == sorted(codes)
    assert len(codes) == 64
