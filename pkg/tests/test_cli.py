import csv
import io
import json

import pytest

from opeproxy import cli, crypto
from opeproxy.backend import Backend, serve


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def setup_table(capsys, n=200, profile="full", chunk=60):
    assert run(capsys, "keygen", "--keys", "k.json")[0] == 0
    assert run(capsys, "genload", str(n), "--out", "d.csv", "--schema-out", "s.json", "--profile", profile)[0] == 0
    assert run(capsys, "--keys", "k.json", "--schema", "s.json", "--chunk-size", str(chunk), "load", "d.csv")[0] == 0


def test_keygen_writes_master_key_and_refuses_rerun(env, capsys):
    code, out, _ = run(capsys, "keygen", "--keys", "k.json", "--paillier-bits", "512")
    assert code == 0 and "512" in out
    ks = crypto.Keyset.load("k.json")
    assert len(ks.master_key) == 32 and ks.paillier_public.n.bit_length() >= 511
    code, _, err = run(capsys, "keygen", "--keys", "k.json")
    assert code == 8 and "--force" in err
    assert run(capsys, "keygen", "--keys", "k.json", "--force")[0] == 0


def test_genload_rows_and_determinism(env, capsys):
    run(capsys, "genload", "1000", "--out", "a.csv", "--seed", "7")
    run(capsys, "--seed", "7", "genload", "1000", "--out", "b.csv")
    a = (env / "a.csv").read_bytes()
    assert a == (env / "b.csv").read_bytes()
    rows = list(csv.DictReader(io.StringIO(a.decode())))
    assert len(rows) == 1000 and all(len(r["pan"]) == 16 for r in rows)
    code, _, _ = run(capsys, "genload", "0", "--out", "c.csv")
    assert code == 7


def test_load_then_ordered_query(env, capsys):
    setup_table(capsys)
    code, out, _ = run(capsys, "--keys", "k.json", "--schema", "s.json", "query",
                       "SELECT id, pan FROM cc ORDER BY pan")
    assert code == 0
    got = [int(r["pan"]) for r in csv.DictReader(io.StringIO(out))]
    plain = sorted(int(r["pan"]) for r in csv.DictReader(open("d.csv")))
    assert got == plain
    assert (env / ".opeproxy" / "cc.pan.ope").exists()
    assert list((env / ".opeproxy" / "manifests").glob("cc-*.json"))


def test_query_json_and_out_file(env, capsys):
    setup_table(capsys, n=50)
    code, out, _ = run(capsys, "--json", "--keys", "k.json", "--schema", "s.json", "query", "SELECT SUM(balance) FROM cc")
    total = sum(int(r["balance"]) for r in csv.DictReader(open("d.csv")))
    assert code == 0 and json.loads(out)["rows"] == [[total]]
    code, _, _ = run(capsys, "--keys", "k.json", "--schema", "s.json", "query", "SELECT id FROM cc LIMIT 4",
                     "--out", "r.csv")
    assert code == 0 and len((env / "r.csv").read_text().splitlines()) == 5


def test_exit_codes(env, capsys):
    setup_table(capsys, n=30)
    base = ["--keys", "k.json", "--schema", "s.json", "query"]
    assert run(capsys, *base, "SELEC id")[0] == 2
    assert run(capsys, *base, "SELECT SUM(pan) FROM cc")[0] == 3
    assert run(capsys, "--backend", "127.0.0.1:1", *base, "SELECT id FROM cc")[0] == 5
    assert run(capsys, "--keys", "missing.json", "--schema", "s.json", "gc")[0] == 8
    assert run(capsys, "--keys", "k.json", "--schema", "s.json", "load", "nope.csv")[0] == 7
    (env / "bad.csv").write_text("id,pan\n1,2\n")
    assert run(capsys, "--keys", "k.json", "--schema", "s.json", "load", "bad.csv")[0] == 3
    assert run(capsys, "--keys", "k.json", "query", "SELECT id FROM cc")[0] == 3


def test_collision_reencode_gc_flow(env, capsys):
    run(capsys, "keygen", "--keys", "k.json")
    (env / "s.json").write_text(json.dumps({"table": "d", "columns": [
        {"name": "id", "type": "integer"}, {"name": "v", "type": "integer", "encrypt": "order_preserving"}]}))
    (env / "d.csv").write_text("id,v\n" + "".join(f"{i},{-i}\n" for i in range(80)))
    g = ["--keys", "k.json", "--schema", "s.json", "--chunk-size", "1"]
    code, _, err = run(capsys, *g, "load", "d.csv")
    assert code == 6 and "re-encode" in err
    run(capsys, *g, "gc")
    (env / "e.csv").write_text("id,v\n" + "".join(f"{i},{-i}\n" for i in range(80, 160)))
    code, out, _ = run(capsys, *g, "load", "e.csv", "--reencode-on-collision")
    assert code == 0 and "gc" in out
    code, _, err = run(capsys, *g, "query", "SELECT id FROM d ORDER BY v")
    assert code == 4 and "GC required" in err
    assert run(capsys, *g, "gc")[0] == 0
    code, out, _ = run(capsys, *g, "query", "SELECT id FROM d ORDER BY v DESC LIMIT 200")
    ids = [int(x) for x in out.split()[1:]]
    assert code == 0 and len(ids) == 144 and ids[:3] == [0, 1, 2]
    code, out, _ = run(capsys, *g, "gc")
    assert code == 0 and "nothing" in out


def test_remote_backend(env, capsys):
    server = serve(Backend(str(env / "remote")))
    addr = f"{server.server_address[0]}:{server.server_address[1]}"
    try:
        run(capsys, "keygen", "--keys", "k.json")
        run(capsys, "genload", "40", "--out", "d.csv", "--schema-out", "s.json", "--profile", "minimal")
        g = ["--keys", "k.json", "--schema", "s.json", "--backend", addr]
        assert run(capsys, *g, "load", "d.csv")[0] == 0
        code, out, _ = run(capsys, *g, "query", "SELECT id FROM cc")
        assert code == 0 and len(out.splitlines()) == 41
        assert (env / "remote" / "cc" / "manifest.json").exists()
        assert run(capsys, *g, "--embedded-backend", "query", "SELECT id FROM cc")[0] == 5
    finally:
        server.shutdown()


def test_bench_encrypt_report(env, capsys):
    code, out, _ = run(capsys, "--json", "bench", "encrypt", "--sizes", "1000,10000", "--repeat", "1")
    report = json.loads(out)
    assert code == 0 and [r["n"] for r in report["rows"]] == [1000, 10000]
    assert 9.5 <= report["steps"][0]["size_ratio"] <= 10.5
    code, out, _ = run(capsys, "bench", "encrypt", "--sizes", "1000,10000,100000")
    assert "Sample Size" in out and "linear:" in out and len(out.splitlines()) == 7


def test_global_flags_after_subcommand(env, capsys):
    setup_table(capsys, n=20, profile="minimal")
    code, out, _ = run(capsys, "query", "SELECT id FROM cc LIMIT 1", "--keys", "k.json", "--schema", "s.json",
                       "--json")
    assert code == 0 and json.loads(out)["columns"] == ["id"]
