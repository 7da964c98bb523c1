"""Command line entry point: ``opeproxy <command> [options]``.

Global options may appear before or after the command.  Every failure exits
with the ``exit_code`` of its error class (see :mod:`opeproxy.errors`).
"""

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass

from filelock import FileLock

from . import bench, crypto, datagen, ingest, ope, query
from .backend import Backend, LoopbackBackend, RemoteBackend, serve
from .errors import BackendError, InputError, OpeProxyError, SchemaError
from .schema import load_schema

logger = logging.getLogger("opeproxy")

DEFAULT_KEYS = "opeproxy-keys.json"
DEFAULT_STATE_DIR = ".opeproxy"
DEFAULT_BENCH_SIZES = (10**4, 10**5, 10**6)

_GLOBAL_DEFAULTS = {
    "backend": None,
    "embedded_backend": False,
    "keys": DEFAULT_KEYS,
    "schema": None,
    "state_dir": DEFAULT_STATE_DIR,
    "chunk_size": ingest.DEFAULT_CHUNK_SIZE,
    "seed": 0,
    "json": False,
    "verbose": 0,
}


@dataclass(frozen=True)
class CliConfig:
    backend: tuple | None
    embedded_backend: bool
    keys: str
    schema: str | None
    state_dir: str
    chunk_size: int
    seed: int
    json: bool
    verbose: int


def _address(text):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return (host or "127.0.0.1", int(port))


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _sizes(text):
    try:
        sizes = [int(float(s)) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated sizes, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return sizes


def _global_options():
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    s = argparse.SUPPRESS
    g.add_argument("--backend", type=_address, default=s, metavar="HOST:PORT", help="remote backend address")
    g.add_argument("--embedded-backend", action="store_true", default=s, help="run the backend in-process")
    g.add_argument("--keys", default=s, metavar="PATH", help=f"keyset file (default {DEFAULT_KEYS})")
    g.add_argument("--schema", default=s, metavar="PATH", help="extended table schema (JSON)")
    g.add_argument("--state-dir", default=s, metavar="DIR", help=f"proxy state directory (default {DEFAULT_STATE_DIR})")
    g.add_argument("--chunk-size", type=_positive, default=s, metavar="ROWS", help="rows per chunk")
    g.add_argument("--seed", type=int, default=s, help="random seed for generated data")
    g.add_argument("--json", action="store_true", default=s, help="machine-readable output")
    g.add_argument("-v", "--verbose", action="count", default=s, help="more logging")
    return p


def build_parser():
    common = _global_options()
    parser = argparse.ArgumentParser(prog="opeproxy", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("keygen", parents=[common], help="create a keyset file")
    p.add_argument("--out", metavar="PATH", help="keyset path (default: --keys)")
    p.add_argument("--paillier-bits", type=int, default=crypto.DEFAULT_PAILLIER_BITS)
    p.add_argument("--force", action="store_true", help="overwrite an existing keyset")

    p = sub.add_parser("genload", parents=[common], help="write N simulated credit-card rows as CSV")
    p.add_argument("n", type=int, metavar="N")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--profile", choices=sorted(datagen.PROFILES), default="full")
    p.add_argument("--schema-out", metavar="PATH", help="also write the matching schema")
    p.add_argument("--dup-fraction", type=float, default=0.1)

    p = sub.add_parser("load", parents=[common], help="encrypt and upload CSV/NDJSON files")
    p.add_argument("inputs", nargs="+", metavar="FILE")
    p.add_argument("--format", choices=("csv", "json", "ndjson"), help="input format (default: by extension)")
    p.add_argument(
        "--reencode-on-collision",
        action="store_true",
        help="re-encode and continue on an order code collision (GC required afterwards)",
    )
    p.add_argument("--manifest", metavar="PATH", help="where to write the load manifest")

    p = sub.add_parser("query", parents=[common], help="run a query and print decrypted rows")
    p.add_argument("sql", metavar="SQL")
    p.add_argument("--out", metavar="PATH", help="write CSV here instead of standard output")

    p = sub.add_parser("gc", parents=[common], help="merge chunks and apply pending re-encodings")
    p.add_argument("--force", action="store_true", help="rewrite even a single current chunk")

    p = sub.add_parser("bench", parents=[common], help="benchmarks")
    bsub = p.add_subparsers(dest="bench_command", required=True, metavar="BENCH")
    b = bsub.add_parser("encrypt", parents=[common], help="encryption time against sample size")
    b.add_argument("--sizes", type=_sizes, default=list(DEFAULT_BENCH_SIZES), metavar="N,N,...")
    b.add_argument("--repeat", type=_positive, help="timing repetitions per size (best is kept)")

    p = sub.add_parser("serve", parents=[common], help="serve the backend over TCP")
    p.add_argument("--listen", type=_address, default=("127.0.0.1", 7878), metavar="HOST:PORT")
    return parser


def config_from(args):
    values = {k: getattr(args, k, v) for k, v in _GLOBAL_DEFAULTS.items()}
    if values["backend"] is not None and values["embedded_backend"]:
        raise BackendError("bad_request", "--backend and --embedded-backend are mutually exclusive")
    return CliConfig(**values)


# --- helpers ---------------------------------------------------------------------------


def _emit(cfg, report, text=None, stream=None):
    stream = stream or sys.stdout
    if cfg.json:
        json.dump(report, stream, indent=2, default=str)
        stream.write("\n")
    else:
        stream.write((text if text is not None else _plain_report(report)) + "\n")


def _plain_report(report):
    return "\n".join(f"{k}: {v}" for k, v in report.items())


def _open_backend(cfg):
    if cfg.backend is not None:
        try:
            return RemoteBackend(cfg.backend)
        except OSError as exc:
            raise BackendError("unreachable", f"{cfg.backend[0]}:{cfg.backend[1]}: {exc}") from None
    return LoopbackBackend(Backend(os.path.join(cfg.state_dir, "backend")))


def _require_schema(cfg):
    if cfg.schema is None:
        raise SchemaError("--schema is required for this command")
    return load_schema(cfg.schema)


def _state_path(cfg, schema):
    spec = schema.ope_column
    return os.path.join(cfg.state_dir, f"{schema.table}.{spec.name}.ope")


def _read_state(cfg, schema, keyset):
    spec = schema.ope_column
    if spec is None:
        return None
    path = _state_path(cfg, schema)
    if not os.path.exists(path):
        return ope.new_state(spec.data_type, spec.scale)
    key = keyset.require_key(schema.table, spec.name, "order_preserving")
    with open(path, "rb") as fh:
        return ope.load_state(fh.read(), key)


def _write_state(cfg, schema, keyset, state):
    if state is None:
        return
    key = keyset.require_key(schema.table, schema.ope_column.name, "order_preserving")
    _atomic_write(_state_path(cfg, schema), ope.save_state(state, key))


def _atomic_write(path, data):
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _lock(cfg, schema):
    os.makedirs(cfg.state_dir, exist_ok=True)
    return FileLock(os.path.join(cfg.state_dir, f"{schema.table}.lock"))


# --- commands --------------------------------------------------------------------------


def cmd_keygen(cfg, args):
    path = args.out or cfg.keys
    keyset = crypto.Keyset.generate(args.paillier_bits)
    keyset.save(path, force=args.force)
    report = {"keyset": path, "paillier_bits": keyset.paillier_public.n.bit_length()}
    _emit(cfg, report, f"wrote keyset {path} (Paillier modulus {report['paillier_bits']} bits)")
    return 0


def cmd_genload(cfg, args):
    if args.n < 1:
        raise InputError(f"genload needs N >= 1, got {args.n}")
    if not 0.0 <= args.dup_fraction < 1.0:
        raise InputError("--dup-fraction must be in [0, 1)")
    datagen.genload(args.n, args.out, cfg.seed, args.profile, args.dup_fraction)
    report = {"rows": args.n, "out": args.out, "profile": args.profile, "seed": cfg.seed}
    if args.schema_out:
        with open(args.schema_out, "w", encoding="utf-8") as fh:
            fh.write(datagen.profile_schema(args.profile).to_json())
        report["schema"] = args.schema_out
    _emit(cfg, report, f"wrote {args.n} rows to {args.out}")
    return 0


def cmd_load(cfg, args):
    schema = _require_schema(cfg)
    keyset = crypto.Keyset.load(cfg.keys)
    for path in args.inputs:
        if not os.path.isfile(path):
            raise InputError(f"input file {path} not found")
    backend = _open_backend(cfg)
    on_collision = "reencode" if args.reencode_on_collision else "abort"
    with _lock(cfg, schema):
        state = _read_state(cfg, schema, keyset)
        manifest = None
        try:
            report = ingest.load(
                args.inputs,
                schema,
                keyset,
                backend,
                state,
                chunk_size=cfg.chunk_size,
                fmt="json" if args.format == "ndjson" else args.format,
                tmp_dir=cfg.state_dir,
                on_collision=on_collision,
            )
            manifest = report.as_dict()
        except OpeProxyError as exc:
            manifest = dict(getattr(exc, "partial_manifest", {}), error=str(exc))
            raise
        finally:
            # codes already uploaded must stay reproducible, so persist even on failure
            _write_state(cfg, schema, keyset, state)
            if manifest is not None:
                _write_manifest(cfg, schema, args.manifest, manifest)
    ratio = manifest["compression_ratio"]
    text = (
        f"loaded {manifest['rows']} rows into {schema.table} in {len(manifest['chunks'])} chunk(s); "
        f"compressed/raw = {ratio:.3f}" if ratio is not None else f"loaded 0 rows into {schema.table}"
    )
    if manifest["gc_required"]:
        text += "\norder codes were re-encoded: run `opeproxy gc` before querying"
    _emit(cfg, manifest, text)
    return 0


def _write_manifest(cfg, schema, path, manifest):
    if path is None:
        directory = os.path.join(cfg.state_dir, "manifests")
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"{schema.table}-{time.strftime('%Y%m%dT%H%M%S')}-{os.getpid()}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")


def cmd_query(cfg, args):
    schema = _require_schema(cfg)
    keyset = crypto.Keyset.load(cfg.keys) if os.path.exists(cfg.keys) else None
    state = None
    if schema.ope_column is not None and keyset is not None:
        if keyset.column_key(schema.table, schema.ope_column.name, "order_preserving") is not None:
            state = _read_state(cfg, schema, keyset)
    backend = _open_backend(cfg)
    result = query.run_query(backend, args.sql, schema, keyset, state)
    if result.sum is not None:
        rows = [[result.sum]]
    else:
        rows = [[_cell(schema, c, v) for c, v in zip(result.columns, r)] for r in result.rows]
    if cfg.json and not args.out:
        _emit(cfg, {"columns": result.columns, "rows": rows, "chunks": len(result.chunk_counts)})
        return 0
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            _write_rows(fh, result.columns, rows)
        _emit(cfg, {"out": args.out, "rows": len(rows)}, f"wrote {len(rows)} row(s) to {args.out}", sys.stderr)
    else:
        _write_rows(sys.stdout, result.columns, rows)
    return 0


def _cell(schema, column, value):
    if value is None:
        return ""
    if isinstance(value, (bytes, str)):
        return value.decode("ascii") if isinstance(value, bytes) else value
    return schema.column(column).format_value(value)


def _write_rows(fh, columns, rows):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)


def cmd_gc(cfg, args):
    schema = _require_schema(cfg)
    keyset = crypto.Keyset.load(cfg.keys)
    backend = _open_backend(cfg)
    with _lock(cfg, schema):
        state = _read_state(cfg, schema, keyset)
        report = ingest.garbage_collect(backend, schema, keyset, state, force=args.force)
        if report is not None:
            _write_state(cfg, schema, keyset, state)
    if report is None:
        _emit(cfg, {"table": schema.table, "changed": False}, f"{schema.table}: nothing to collect")
    else:
        report["changed"] = True
        _emit(
            cfg,
            report,
            f"{schema.table}: merged {len(report['merged_chunks'])} chunk(s) into chunk {report['new_chunk']}"
            f" ({report['rows']} rows, epoch {report['epoch']})",
        )
    return 0


def cmd_bench_encrypt(cfg, args):
    rows = bench.bench_encrypt(args.sizes, seed=cfg.seed, repeat=args.repeat)
    verdict = bench.linearity(rows)
    _emit(cfg, {"rows": rows, **verdict}, bench.format_table(rows, verdict))
    return 0


def cmd_serve(cfg, args):
    root = os.path.join(cfg.state_dir, "backend")
    server = serve(Backend(root), args.listen, background=True)
    host, port = server.server_address[:2]
    _emit(cfg, {"listen": f"{host}:{port}", "root": root}, f"serving {root} on {host}:{port}")
    sys.stdout.flush()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.shutdown()
    return 0


_COMMANDS = {
    "keygen": cmd_keygen,
    "genload": cmd_genload,
    "load": cmd_load,
    "query": cmd_query,
    "gc": cmd_gc,
    "bench": cmd_bench_encrypt,
    "serve": cmd_serve,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from(args)
        level = logging.WARNING - 10 * min(cfg.verbose, 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return _COMMANDS[args.command](cfg, args)
    except OpeProxyError as exc:
        print(f"opeproxy: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
