"""Query client: SQL subset -> encrypted per-chunk plan -> merged plaintext.

Grammar (keywords case-insensitive)::

    SELECT (* | col [, col]... | SUM(col)) FROM table
      [WHERE pred [AND pred]...]
      [ORDER BY col [ASC | DESC]]
      [LIMIT n]

    pred := col (= | < | <= | > | >=) literal  |  col CONTAINS 'words'
    literal := integer | decimal | 'text'   ('' escapes a quote)

Which operations a column allows depends on its scheme:

=================  =================================================
scheme             server-side operations
=================  =================================================
none               = < <= > >= and ORDER BY on plaintext
deterministic      =
pseudonym          =
order_preserving   = < <= > >= and ORDER BY, via order codes
searchwords        CONTAINS
homomorphic        SUM
probabilistic      none (projection only)
=================  =================================================
"""

import heapq
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal

from . import crypto, ope
from .errors import BackendError, EpochError, KeysetError, QuerySyntaxError, ReencodeRequired, SchemeError
from .ingest import column_fields, ope_key, require_current_epoch, split_combined
from .schema import quantize_exact

COMPARISONS = ("=", "<", "<=", ">", ">=")

_ALLOWED_OPS = {
    "none": set(COMPARISONS),
    "deterministic": {"="},
    "pseudonym": {"="},
    "order_preserving": set(COMPARISONS),
    "searchwords": {"contains"},
    "homomorphic": set(),
    "probabilistic": set(),
}
_ORDERABLE = {"none", "order_preserving"}


@dataclass(frozen=True)
class Predicate:
    column: str
    op: str
    literal: object


@dataclass
class QueryPlan:
    table: str
    columns: list | None = None  # None means SELECT *
    sum_column: str | None = None
    predicates: list = field(default_factory=list)
    order_by: str | None = None
    descending: bool = False
    limit: int | None = None

    def output_columns(self, schema):
        if self.sum_column:
            return []
        return list(self.columns) if self.columns is not None else schema.names


@dataclass
class EncryptedPlan:
    table: str
    epoch: int | None
    select: list
    where: list
    order_by: dict | None
    limit: int | None
    sum: str | None

    def to_wire(self):
        return {
            "table": self.table,
            "epoch": self.epoch,
            "select": self.select,
            "where": self.where,
            "order_by": self.order_by,
            "limit": self.limit,
            "sum": self.sum,
        }


@dataclass
class ResultSet:
    columns: list
    rows: list
    sum: int | None = None
    chunk_counts: dict = field(default_factory=dict)


# --- parsing -------------------------------------------------------------------------

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<num>-?\d+(?:\.\d+)?)
      | (?P<str>'(?:[^']|'')*')
      | (?P<op><=|>=|=|<|>)
      | (?P<punct>[(),*])
      | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    )""",
    re.VERBOSE,
)
_KEYWORDS = {"SELECT", "FROM", "WHERE", "AND", "ORDER", "BY", "ASC", "DESC", "LIMIT", "SUM", "CONTAINS"}


def _tokenize(text):
    tokens = []
    pos = 0
    text = text.rstrip().rstrip(";")
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise QuerySyntaxError(f"unexpected character {text[pos:].lstrip()[:1]!r}", pos)
        kind = m.lastgroup
        value = m.group(kind)
        start = m.start(kind)
        if kind == "ident" and value.upper() in _KEYWORDS:
            kind, value = "kw", value.upper()
        elif kind == "str":
            value = value[1:-1].replace("''", "'")
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def accept(self, kind, value=None):
        k, v, _ = self.peek()
        if k == kind and (value is None or v == value):
            return self.next()
        return None

    def expect(self, kind, value=None, what=None):
        tok = self.accept(kind, value)
        if tok is None:
            k, v, pos = self.peek()
            found = "end of query" if k == "end" else repr(v)
            raise QuerySyntaxError(f"expected {what or value or kind}, found {found}", pos)
        return tok

    def parse(self):
        self.expect("kw", "SELECT")
        plan = QueryPlan(table="")
        if self.accept("kw", "SUM"):
            self.expect("punct", "(")
            plan.sum_column = self.expect("ident", what="column name")[1]
            self.expect("punct", ")")
        elif self.accept("punct", "*"):
            plan.columns = None
        else:
            cols = [self.expect("ident", what="column name")[1]]
            while self.accept("punct", ","):
                cols.append(self.expect("ident", what="column name")[1])
            plan.columns = cols
        self.expect("kw", "FROM")
        plan.table = self.expect("ident", what="table name")[1]
        if self.accept("kw", "WHERE"):
            plan.predicates.append(self.predicate())
            while self.accept("kw", "AND"):
                plan.predicates.append(self.predicate())
        if self.accept("kw", "ORDER"):
            self.expect("kw", "BY")
            plan.order_by = self.expect("ident", what="column name")[1]
            if self.accept("kw", "DESC"):
                plan.descending = True
            else:
                self.accept("kw", "ASC")
        if self.accept("kw", "LIMIT"):
            _, value, pos = self.expect("num", what="row count")
            if not value.isdigit():
                raise QuerySyntaxError("LIMIT needs a non-negative integer", pos)
            plan.limit = int(value)
        self.expect("end", what="end of query")
        return plan

    def predicate(self):
        column = self.expect("ident", what="column name")[1]
        if self.accept("kw", "CONTAINS"):
            return Predicate(column, "contains", self.expect("str", what="quoted text")[1])
        op = self.expect("op", what="comparison operator")[1]
        k, v, pos = self.next()
        if k == "num":
            literal = Decimal(v) if "." in v else int(v)
        elif k == "str":
            literal = v
        else:
            raise QuerySyntaxError("expected a literal", pos)
        return Predicate(column, op, literal)


def _coerce_literal(spec, literal):
    if spec.data_type == "text":
        if not isinstance(literal, str):
            raise SchemeError(f"column {spec.name!r} is text; quote the literal")
        return literal
    if isinstance(literal, str):
        raise SchemeError(f"column {spec.name!r} is {spec.type_name}; literal must be a number")
    if spec.data_type == "integer":
        if isinstance(literal, Decimal):
            raise SchemeError(f"column {spec.name!r} is integer; got decimal literal {literal}")
        return literal
    value = quantize_exact(Decimal(literal), spec.scale)
    if value is None:
        raise SchemeError(f"column {spec.name!r} has scale {spec.scale}; literal {literal} is finer")
    return value


def validate_plan(plan, schema):
    """Check the plan against ``schema`` and type its literals in place."""
    if plan.table != schema.table:
        raise SchemeError(f"unknown table {plan.table!r}")
    for name in plan.columns or []:
        schema.column(name)
    if plan.sum_column:
        spec = schema.column(plan.sum_column)
        if spec.scheme != "homomorphic":
            raise SchemeError(f"SUM({spec.name}) needs a homomorphic column, {spec.name!r} is {spec.scheme}")
        if plan.order_by or plan.limit is not None:
            raise SchemeError("SUM cannot be combined with ORDER BY or LIMIT")
    typed = []
    for pred in plan.predicates:
        spec = schema.column(pred.column)
        if pred.op not in _ALLOWED_OPS[spec.scheme]:
            raise SchemeError(f"operator {pred.op!r} is not supported on column {spec.name!r} ({spec.scheme})")
        literal = pred.literal if pred.op == "contains" else _coerce_literal(spec, pred.literal)
        typed.append(Predicate(pred.column, pred.op, literal))
    plan.predicates = typed
    if plan.order_by:
        spec = schema.column(plan.order_by)
        if spec.scheme not in _ORDERABLE:
            raise SchemeError(f"cannot ORDER BY column {spec.name!r} ({spec.scheme})")
    return plan


def parse_query(text, schema=None):
    plan = _Parser(text).parse()
    if schema is not None:
        validate_plan(plan, schema)
    return plan


# --- rewriting -----------------------------------------------------------------------


def _range_predicate(field_name, op, probe_result):
    if probe_result.exact:
        return {"field": field_name, "kind": "code", "op": op, "value": str(probe_result.code)}
    if op == "=":
        return {"op": "false"}
    # no stored code lies inside the gap, so strictness can be tightened
    tightened = {"<": "<", "<=": "<", ">": ">", ">=": ">"}[op]
    return {"field": field_name, "kind": "code", "op": tightened, "value": str(probe_result.code)}


def rewrite(plan, schema, keyset, ope_state=None):
    """Replace literals by ciphertexts, tokens or order-code bounds."""
    where = []
    for pred in plan.predicates:
        spec = schema.column(pred.column)
        if spec.scheme == "none":
            where.append(
                {
                    "field": spec.name,
                    "kind": "plain",
                    "type": spec.type_name,
                    "op": pred.op,
                    "value": spec.format_value(pred.literal),
                }
            )
            continue
        key = keyset.column_key(schema.table, spec.name, spec.scheme) if keyset is not None else None
        if key is None:
            raise KeysetError(f"no key for column {spec.name!r}; cannot filter on it")
        enc_field = f"{spec.name}__enc"
        if spec.scheme == "deterministic":
            ct = crypto.det_encrypt(key, spec.format_value(pred.literal).encode("utf-8"))
            where.append({"field": enc_field, "kind": "bytes", "op": "=", "value": crypto.b64(ct)})
        elif spec.scheme == "pseudonym":
            tok = crypto.pseudonym(key, spec.format_value(pred.literal).encode("utf-8"))
            where.append({"field": enc_field, "kind": "bytes", "op": "=", "value": crypto.b64(tok)})
        elif spec.scheme == "searchwords":
            for tok in crypto.searchwords(key, pred.literal):
                where.append(
                    {"field": f"{spec.name}__sw", "kind": "token", "op": "contains", "value": crypto.b64(tok)}
                )
        elif spec.scheme == "order_preserving":
            if ope_state is None:
                raise KeysetError(f"range predicates on {spec.name!r} need the column's OPE state")
            res = ope.probe(ope_state, ope_key(spec, pred.literal))
            if res.ambiguous:
                raise ReencodeRequired(f"no order code left near {pred.literal!r} in {spec.name!r}; re-encode required")
            where.append(_range_predicate(f"{spec.name}__ope", pred.op, res))
        else:  # pragma: no cover - validate_plan rejects these
            raise SchemeError(f"column {spec.name!r} ({spec.scheme}) supports no predicates")

    order_by = None
    if plan.order_by:
        spec = schema.column(plan.order_by)
        if spec.scheme == "order_preserving":
            order_by = {"field": f"{spec.name}__ope", "kind": "code", "desc": plan.descending}
        else:
            order_by = {"field": spec.name, "kind": "plain", "type": spec.type_name, "desc": plan.descending}

    select = []
    for name in plan.output_columns(schema):
        select.append(column_fields(schema.column(name))[0])
    epoch = ope_state.epoch if (ope_state is not None and schema.ope_column is not None) else None
    return EncryptedPlan(
        table=schema.table,
        epoch=epoch,
        select=select,
        where=where,
        order_by=order_by,
        limit=plan.limit,
        sum=f"{plan.sum_column}__enc" if plan.sum_column else None,
    )


# --- execution and merge ---------------------------------------------------------------


def execute(backend, eplan, chunks=None, max_workers=4):
    """Run ``eplan`` on every chunk; returns per-chunk results in chunk order."""
    if chunks is None:
        chunks = backend.list_chunks(eplan.table)
    chunks = sorted(chunks, key=lambda c: c["chunk_id"])
    if eplan.epoch is None:
        epochs = {c["epoch"] for c in chunks}
        if len(epochs) > 1:
            raise EpochError(f"table mixes epochs {sorted(epochs)}; GC required")
        eplan.epoch = epochs.pop() if epochs else 0
    require_current_epoch(chunks, eplan.epoch)
    wire = eplan.to_wire()
    ids = [c["chunk_id"] for c in chunks]
    try:
        if max_workers > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=min(max_workers, len(ids))) as pool:
                return list(pool.map(lambda cid: backend.exec_chunk_query(eplan.table, cid, wire), ids))
        return [backend.exec_chunk_query(eplan.table, cid, wire) for cid in ids]
    except BackendError as exc:
        if exc.code == "epoch_mismatch":
            raise EpochError(str(exc)) from None
        raise


class _Desc:
    __slots__ = ("v",)

    def __init__(self, v):
        self.v = v

    def __lt__(self, other):
        return other.v < self.v

    def __eq__(self, other):
        return self.v == other.v


def _order_value(schema, eplan, text):
    if eplan.order_by["kind"] == "code":
        return int(text)
    spec = schema.column(eplan.order_by["field"])
    return spec.parse_value(text)


def kway_merge(runs, descending=False):
    """Merge sorted runs of ``(order_key, chunk_id, row_index, row)``.

    Each run is sorted by order key (descending if asked) and then by row
    index; ties across runs fall back to ``(chunk_id, row_index)``.
    """
    wrap = _Desc if descending else (lambda v: v)
    return list(heapq.merge(*runs, key=lambda item: (wrap(item[0]), item[1], item[2])))


def merge(results, eplan, schema=None, public_key=None):
    """Combine per-chunk results into ``(rows, encrypted_sum)``."""
    if eplan.sum is not None:
        if public_key is None:
            raise KeysetError("combining SUM partials needs the Paillier public key")
        acc = 1
        for r in results:
            acc = crypto.paillier_add(public_key, acc, int(r["sum"]))
        return [], acc
    if eplan.order_by is not None:
        runs = []
        for r in results:
            runs.append(
                [
                    (_order_value(schema, eplan, k), r["chunk_id"], i, row)
                    for k, i, row in zip(r["order_keys"], r["row_index"], r["rows"])
                ]
            )
        rows = [item[3] for item in kway_merge(runs, eplan.order_by.get("desc", False))]
    else:
        rows = [row for r in results for row in r["rows"]]
    if eplan.limit is not None:
        rows = rows[: eplan.limit]
    return rows, None


def decrypt_results(rows, columns, schema, keyset):
    """Plaintext cells for every column whose key ``keyset`` holds.

    Columns without a key are returned as the stored (opaque) cell text.
    Pseudonym columns are one-way and always come back as their token.
    """
    out_cols = []
    for ci, name in enumerate(columns):
        spec = schema.column(name)
        cells = [r[ci] for r in rows]
        out_cols.append(_decrypt_column(spec, schema, keyset, cells))
    return [list(r) for r in zip(*out_cols)] if rows else []


def _decrypt_column(spec, schema, keyset, cells):
    scheme = spec.scheme
    if scheme == "none":
        return [spec.parse_value(c) for c in cells]
    if scheme == "pseudonym" or keyset is None:
        return cells
    if scheme == "homomorphic":
        if keyset.paillier_private is None:
            return cells
        return [crypto.paillier_decrypt(keyset.paillier_private, int(c)) for c in cells]
    if scheme == "searchwords":
        key = keyset.column_key(schema.table, spec.name, "probabilistic")
        if key is None:
            return cells
        return [crypto.prob_decrypt(key, crypto.unb64(c)).decode("utf-8") for c in cells]
    key = keyset.column_key(schema.table, spec.name, scheme)
    if key is None:
        return cells
    if scheme == "probabilistic":
        plain = [crypto.prob_decrypt(key, crypto.unb64(c)) for c in cells]
    elif scheme == "order_preserving":
        plain = crypto.det_decrypt_many(key, [crypto.unb64(split_combined(c)[0]) for c in cells]) if cells else []
    else:
        plain = crypto.det_decrypt_many(key, [crypto.unb64(c) for c in cells]) if cells else []
    return [spec.parse_value(p.decode("utf-8")) for p in plain]


def run_query(backend, text, schema, keyset=None, ope_state=None, max_workers=4):
    """Parse, rewrite, fan out, merge and decrypt one query."""
    plan = parse_query(text, schema)
    eplan = rewrite(plan, schema, keyset, ope_state)
    chunks = backend.list_chunks(schema.table)  # pinned snapshot for the whole query
    results = execute(backend, eplan, chunks, max_workers=max_workers)
    counts = {r["chunk_id"]: r["row_count"] for r in results}
    if eplan.sum is not None:
        public = keyset.paillier_public if keyset is not None else None
        _, enc_sum = merge(results, eplan, schema, public)
        if keyset is None or keyset.paillier_private is None:
            raise KeysetError("decrypting SUM needs the Paillier private key")
        total = crypto.paillier_decrypt(keyset.paillier_private, enc_sum)
        return ResultSet([f"SUM({plan.sum_column})"], [], total, counts)
    rows, _ = merge(results, eplan, schema)
    columns = plan.output_columns(schema)
    return ResultSet(columns, decrypt_results(rows, columns, schema, keyset), None, counts)

