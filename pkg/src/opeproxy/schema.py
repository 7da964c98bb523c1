"""Extended table schema: a type and an encryption scheme per column.

Schema files are JSON::

    {"table": "cc",
     "columns": [{"name": "pan", "type": "integer", "encrypt": "order_preserving"},
                 {"name": "amount", "type": "decimal(2)", "encrypt": "none"}]}
"""

import json
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation, localcontext

from .crypto import SCHEMES
from .errors import SchemaError

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_DECIMAL = re.compile(r"decimal\((\d+)\)\Z")
_INTEGER = re.compile(r"[+-]?\d+")
RESERVED_SUFFIXES = ("__enc", "__ope", "__sw")

# which data types each scheme accepts
_ALLOWED = {
    "none": {"integer", "decimal", "text"},
    "deterministic": {"integer", "decimal", "text"},
    "probabilistic": {"integer", "decimal", "text"},
    "pseudonym": {"integer", "decimal", "text"},
    "searchwords": {"text"},
    "homomorphic": {"integer"},
    "order_preserving": {"integer", "decimal", "text"},
}


def quantize_exact(value, scale):
    """``value`` with exactly ``scale`` places, or ``None`` if that would round.

    Works at any magnitude; the default 28-digit context would raise.
    """
    with localcontext() as ctx:
        ctx.prec = len(value.as_tuple().digits) + abs(value.as_tuple().exponent) + scale + 2
        q = value.quantize(Decimal(1).scaleb(-scale))
    return q if q == value else None


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    data_type: str
    scheme: str
    scale: int = 0

    @property
    def type_name(self):
        return f"decimal({self.scale})" if self.data_type == "decimal" else self.data_type

    @property
    def encrypted(self):
        return self.scheme != "none"

    def parse_value(self, raw):
        """Typed cell from its text form (CSV cell or JSON scalar)."""
        if self.data_type == "text":
            if not isinstance(raw, str):
                raise ValueError(f"expected text, got {type(raw).__name__}")
            return raw
        if isinstance(raw, bool) or raw is None:
            raise ValueError(f"expected {self.type_name}, got {raw!r}")
        if self.data_type == "integer":
            if isinstance(raw, float):
                raise ValueError(f"expected integer, got {raw!r}")
            text = str(raw).strip()
            if not _INTEGER.fullmatch(text):
                raise ValueError(f"expected integer, got {raw!r}")
            value = int(text)
            if self.scheme == "homomorphic" and value < 0:
                raise ValueError("homomorphic columns hold non-negative integers only")
            return value
        try:
            value = Decimal(str(raw).strip())
        except InvalidOperation:
            raise ValueError(f"expected {self.type_name}, got {raw!r}") from None
        if not value.is_finite():
            raise ValueError(f"expected {self.type_name}, got {raw!r}")
        exact = quantize_exact(value, self.scale)
        if exact is None:
            raise ValueError(f"{raw!r} has more than {self.scale} decimal places")
        return exact

    def format_value(self, value):
        """Canonical text of a typed cell; the bytes that get encrypted."""
        if self.data_type == "decimal":
            return f"{value:.{self.scale}f}"
        return str(value)


@dataclass(frozen=True)
class Schema:
    table: str
    columns: tuple

    def column(self, name):
        for spec in self.columns:
            if spec.name == name:
                return spec
        raise SchemaError(f"table {self.table!r} has no column {name!r}")

    @property
    def names(self):
        return [c.name for c in self.columns]

    @property
    def ope_column(self):
        for spec in self.columns:
            if spec.scheme == "order_preserving":
                return spec
        return None

    def to_dict(self):
        return {
            "table": self.table,
            "columns": [{"name": c.name, "type": c.type_name, "encrypt": c.scheme} for c in self.columns],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _column(doc, index):
    if not isinstance(doc, dict):
        raise SchemaError(f"column #{index} must be an object")
    name = doc.get("name")
    if not isinstance(name, str) or not _IDENT.match(name):
        raise SchemaError(f"column #{index}: invalid name {name!r}")
    if name.endswith(RESERVED_SUFFIXES):
        raise SchemaError(f"column {name!r}: names ending in __enc, __ope or __sw are reserved")
    extra = set(doc) - {"name", "type", "encrypt"}
    if extra:
        raise SchemaError(f"column {name!r}: unknown fields {sorted(extra)}")
    type_text = doc.get("type")
    scale = 0
    if type_text in ("integer", "text"):
        data_type = type_text
    elif isinstance(type_text, str) and _DECIMAL.match(type_text):
        data_type, scale = "decimal", int(_DECIMAL.match(type_text).group(1))
    else:
        raise SchemaError(f"column {name!r}: unknown type {type_text!r}")
    scheme = doc.get("encrypt", "none")
    if scheme not in SCHEMES:
        raise SchemaError(f"column {name!r}: unknown encryption scheme {scheme!r}")
    if data_type not in _ALLOWED[scheme]:
        raise SchemaError(f"column {name!r}: scheme {scheme!r} is not valid for type {type_text!r}")
    return ColumnSpec(name, data_type, scheme, scale)


def parse_schema(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("schema must be a JSON object")
    extra = set(doc) - {"table", "columns"}
    if extra:
        raise SchemaError(f"unknown schema fields {sorted(extra)}")
    table = doc.get("table")
    if not isinstance(table, str) or not _IDENT.match(table):
        raise SchemaError(f"invalid table name {table!r}")
    cols = doc.get("columns")
    if not isinstance(cols, list) or not cols:
        raise SchemaError("schema needs at least one column")
    columns = []
    seen = set()
    for i, c in enumerate(cols):
        spec = _column(c, i)
        if spec.name in seen:
            raise SchemaError(f"duplicate column {spec.name!r}")
        seen.add(spec.name)
        columns.append(spec)
    if sum(c.scheme == "order_preserving" for c in columns) > 1:
        raise SchemaError("at most one order_preserving column per table is supported")
    return Schema(table, tuple(columns))


def load_schema(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_schema(fh.read())
    except FileNotFoundError:
        raise SchemaError(f"schema file {path} not found") from None


def validate_header(schema, header):
    """Map each schema column to its position in ``header``."""
    positions = {}
    for i, name in enumerate(header):
        if name in positions:
            raise SchemaError(f"input header repeats column {name!r}")
        positions[name] = i
    missing = [n for n in schema.names if n not in positions]
    if missing:
        raise SchemaError(f"input is missing column(s): {', '.join(missing)}")
    extra = [n for n in header if n not in set(schema.names)]
    if extra:
        raise SchemaError(f"input has column(s) not in schema: {', '.join(extra)}")
    return [positions[n] for n in schema.names]
