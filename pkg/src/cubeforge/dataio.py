"""Schemas, TAB-separated input files, synthetic data and delta splitting."""

from __future__ import annotations

import datetime as _dt
import math
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

from .errors import ConfigError, DataError
from .lattice import MAX_DIMS, Dimension

DIM_TYPES = ("string", "int", "date")
MEASURE_TYPES = ("int", "float", "number")


@dataclass(frozen=True)
class Column:
    kind: str   # dim | measure
    name: str
    type: str


@dataclass(frozen=True)
class Schema:
    columns: tuple

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate column names in schema: {names}")
        if not self.dims:
            raise ConfigError("schema needs at least one dimension")
        if not self.measures:
            raise ConfigError("schema needs at least one measure")
        if len(self.dims) > MAX_DIMS:
            raise ConfigError(f"at most {MAX_DIMS} dimensions are supported")
        for c in self.columns:
            allowed = DIM_TYPES if c.kind == "dim" else MEASURE_TYPES
            if c.type not in allowed:
                raise ConfigError(f"{c.kind} {c.name}: type must be one of {allowed}")

    @property
    def dims(self) -> list:
        return [c for c in self.columns if c.kind == "dim"]

    @property
    def measures(self) -> list:
        return [c for c in self.columns if c.kind == "measure"]

    @property
    def n_dims(self) -> int:
        return len(self.dims)

    @property
    def measure_names(self) -> list:
        return [c.name for c in self.measures]

    def dimensions(self) -> list:
        return [Dimension(i, c.name, c.type) for i, c in enumerate(self.dims)]

    def text(self) -> str:
        return "".join(f"{c.kind} {c.name} {c.type}\n" for c in self.columns)

    def save(self, path) -> None:
        Path(path).write_text(self.text())

    @classmethod
    def parse(cls, text: str) -> "Schema":
        cols = []
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] not in ("dim", "measure") or len(parts) not in (2, 3):
                raise ConfigError(f"schema line {no}: expected 'dim <name> <type>' or 'measure <name> [type]'")
            if parts[0] == "dim":
                if len(parts) != 3:
                    raise ConfigError(f"schema line {no}: dimension {parts[1]} needs a type")
                cols.append(Column("dim", parts[1], parts[2]))
            else:
                cols.append(Column("measure", parts[1], parts[2] if len(parts) == 3 else "number"))
        return cls(tuple(cols))

    @classmethod
    def load(cls, path) -> "Schema":
        try:
            return cls.parse(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read schema {path}: {exc}") from exc


LINEITEM_DIMS = (("partkey", "int"), ("orderkey", "int"), ("suppkey", "int"), ("shipdate", "date"))


def default_schema(n_dims: int, measures: Sequence[str] = ("quantity",)) -> Schema:
    """Lineitem-like schema: the four classic dimensions first, then ``dim5``..."""
    if not 1 <= n_dims <= MAX_DIMS:
        raise ConfigError(f"dimension count must be in 1..{MAX_DIMS}")
    cols = [Column("dim", name, t) for name, t in LINEITEM_DIMS[:n_dims]]
    cols += [Column("dim", f"dim{i + 1}", "int") for i in range(len(cols), n_dims)]
    cols += [Column("measure", m, "int") for m in measures]
    return Schema(tuple(cols))


# -- parsing ---------------------------------------------------------------------

def parse_date(text: str) -> int:
    if len(text) == 8 and text.isdigit():
        _dt.date(int(text[:4]), int(text[4:6]), int(text[6:]))
        return int(text)
    d = _dt.date.fromisoformat(text)
    return d.year * 10000 + d.month * 100 + d.day


def _measure_parser(t: str):
    if t == "int":
        return int
    if t == "float":
        def f(x):
            v = float(x)
            if not math.isfinite(v):
                raise ValueError("non-finite measure")
            return v
        return f

    def number(x):
        try:
            return int(x)
        except ValueError:
            v = float(x)
            if not math.isfinite(v):
                raise ValueError("non-finite measure") from None
            return v
    return number


def _dim_parser(t: str):
    if t == "int":
        return int
    if t == "date":
        return parse_date
    return lambda x: x


class LineParser:
    """Turns one input line into ``(dim values..., measure values...)``."""

    def __init__(self, schema: Schema):
        self.width = len(schema.columns)
        dim_pos = [i for i, c in enumerate(schema.columns) if c.kind == "dim"]
        mea_pos = [i for i, c in enumerate(schema.columns) if c.kind == "measure"]
        self.order = dim_pos + mea_pos
        parsers = {i: (_dim_parser(c.type) if c.kind == "dim" else _measure_parser(c.type))
                   for i, c in enumerate(schema.columns)}
        self.plan = [(i, parsers[i]) for i in self.order]
        self.all_int = all(c.type == "int" for c in schema.columns) and self.order == list(range(self.width))

    def __call__(self, line: str) -> Optional[tuple]:
        fields = line.split("\t")
        if len(fields) != self.width:
            return None
        try:
            if self.all_int:
                return tuple(map(int, fields))
            return tuple(p(fields[i]) for i, p in self.plan)
        except (ValueError, OverflowError):
            return None


class Split:
    """Lines of one byte range; iterate to get parsed tuples.

    After iteration ``bad_records`` counts the malformed lines and
    ``bad_lines`` holds them.
    """

    def __init__(self, path, start: int, end: int, parser: LineParser):
        self.path = Path(path)
        self.start = start
        self.end = end
        self.parser = parser
        self.bad_records = 0
        self.bad_lines: list = []

    def __iter__(self) -> Iterator[tuple]:
        self.bad_records = 0
        self.bad_lines = []
        parse = self.parser
        left = self.end - self.start
        with open(self.path, "rb", buffering=1 << 20) as fh:
            fh.seek(self.start)
            for raw in fh:
                if left <= 0:
                    break
                left -= len(raw)
                line = raw.decode("utf-8", errors="replace").rstrip("\r\n")
                if not line:
                    continue
                row = parse(line)
                if row is None:
                    self.bad_records += 1
                    self.bad_lines.append(line)
                    continue
                yield row


class Dataset:
    def __init__(self, path, schema: Schema):
        self.path = Path(path)
        self.schema = schema
        try:
            self.size = os.path.getsize(self.path)
        except OSError as exc:
            raise DataError(f"cannot read input {path}: {exc}") from exc
        self.parser = LineParser(schema)

    def boundaries(self, m: int) -> list:
        """``m + 1`` offsets, each at a line start (or end of file)."""
        if m < 1:
            raise ConfigError("need at least one split")
        cuts = [0]
        with open(self.path, "rb") as fh:
            for k in range(1, m):
                pos = max(cuts[-1], self.size * k // m)
                if pos >= self.size:
                    cuts.append(self.size)
                    continue
                if pos > 0:
                    fh.seek(pos - 1)
                    fh.readline()
                    pos = fh.tell()
                cuts.append(min(pos, self.size))
        cuts.append(self.size)
        return cuts

    def splits(self, m: int) -> list:
        cuts = self.boundaries(m)
        return [Split(self.path, a, b, self.parser) for a, b in zip(cuts, cuts[1:])]

    def rows(self) -> list:
        out = []
        for sp in self.splits(1):
            out.extend(sp)
        return out


def parse_dataset(path, schema: Schema) -> Dataset:
    return Dataset(path, schema)


def read_rows(path, schema: Schema, max_bad: float = 0.01) -> list:
    """Every well-formed tuple of a file; too many malformed lines is an error."""
    sp = Dataset(path, schema).splits(1)[0]
    rows = list(sp)
    if sp.bad_records and sp.bad_records > max_bad * (sp.bad_records + len(rows)):
        raise DataError(f"{sp.bad_records} malformed lines in {path}")
    return rows


# -- generation --------------------------------------------------------------------

_EPOCH_DAY = _dt.date(1992, 1, 1).toordinal()


def _dim_value(col: Column, k: int):
    if col.type == "int":
        return k
    if col.type == "date":
        d = _dt.date.fromordinal(_EPOCH_DAY + k)
        return d.year * 10000 + d.month * 100 + d.day
    return f"{col.name}{k}"


def format_row(row: Sequence) -> str:
    return "\t".join(map(str, row))


def generate_synthetic(schema: Schema, rows: int, cardinalities: Sequence[int], seed: int, out) -> Path:
    """Uniform dimension values, integer measures in [1, 50]."""
    if rows < 0:
        raise ConfigError("rows must be >= 0")
    dims = schema.dims
    if len(cardinalities) == 1:
        cardinalities = list(cardinalities) * len(dims)
    if len(cardinalities) != len(dims):
        raise ConfigError(f"{len(cardinalities)} cardinalities for {len(dims)} dimensions")
    if any(c < 1 for c in cardinalities):
        raise ConfigError("cardinalities must be >= 1")
    rng = random.Random(seed)
    card_of = dict(zip((c.name for c in dims), cardinalities))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    cols = schema.columns
    with open(tmp, "w", encoding="utf-8", buffering=1 << 20) as fh:
        buf = []
        for _ in range(rows):
            vals = []
            for c in cols:
                if c.kind == "dim":
                    vals.append(_dim_value(c, rng.randrange(card_of[c.name])))
                elif c.type == "float":
                    vals.append(float(rng.randint(1, 50)))
                else:
                    vals.append(rng.randint(1, 50))
            buf.append(format_row(vals))
            if len(buf) >= 8192:
                fh.write("\n".join(buf) + "\n")
                buf.clear()
        if buf:
            fh.write("\n".join(buf) + "\n")
    os.replace(tmp, out)
    return out


def delta_size(rows: int, fraction: float) -> int:
    k = math.floor(fraction * rows / (1 + fraction) + 0.5)
    if rows >= 2:
        k = max(k, 1)
    return min(k, rows)


def split_delta(path, fraction: float, seed: int, base_out=None, delta_out=None) -> tuple:
    """Move ``round(fraction * rows / (1 + fraction))`` random lines into a delta file.

    Both outputs keep the original line order.
    """
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must be in (0, 1]")
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").split("\n") if ln]
    k = delta_size(len(lines), fraction)
    chosen = set(random.Random(seed).sample(range(len(lines)), k))
    base_out = Path(base_out) if base_out else path.with_name(path.stem + ".base" + path.suffix)
    delta_out = Path(delta_out) if delta_out else path.with_name(path.stem + ".delta" + path.suffix)
    base = [ln for i, ln in enumerate(lines) if i not in chosen]
    delta = [ln for i, ln in enumerate(lines) if i in chosen]
    base_out.write_text("".join(ln + "\n" for ln in base), encoding="utf-8")
    delta_out.write_text("".join(ln + "\n" for ln in delta), encoding="utf-8")
    return base_out, delta_out
