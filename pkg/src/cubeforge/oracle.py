"""Brute-force cube and view comparison, kept apart from the cubing code.

Every cuboid is grouped on its own with a dict and every function is
evaluated from its definition over the full value list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from . import lattice
from .errors import ConfigError

MAX_ROWS = 10 ** 6

_SUPPORTED = ("SUM", "COUNT", "MIN", "MAX", "AVG", "MEDIAN")


def _median(xs: list) -> float:
    xs = sorted(xs)
    n = len(xs)
    if n % 2 == 1:
        return float(xs[n // 2])
    lo, hi = xs[n // 2 - 1], xs[n // 2]
    return (lo + hi) / 2


def _apply(name: str, xs: list):
    if name == "SUM":
        return sum(xs)
    if name == "COUNT":
        return len(xs)
    if name == "MIN":
        return min(xs)
    if name == "MAX":
        return max(xs)
    if name == "AVG":
        return sum(xs) / len(xs)
    if name == "MEDIAN":
        return _median(xs)
    raise ConfigError(f"oracle has no definition for {name}")


def _split_label(label: str):
    """``SUM(q)`` -> ``("SUM", "q")``; ``COUNT(*)`` -> ``("COUNT", None)``."""
    name, _, rest = label.partition("(")
    measure = rest.rstrip(")") or None
    return name.upper(), (None if measure == "*" else measure)


@dataclass
class OracleResult:
    functions: tuple                       # labels, e.g. ("SUM(q)", "COUNT(*)")
    cells: dict = field(default_factory=dict)  # canonical id -> {key (dim-index order): values}


def brute_force_cube(rows: Sequence[tuple], n_dims: int, measure_names: Sequence[str],
                     cuboids: Optional[Iterable] = None, functions: Sequence[str] = ("SUM",)) -> OracleResult:
    """Group ``rows`` (dims then measures) on every cuboid independently.

    Keys are tuples of dimension values in ascending dimension index order.
    ``functions`` are labels such as ``SUM(quantity)``; a bare name means the
    first measure.
    """
    if len(rows) > MAX_ROWS:
        raise ConfigError(f"oracle is capped at {MAX_ROWS} rows")
    if cuboids is None:
        masks = list(range(1 << n_dims))
    else:
        masks = sorted({lattice.canonical_id(c) for c in cuboids})
    labels, plan = [], []
    for f in functions:
        f = f.split(":", 1)[0]   # the maintenance mode does not change values
        name, measure = _split_label(f) if "(" in f else (f.upper(), None)
        if name not in _SUPPORTED:
            raise ConfigError(f"oracle has no definition for {name}")
        if measure is None and name != "COUNT":
            measure = measure_names[0]
        col = None if measure is None else n_dims + list(measure_names).index(measure)
        labels.append(f"{name}({measure or '*'})")
        plan.append((name, col))
    result = OracleResult(tuple(labels))
    for mask in masks:
        dims = [d for d in range(n_dims) if mask >> d & 1]
        groups: dict = {}
        for row in rows:
            groups.setdefault(tuple(row[d] for d in dims), []).append(row)
        cells = {}
        for key, members in groups.items():
            vals = []
            for name, col in plan:
                xs = [1 for _ in members] if col is None else [r[col] for r in members]
                vals.append(_apply(name, xs))
            cells[key] = tuple(vals)
        result.cells[mask] = cells
    return result


# -- reading engine output -----------------------------------------------------------

def _parse_token(tok: str):
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        return tok


def read_view_file(path, n_dims: Optional[int] = None, dim_types: Optional[Sequence[str]] = None) -> tuple:
    """Returns ``(cuboid, functions, {key: values})`` for one view file.

    ``cuboid`` keeps the file's dimension order; keys follow that order.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = dict(tok.split("=", 1) for tok in header.split())
        if "cuboid" not in fields or "functions" not in fields:
            raise ConfigError(f"{path}: bad view header {header!r}")
        label = fields["cuboid"]
        cuboid = lattice.parse_label(label, n_dims or lattice.MAX_DIMS)
        functions = tuple(_split_top(fields["functions"]))
        cells = {}
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            dims_part, sep, agg_part = line.partition(" | ")
            if not sep:
                raise ConfigError(f"{path}: malformed line {line!r}")
            key = tuple(dims_part.split("\t")) if dims_part else ()
            if dim_types is not None:
                key = tuple(_coerce_dim(v, dim_types[d]) for v, d in zip(key, cuboid))
            cells[key] = tuple(_parse_token(t) for t in agg_part.split("\t"))
    return cuboid, functions, cells


def _coerce_dim(v: str, t: str):
    return v if t == "string" else int(v)


def _split_top(text: str) -> list:
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "," and depth == 0:
            out.append(cur)
            cur = ""
            continue
        depth += ch == "("
        depth -= ch == ")"
        cur += ch
    if cur:
        out.append(cur)
    return out


def _close(a, b, rel: float) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        a, b = float(a), float(b)
        if a == b:
            return True
        return math.isclose(a, b, rel_tol=rel, abs_tol=0.0)
    return a == b


def diff_views(views_dir, oracle: OracleResult, dim_types: Sequence[str], *,
               avg_rel: float = 1e-9, cuboids: Optional[Iterable] = None) -> list:
    """Mismatch lines between engine view files and the oracle; empty means equal.

    AVG compares within ``avg_rel`` relative error, everything else exactly
    (a float cell must equal the oracle's float, an integer cell the integer).
    """
    views_dir = Path(views_dir)
    n = len(dim_types)
    report = []
    seen = set()
    for path in sorted(views_dir.glob("*.view")):
        cuboid, functions, cells = read_view_file(path, n, dim_types)
        mask = lattice.canonical_id(cuboid)
        seen.add(mask)
        label = lattice.label(cuboid)
        if mask not in oracle.cells:
            report.append(f"extra cuboid {label}")
            continue
        if tuple(functions) != tuple(oracle.functions):
            report.append(f"{label}: functions {functions} != {oracle.functions}")
            continue
        order = sorted(range(len(cuboid)), key=lambda i: cuboid[i])
        expected = oracle.cells[mask]
        got = {tuple(k[i] for i in order): v for k, v in cells.items()}
        for key in sorted(set(expected) - set(got), key=repr):
            report.append(f"{label}: missing key {key!r}")
        for key in sorted(set(got) - set(expected), key=repr):
            report.append(f"{label}: extra key {key!r}")
        for key in sorted(set(got) & set(expected), key=repr):
            for f, a, b in zip(functions, got[key], expected[key]):
                rel = avg_rel if f.startswith("AVG") else 0.0
                if rel == 0.0:
                    ok = type(a) is type(b) and a == b
                else:
                    ok = _close(a, b, rel)
                if not ok:
                    report.append(f"{label}: {key!r} {f} got {a!r} expected {b!r}")
    want = set(oracle.cells) if cuboids is None else {lattice.canonical_id(c) for c in cuboids}
    for mask in sorted(want - seen):
        if oracle.cells.get(mask):
            report.append(f"missing cuboid {lattice.label(lattice.from_mask(mask))}")
    return report
