"""Aggregate functions, their partial states, and the merge rules used by
combine, reduce and refresh.

Map output values are ``(*payload, flag, batch_identifier)``.  With flag
``RAW`` the payload is the tuple's measure values; with ``PARTIAL`` it is the
flattened state produced by a combiner.
"""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ConfigError, JobAbort

RAW = 0
PARTIAL = 1

MEDIAN_SPILL_LIMIT = 1_000_000

INCREMENTAL = "incremental"
RECOMPUTE = "recompute"
MODES = (INCREMENTAL, RECOMPUTE)


@dataclass(frozen=True)
class AggregateFunction:
    name: str
    klass: str          # distributive | algebraic | holistic
    combinable: bool
    incremental: bool   # may be maintained by merging states
    default_mode: str


FUNCTIONS = {
    "SUM": AggregateFunction("SUM", "distributive", True, True, INCREMENTAL),
    "COUNT": AggregateFunction("COUNT", "distributive", True, True, INCREMENTAL),
    "MIN": AggregateFunction("MIN", "distributive", True, True, INCREMENTAL),
    "MAX": AggregateFunction("MAX", "distributive", True, True, INCREMENTAL),
    "AVG": AggregateFunction("AVG", "algebraic", True, True, INCREMENTAL),
    "MEDIAN": AggregateFunction("MEDIAN", "holistic", False, False, RECOMPUTE),
}


@dataclass(frozen=True)
class AggSpec:
    func: AggregateFunction
    measure: Optional[str]
    column: int          # index of the measure in the tuple's measure values; -1 for COUNT(*)
    mode: str

    @property
    def label(self) -> str:
        return f"{self.func.name}({self.measure or '*'})"

    @property
    def incremental(self) -> bool:
        return self.mode == INCREMENTAL


_SPEC_RE = re.compile(r"^\s*([A-Za-z]+)\s*(?:\(\s*([^()\s]*)\s*\))?\s*(?::\s*([a-z]+))?\s*$")


def parse_spec(text: str, measures: Sequence[str]) -> AggSpec:
    """Parse ``NAME[(measure)][:mode]``, e.g. ``SUM(quantity)``, ``MEDIAN:recompute``.

    Without a measure the first one is used (COUNT defaults to ``*``).
    """
    m = _SPEC_RE.match(text)
    if not m:
        raise ConfigError(f"bad aggregate spec {text!r}")
    name, measure, mode = m.group(1).upper(), m.group(2), m.group(3)
    func = FUNCTIONS.get(name)
    if func is None:
        raise ConfigError(f"unknown aggregate function {name!r}")
    if measure in (None, ""):
        measure = None if name == "COUNT" else (measures[0] if measures else None)
    if measure == "*":
        if name != "COUNT":
            raise ConfigError(f"{name} needs a measure")
        measure = None
    if measure is None and name != "COUNT":
        raise ConfigError("schema has no measures")
    if measure is not None and measure not in measures:
        raise ConfigError(f"unknown measure {measure!r} in {text!r}")
    mode = mode or func.default_mode
    if mode not in MODES:
        raise ConfigError(f"unknown maintenance mode {mode!r}")
    if mode == INCREMENTAL and not func.incremental:
        raise ConfigError(f"{name} cannot be maintained incrementally")
    column = -1 if measure is None else list(measures).index(measure)
    return AggSpec(func, measure, column, mode)


def split_spec_list(text: str) -> list:
    """``"SUM(q),COUNT(*),MEDIAN"`` -> ``["SUM(q)", "COUNT(*)", "MEDIAN"]``."""
    return [t.strip() for t in re.split(r",(?![^(]*\))", text) if t.strip()]


def parse_specs(texts, measures: Sequence[str]) -> list:
    if isinstance(texts, str):
        texts = split_spec_list(texts)
    specs = [parse_spec(t, measures) for t in texts]
    if not specs:
        raise ConfigError("at least one aggregate function is required")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate aggregate functions in {labels}")
    return specs


format_value = str  # str of a float is its shortest round-trip repr


def median_of(values: list) -> float:
    """Median; an even count averages the two middle values."""
    xs = sorted(values)
    n = len(xs)
    mid = n // 2
    if n % 2:
        return float(xs[mid])
    return (xs[mid - 1] + xs[mid]) / 2


# -- per-function kernels ------------------------------------------------------
# ``many(col)``: list of raw values -> state; ``one(col)``: one raw value -> state;
# ``merge``: (acc, state) -> acc, may mutate acc but never state.

def _sum_many(c):
    return lambda vs: sum([v[c] for v in vs])


def _count_many(c):
    return len


def _min_many(c):
    return lambda vs: min([v[c] for v in vs])


def _max_many(c):
    return lambda vs: max([v[c] for v in vs])


def _avg_many(c):
    return lambda vs: (sum([v[c] for v in vs]), len(vs))


def _median_many(c):
    return lambda vs: [v[c] for v in vs]


def _col_one(c):
    return lambda v: v[c]


def _count_one(c):
    return lambda v: 1


def _avg_one(c):
    return lambda v: (v[c], 1)


def _median_one(c):
    return lambda v: [v[c]]


def _avg_merge(a, b):
    return (a[0] + b[0], a[1] + b[1])


def _median_merge(a, b):
    a.extend(b)
    if len(a) > MEDIAN_SPILL_LIMIT:
        raise JobAbort(f"MEDIAN group exceeds {MEDIAN_SPILL_LIMIT} values; holistic state too large")
    return a


def _ident(s):
    return s


def _avg_final(s):
    return s[0] / s[1]


_KERNELS = {
    #          many         one          merge          final        width
    "SUM": (_sum_many, _col_one, operator.add, None, 1),
    "COUNT": (_count_many, _count_one, operator.add, None, 1),
    "MIN": (_min_many, _col_one, min, None, 1),
    "MAX": (_max_many, _col_one, max, None, 1),
    "AVG": (_avg_many, _avg_one, _avg_merge, _avg_final, 2),
    "MEDIAN": (_median_many, _median_one, _median_merge, median_of, None),
}


class Aggregator:
    """Evaluates a fixed list of specs over groups of map-output values.

    States are plain lists with one entry per spec.  Every function's state
    except MEDIAN's has a fixed width and can be flattened into a record.
    """

    def __init__(self, specs: Sequence[AggSpec], partials: bool = False,
                 layout: Optional[tuple] = None):
        self.specs = tuple(specs)
        self.partials = partials   # whether PARTIAL values may show up
        # (full aggregator, indices): PARTIAL values were flattened by the full
        # aggregator and this one only keeps some of its specs
        self._layout = layout
        ks = [_KERNELS[s.func.name] for s in self.specs]
        self._many = [k[0](s.column) for k, s in zip(ks, self.specs)]
        self._one = [k[1](s.column) for k, s in zip(ks, self.specs)]
        self._merge = [k[2] for k in ks]
        self.widths = [k[4] for k in ks]
        self.flat = all(w is not None for w in self.widths)
        self._pairs = list(zip(self._merge, range(len(self.specs))))
        # only these need work beyond the identity
        self._finals = [(i, k[3]) for i, k in enumerate(ks) if k[3] is not None]
        self._lists = [i for i, s in enumerate(self.specs) if s.func.name == "MEDIAN"]
        self._unit = all(w == 1 for w in self.widths)

    def __len__(self) -> int:
        return len(self.specs)

    @property
    def combinable(self) -> bool:
        return all(s.func.combinable for s in self.specs)

    def group(self, values: list) -> list:
        """State of one group of map-output values (non-empty)."""
        if len(values) == 1:
            v = values[0]
            if v[-2] == RAW:
                return [f(v) for f in self._one]
            return self._partial(v)
        if self.partials and any(v[-2] for v in values):
            acc = None
            for v in values:
                st = [f(v) for f in self._one] if v[-2] == RAW else self._partial(v)
                acc = self.merge(acc, st)
            return acc
        return [f(values) for f in self._many]

    def _partial(self, v) -> list:
        if self._layout is None:
            return self.unflatten(v)
        full, idx = self._layout
        st = full.unflatten(v)
        return [st[i] for i in idx]

    def merge(self, acc: Optional[list], st: list) -> list:
        if acc is None:
            acc = list(st)
            for i in self._lists:
                acc[i] = list(acc[i])
            return acc
        for m, i in self._pairs:
            acc[i] = m(acc[i], st[i])
        return acc

    def finalize(self, st: list) -> tuple:
        if not self._finals:
            return tuple(st)
        out = list(st)
        for i, f in self._finals:
            out[i] = f(out[i])
        return tuple(out)

    def flatten(self, st: list) -> tuple:
        if self._unit:
            return tuple(st)
        out = []
        for w, x in zip(self.widths, st):
            if w == 1:
                out.append(x)
            else:
                out.extend(x)
        return tuple(out)

    def unflatten(self, flat) -> list:
        st, i = [], 0
        for w in self.widths:
            if w == 1:
                st.append(flat[i])
            else:
                st.append(tuple(flat[i:i + w]))
            i += w
        return st


def combiner(agg: Aggregator):
    """Map-side combine: collapse equal keys into one PARTIAL value."""
    if not agg.flat:
        raise ConfigError("combine needs fixed-width states")

    def combine(key, values):
        ident = values[0][-1]
        return [agg.flatten(agg.group(values)) + (PARTIAL, ident)]

    return combine
