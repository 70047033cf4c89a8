import pytest
from hypothesis import given, strategies as st

from cubeforge import aggregates
from cubeforge.aggregates import PARTIAL, RAW, Aggregator, combiner, median_of, parse_spec, parse_specs
from cubeforge.errors import ConfigError, JobAbort

M = ["quantity", "price"]


def test_parse_defaults():
    s = parse_spec("SUM", M)
    assert (s.func.name, s.measure, s.column, s.mode) == ("SUM", "quantity", 0, "incremental")
    c = parse_spec("count(*)", M)
    assert c.measure is None and c.column == -1 and c.label == "COUNT(*)"
    assert parse_spec("MAX(price)", M).column == 1
    med = parse_spec("MEDIAN", M)
    assert med.mode == "recompute" and not med.incremental
    assert parse_spec("SUM(price):recompute", M).mode == "recompute"


@pytest.mark.parametrize("text", ["MEDIAN:incremental", "FOO", "SUM(nope)", "SUM(*)", "SUM:sideways", "SUM(("])
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        parse_spec(text, M)


def test_parse_spec_list():
    specs = parse_specs("SUM(quantity),COUNT(*),MEDIAN", M)
    assert [s.label for s in specs] == ["SUM(quantity)", "COUNT(*)", "MEDIAN(quantity)"]
    with pytest.raises(ConfigError):
        parse_specs(["SUM", "SUM(quantity)"], M)
    with pytest.raises(ConfigError):
        parse_specs([], M)


@pytest.mark.parametrize("xs,want", [([3, 5], 4.0), ([3, 4, 5, 6], 4.5), ([7], 7.0), ([9, 1, 5], 5.0)])
def test_median_even_rule(xs, want):
    assert median_of(xs) == want


def raw(*measures):
    return tuple(measures) + (RAW, 1)


ALL = parse_specs(["SUM", "COUNT", "MIN", "MAX", "AVG", "MEDIAN"], M)


def test_group_and_finalize():
    agg = Aggregator(ALL)
    st = agg.group([raw(3, 0), raw(5, 0), raw(1, 0), raw(7, 0)])
    assert agg.finalize(st) == (16, 4, 1, 7, 4.0, 4.0)
    one = agg.group([raw(2, 0)])
    assert agg.finalize(one) == (2, 1, 2, 2, 2.0, 2.0)


incr = [s for s in ALL if s.func.name != "MEDIAN"]
values = st.lists(st.integers(-1000, 1000), min_size=1, max_size=20)


@given(values, values, values)
def test_merge_is_associative_and_matches_one_shot(a, b, c):
    agg = Aggregator(incr)
    sa, sb, sc = (agg.group([raw(x, 0) for x in xs]) for xs in (a, b, c))
    left = agg.merge(agg.merge(agg.merge(None, sa), sb), sc)
    right = agg.merge(agg.merge(None, sa), agg.merge(agg.merge(None, sb), sc))
    whole = agg.group([raw(x, 0) for x in a + b + c])
    assert agg.finalize(left) == agg.finalize(right) == agg.finalize(whole)


@given(values, values)
def test_combiner_partials_equal_raw(a, b):
    agg = Aggregator(incr, partials=True)
    comb = combiner(agg)
    pa = comb(("k",), [raw(x, 0) for x in a])
    assert len(pa) == 1 and pa[0][-2] == PARTIAL and pa[0][-1] == 1
    mixed = pa + [raw(x, 0) for x in b]
    assert agg.finalize(agg.group(mixed)) == agg.finalize(agg.group([raw(x, 0) for x in a + b]))


def test_flatten_round_trip():
    agg = Aggregator(incr)
    st = agg.group([raw(4, 0), raw(6, 0)])
    flat = agg.flatten(st)
    assert len(flat) == 6 and agg.unflatten(flat) == st


def test_median_cannot_be_combined():
    agg = Aggregator(ALL)
    assert not agg.combinable and not agg.flat
    with pytest.raises(ConfigError):
        combiner(agg)


def test_median_merge_does_not_alias():
    agg = Aggregator(parse_specs(["MEDIAN"], M))
    st = agg.group([raw(1, 0), raw(2, 0)])
    acc = agg.merge(None, st)
    agg.merge(acc, agg.group([raw(9, 0)]))
    assert st == [[1, 2]]


def test_median_spill_limit(monkeypatch):
    monkeypatch.setattr(aggregates, "MEDIAN_SPILL_LIMIT", 3)
    agg = Aggregator(parse_specs(["MEDIAN"], M))
    acc = agg.merge(None, agg.group([raw(1, 0), raw(2, 0)]))
    with pytest.raises(JobAbort, match="MEDIAN"):
        agg.merge(acc, agg.group([raw(3, 0), raw(4, 0)]))


def test_sub_aggregator_reads_full_layout_partials():
    specs = parse_specs(["SUM", "COUNT", "AVG"], M)
    full = Aggregator(specs, partials=True)
    part = combiner(full)(("k",), [raw(3, 0), raw(5, 0)])
    sub = Aggregator([specs[1], specs[2]], partials=True, layout=(full, [1, 2]))
    assert sub.finalize(sub.group(part + [raw(4, 0)])) == (3, 4.0)
    assert sub.finalize(sub.group(part)) == (2, 4.0)
