import errno
import itertools
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from cubeforge.engine import (Cluster, Engine, FaultInjector, JobSpec, MapReduceJob, SchedulingFactory,
                              TaskScheduler, external_sort, merge_runs, read_run, write_run)
from cubeforge.engine import codec
from cubeforge.engine.extsort import estimate_size
from cubeforge.engine.job import _groups
from cubeforge.errors import ConfigError, JobAbort, SchedulingError, TaskFailed

# -- codec -------------------------------------------------------------------------

field_values = st.one_of(
    st.integers(-(1 << 63), (1 << 63) - 1), st.integers(1 << 63, 1 << 200),
    st.floats(allow_nan=False), st.text(max_size=12), st.none())


@settings(max_examples=300)
@given(st.lists(field_values, max_size=5), st.lists(field_values, max_size=6), st.booleans())
def test_codec_round_trip(key, value, typed_first):
    data = codec.encode_record(tuple(key), tuple(value), typed_first)
    import io
    (k, v), = list(codec.iter_records(io.BytesIO(data)))
    assert k == tuple(key) and v == tuple(value)
    assert [type(x) for x in k] == [type(x) for x in key]
    assert [type(x) for x in v] == [type(x) for x in value]


def test_codec_little_endian_length_prefix():
    data = codec.encode_record((1,), (2,))
    assert int.from_bytes(data[:4], "little") == len(data) - 4


# -- runs and external sort ------------------------------------------------------------

records = st.lists(st.tuples(st.tuples(st.integers(-50, 50), st.text("ab", max_size=3)),
                             st.tuples(st.integers(0, 9))), max_size=200)


def key_order(recs):
    return sorted(recs, key=lambda r: r[0])


@settings(max_examples=60, deadline=None)
@given(records, st.integers(40, 2000))
def test_external_sort_matches_in_memory(tmp_path_factory, recs, budget):
    d = tmp_path_factory.mktemp("sort")
    paths = external_sort(recs, budget, d)
    merged = list(merge_runs(paths))
    assert [r[0] for r in merged] == [r[0] for r in key_order(recs)]
    assert Counter(merged) == Counter(recs)
    for p in paths:
        run = list(read_run(p))
        assert run == key_order(run)


def test_external_sort_three_spills(tmp_path):
    recs = [((i * 7919 % 1000,), (i,)) for i in range(300)]
    size = sum(estimate_size(*r) for r in recs)
    paths = external_sort(recs, size // 3 + 1, tmp_path)
    assert len(paths) == 3
    assert [r[0] for r in merge_runs(paths)] == sorted(r[0] for r in recs)


def test_external_sort_fits_and_empty(tmp_path):
    recs = [((3,), (1,)), ((1,), (2,)), ((2,), (3,))]
    paths = external_sort(recs, 1 << 20, tmp_path / "a")
    assert len(paths) == 1 and list(read_run(paths[0])) == sorted(recs)
    assert external_sort([], 100, tmp_path / "b") == []
    assert list(merge_runs([])) == []


def test_disk_full_aborts_and_cleans(tmp_path, monkeypatch):
    from cubeforge.engine import extsort

    calls = {"n": 0}
    real = extsort.RunWriter.write

    def failing(self, key, value):
        calls["n"] += 1
        if calls["n"] > 5:
            raise OSError(errno.ENOSPC, "No space left on device")
        real(self, key, value)

    monkeypatch.setattr(extsort.RunWriter, "write", failing)
    recs = [((i,), (i,)) for i in range(50)]
    with pytest.raises(JobAbort, match="disk full"):
        external_sort(recs, 64, tmp_path)
    assert list(tmp_path.glob("*.run")) == []


def test_groups_rejects_out_of_order():
    c = Counter()
    with pytest.raises(JobAbort):
        list(_groups([((2,), 1), ((1,), 1)], [], c))


# -- scheduler --------------------------------------------------------------------------

def test_fresh_spread_and_replay(tmp_path):
    cl = Cluster(tmp_path, 4)
    sch = TaskScheduler(cl, SchedulingFactory(tmp_path))
    fresh = sch.plan("app", range(8), "fresh")
    assert [fresh[p] for p in range(8)] == [0, 1, 2, 3, 0, 1, 2, 3]
    assert sch.plan("app", range(8), "replay") == fresh


def test_replay_with_dead_node_moves_only_its_partitions(tmp_path):
    cl = Cluster(tmp_path, 4)
    fac = SchedulingFactory(tmp_path)
    sch = TaskScheduler(cl, fac)
    fresh = sch.plan("app", range(8), "fresh")
    cl.kill(2)
    moved = sch.plan("app", range(8), "replay")
    assert {p for p in range(8) if moved[p] != fresh[p]} == {2, 6}
    assert all(cl.is_available(n) for n in moved.values())
    assert fac.load("app") == moved
    cl.revive(2)
    assert sch.plan("app", range(8), "replay") == moved  # re-recorded, stays put


def test_replay_without_history(tmp_path):
    sch = TaskScheduler(Cluster(tmp_path, 2), SchedulingFactory(tmp_path))
    with pytest.raises(SchedulingError):
        sch.plan("nope", [0], "replay")
    with pytest.raises(ConfigError):
        sch.plan("nope", [0], "sideways")


def test_no_live_nodes(tmp_path):
    cl = Cluster(tmp_path, 2)
    cl.kill(0)
    cl.mark_overloaded(1)
    with pytest.raises(SchedulingError):
        cl.nearest_live(0)


# -- run_job -------------------------------------------------------------------------------

class WordSum(MapReduceJob):
    def __init__(self, parts=1, combine=False):
        self.parts = parts
        self.seen = {}
        if combine:
            self.combine = lambda k, vs: [(sum(v[0] for v in vs),)]

    def map(self, item):
        yield (item[0],), (item[1],)

    def partition(self, key, value):
        return hash(key[0]) % self.parts if self.parts > 1 else 0

    def reduce(self, ctx, groups):
        out = {}
        keys = []
        for key, values, _ in groups:
            keys.append(key)
            out[key[0]] = [v[0] for v in values]
        assert keys == sorted(keys)
        self.seen[ctx.partition] = out
        return out


def test_word_count_shape(tmp_path):
    eng = Engine(tmp_path)
    job = WordSum()
    res = eng.run_job(JobSpec("materialize", "wc", 1, mappers=1), [[("a", 1), ("a", 2), ("b", 3)]], job)
    groups = res.reduce_outputs[0]
    assert groups == {"a": [1, 2], "b": [3]}
    assert {k: sum(v) for k, v in groups.items()} == {"a": 3, "b": 3}
    assert res.counters["input_tuples_read"] == 3
    assert res.counters["reduce_groups"] == 2


def test_merge_of_several_mapper_runs(tmp_path):
    eng = Engine(tmp_path)
    splits = [[("c", 1), ("a", 1)], [("b", 1), ("a", 2)], [("d", 1), ("b", 5)]]
    res = eng.run_job(JobSpec("materialize", "wc", 1, mappers=3), splits, WordSum())
    assert list(res.reduce_outputs[0]) == ["a", "b", "c", "d"]


def test_combine_shrinks_skewed_keys(tmp_path):
    eng = Engine(tmp_path)
    splits = [[("k", 1)] * 50 + [("j", 2)] * 50, [("k", 3)] * 20]
    res = eng.run_job(JobSpec("materialize", "wc", 1, mappers=2), splits, WordSum(combine=True))
    c = res.counters
    assert c["combine_output_records"] < c["map_output_records"] == 120
    assert {k: sum(v) for k, v in res.reduce_outputs[0].items()} == {"k": 110, "j": 100}


def test_partition_out_of_range_aborts(tmp_path):
    class Bad(WordSum):
        def partition(self, key, value):
            return 5

    with pytest.raises(JobAbort):
        Engine(tmp_path).run_job(JobSpec("materialize", "x", 2, mappers=1), [[("a", 1)]], Bad())


def test_task_retry_then_success(tmp_path):
    faults = FaultInjector({("reduce", 0): {1}, ("map", 0): {1}})
    eng = Engine(tmp_path, faults=faults)
    res = eng.run_job(JobSpec("materialize", "x", 1, mappers=1), [[("a", 1)]], WordSum())
    assert res.counters["task_retries"] == 2
    assert res.reduce_outputs[0] == {"a": [1]}
    assert len(faults.fired) == 2


def test_task_exhausts_retries(tmp_path):
    faults = FaultInjector({("reduce", 0): {1, 2, 3}})
    eng = Engine(tmp_path, faults=faults)
    with pytest.raises(TaskFailed):
        eng.run_job(JobSpec("materialize", "x", 1, mappers=1, cache_runs=True), [[("a", 1)]], WordSum())
    assert eng.store.entry(0, "x", 0, "sorted-runs") is None


def test_merge_cache_interleaves_cached_runs(tmp_path):
    """Cached runs plus delta must reach reduce exactly like one job over base and delta."""
    base = [("b", 1), ("d", 2), ("a", 3)]
    delta = [("c", 4), ("a", 5)]
    e1 = Engine(tmp_path / "one")
    j1 = WordSum()
    e1.run_job(JobSpec("materialize", "x", 1, mappers=1), [base + delta], j1)

    e2 = Engine(tmp_path / "two")
    e2.run_job(JobSpec("materialize", "x", 1, mappers=1, cache_runs=True), [base], WordSum())
    j2 = WordSum()
    res = e2.run_job(JobSpec("update-recompute", "x", 1, mappers=1, merge_cache=True, cache_runs=True,
                             scheduling="replay", epoch=1), [delta], j2)
    assert j2.seen == j1.seen
    assert res.counters["input_tuples_read"] == 2
    assert res.counters["cached_runs_merged"] == 1


def test_merge_cache_requires_replay():
    with pytest.raises(ConfigError):
        JobSpec("update-recompute", "x", 1, merge_cache=True)


def test_many_runs_compacted(tmp_path):
    eng = Engine(tmp_path)
    splits = [[(f"k{i % 7}", i)] for i in range(40)]
    j = WordSum()
    eng.run_job(JobSpec("materialize", "x", 1, mappers=40, merge_factor=4), splits, j)
    assert sorted(j.seen[0]) == sorted({f"k{i % 7}" for i in range(40)})
    assert sum(len(v) for v in j.seen[0].values()) == 40


@pytest.mark.parametrize("workers", [1, 3])
def test_partitions_see_their_keys_only(tmp_path, workers):
    eng = Engine(tmp_path)
    words = [(w, 1) for w in itertools.islice(itertools.cycle("abcdefghij"), 200)]
    j = WordSum(parts=4)
    eng.run_job(JobSpec("materialize", "x", 4, mappers=3, workers=workers), [words[0::3], words[1::3], words[2::3]], j)
    all_keys = [k for p in j.seen.values() for k in p]
    assert sorted(all_keys) == sorted(set("abcdefghij"))
