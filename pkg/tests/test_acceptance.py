"""Acceptance criteria, one test each.

Every test appends one ``criterion N: PASS|FAIL ...`` line to the terminal
summary (and prints it) before asserting, so the outcome is visible even
when a criterion fails.
"""

import random
import statistics
import time
from math import comb

import pytest

from cubeforge import dataio, lattice
from cubeforge.balancer import allocate
from cubeforge.cli import main
from cubeforge.config import AppConfig
from cubeforge.engine import FaultInjector
from cubeforge.maintenance import Application
from cubeforge.oracle import brute_force_cube, diff_views
from cubeforge.planner import generate_plan

import conftest

ALL6 = ["SUM", "COUNT", "MIN", "MAX", "AVG", "MEDIAN"]


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def view_bytes(app):
    return {p.name: p.read_bytes() for p in sorted(app.views_dir.glob("*.view"))}


def cell_count(app):
    return sum(len(p.read_text().splitlines()) - 1 for p in app.views_dir.glob("*.view"))


def dataset(d, n, rows, seed, cards=None):
    schema = dataio.default_schema(n)
    schema.save(d / "schema.txt")
    cards = cards or [random.Random(seed).randint(2, 40) for _ in range(n)]
    data = dataio.generate_synthetic(schema, rows, cards, seed, d / "data.tsv")
    return schema, data


def make_app(d, root, functions, **kw):
    kw.setdefault("reducers", 12)
    kw.setdefault("sample_rate", 10)
    kw.setdefault("profile", str(d / f"profile-{len(functions)}.txt"))
    return Application(AppConfig(schema=str(d / "schema.txt"), functions=list(functions),
                                 root=str(d / root), **kw))


def scripted_deltas(d, base_rows, schema, seed, fractions=(0.05, 0.20, 1.0)):
    """Base plus successive deltas sized as fractions of the base."""
    rows = base_rows + sum(round(f * base_rows) for f in fractions)
    data = dataio.generate_synthetic(schema, rows, [7, 9, 5, 11, 4][:schema.n_dims], seed, d / "all.tsv")
    lines = data.read_text().splitlines()
    base = d / "base.tsv"
    base.write_text("".join(ln + "\n" for ln in lines[:base_rows]))
    deltas, at = [], base_rows
    for i, f in enumerate(fractions):
        k = round(f * base_rows)
        p = d / f"delta{i}.tsv"
        p.write_text("".join(ln + "\n" for ln in lines[at:at + k]))
        deltas.append(p)
        at += k
    return data, base, deltas


# -- 1 ----------------------------------------------------------------------------------

def criterion1_datasets():
    rng = random.Random(2024)
    out = [(3, 10 ** 5), (4, 10 ** 5), (5, 10 ** 5), (3, 10 ** 5), (4, 10 ** 5)]
    out += [(n, 10 ** 4) for n in (3, 4, 5, 3, 4, 5, 4, 3)]
    out += [(n, 10 ** 3) for n in (3, 4, 5, 3, 4, 5, 5)]
    return [(n, rows, rng.randrange(10 ** 6)) for n, rows in out]


def test_criterion_1_oracle_equivalence(tmp_path, capsys):
    t0 = time.perf_counter()
    sets = criterion1_datasets()
    assert len(sets) == 20
    failures = []
    for i, (n, rows, seed) in enumerate(sets):
        d = tmp_path / f"ds{i}"
        d.mkdir()
        card = ",".join(str(random.Random(seed).randint(2, 60)) for _ in range(n))
        data = d / "data.tsv"
        assert main(["gen-data", "--rows", str(rows), "--dims", str(n), "--cards", card,
                     "--out", str(data), "--seed", str(seed)]) == 0
        common = ["--schema", str(data) + ".schema", "--root", str(d / "root"), "--functions", ",".join(ALL6),
                  "-r", "12", "-s", "10"]
        capsys.readouterr()
        assert main(["materialize", "--data", str(data), *common]) == 0
        code = main(["verify", *common])
        out = capsys.readouterr().out
        if code != 0 or "mismatches=0" not in out:
            failures.append((n, rows, seed))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 300
    record(1, ok, f"20 datasets, {20 - len(failures)} with zero mismatches, {elapsed:.0f}s total"
           + (f" failures={failures}" if failures else ""))
    assert ok


# -- 2 ----------------------------------------------------------------------------------

def test_criterion_2_minimum_batch_count():
    got = [len(generate_plan(n).batches) for n in range(2, 7)]
    want = [comb(n, (n + 1) // 2) for n in range(2, 7)]
    ok = got == want == [2, 3, 6, 10, 20]
    record(2, ok, f"batches for n=2..6: {got}")
    assert ok


# -- 3 ----------------------------------------------------------------------------------

@pytest.mark.parametrize("n", [4, 5])
def test_criterion_3_single_pass(tmp_path, n):
    _, data = dataset(tmp_path, n, 10_000, 7)
    app = make_app(tmp_path, "root", ["SUM", "COUNT"])
    rep = app.materialize(data)
    (job,) = rep.results
    c = job.counters
    views = len(list(app.views_dir.glob("*.view")))
    batches = len(app.plan.batches)
    ok = (c["input_tuples_read"] == 10_000 and len(rep.results) == 1 and views == 2 ** n
          and c["map_output_records"] == 10_000 * (batches + 1))
    record(3, ok, f"n={n}: 1 job, input_tuples_read={c['input_tuples_read']} for |D|=10000, "
                  f"{views} views, map records {c['map_output_records']} = |D|x({batches} batches + all) "
                  f"(one job per cuboid would read {10_000 * (2 ** n)})")
    assert ok


# -- 4 ----------------------------------------------------------------------------------

SCENARIOS = [
    (3, ["SUM", "COUNT", "MIN", "MAX", "AVG"], "incremental", None),
    (3, ["SUM", "COUNT", "MIN", "MAX", "AVG"], "baseline", None),
    (3, ["MEDIAN"], "recompute", None),
    (4, ALL6, "mixed", None),
    (4, ["SUM", "COUNT"], "incremental", None),
    (4, ["SUM", "COUNT"], "baseline", None),
    (4, ["SUM:recompute", "COUNT:recompute"], "recompute", None),
    (5, ["SUM", "AVG", "MEDIAN"], "mixed", None),
    (4, ["MIN", "MAX", "MEDIAN"], "mixed", ["A", "BC", "ABD", "all"]),
    (2, ["SUM:recompute", "COUNT", "MAX"], "mixed", None),
]


def test_criterion_4_maintenance_equivalence(tmp_path):
    failures = []
    for i, (n, functions, mode, cuboids) in enumerate(SCENARIOS):
        d = tmp_path / f"s{i}"
        d.mkdir()
        schema = dataio.default_schema(n)
        schema.save(d / "schema.txt")
        data, base, deltas = scripted_deltas(d, 2000, schema, 100 + i)
        app = make_app(d, "inc", functions, cuboids=cuboids)
        app.materialize(base)
        for delta in deltas:
            assert app.update(delta, mode).mode == mode
        once = make_app(d, "once", functions, cuboids=cuboids)
        once.materialize(data)
        want = None if cuboids is None else [lattice.parse_label(c, n) for c in cuboids]
        oracle = brute_force_cube(dataio.read_rows(data, schema), n, schema.measure_names,
                                  cuboids=want, functions=functions)
        diff = diff_views(app.views_dir, oracle, [c.type for c in schema.dims], cuboids=want)
        if view_bytes(app) != view_bytes(once) or diff:
            failures.append((i, mode, len(diff)))
    ok = not failures
    record(4, ok, f"{len(SCENARIOS)} scenarios (deltas 5%/20%/100% of base), "
                  f"{len(SCENARIOS) - len(failures)} equal to one-shot and oracle"
                  + (f" failures={failures}" if failures else ""))
    assert ok


# -- 5 ----------------------------------------------------------------------------------

def test_criterion_5_delta_only_io(tmp_path):
    schema = dataio.default_schema(4)
    schema.save(tmp_path / "schema.txt")
    data, base, deltas = scripted_deltas(tmp_path, 4000, schema, 55)
    notes, ok = [], True

    app = make_app(tmp_path, "rc", ["MEDIAN", "SUM:recompute"])
    app.materialize(base)
    for i, delta in enumerate(deltas):
        k = len(delta.read_text().splitlines())
        rep = app.update(delta)
        (job,) = rep.results
        alone = make_app(tmp_path, f"alone{i}", ["MEDIAN", "SUM:recompute"])
        ref = alone.materialize(delta, cache=False).results[0].counters["bytes_shuffled"]
        c = job.counters
        good = c["input_tuples_read"] == k and c["bytes_shuffled"] <= 1.1 * ref and c["cached_runs_merged"] > 0
        ok &= good
        notes.append(f"recompute |dD|={k}: read={c['input_tuples_read']} "
                     f"shuffle={c['bytes_shuffled'] / ref:.3f}x delta-only")

    inc = make_app(tmp_path, "inc", ["SUM", "COUNT"])
    inc.materialize(base)
    bl = make_app(tmp_path, "bl", ["SUM", "COUNT"])
    bl.materialize(base)
    for delta in deltas:
        k = len(delta.read_text().splitlines())
        v = cell_count(bl)
        oracle = brute_force_cube(dataio.read_rows(delta, schema), 4, schema.measure_names)
        dv = sum(len(cells) for cells in oracle.cells.values())
        r_bl = bl.update(delta, "mr-baseline")
        r_inc = inc.update(delta, "incremental")
        j1, j2 = r_bl.results
        good = (len(r_bl.results) == 2 and len(r_inc.results) == 1
                and j1.counters["input_tuples_read"] == k and j2.counters["input_tuples_read"] == v + dv
                and r_inc.counters["input_tuples_read"] == k)
        ok &= good
        notes.append(f"baseline |dD|={k}: job1 read {j1.counters['input_tuples_read']}, "
                     f"job2 read {j2.counters['input_tuples_read']} = |V| {v} + |dV| {dv}; incremental 1 job")
    record(5, ok, "; ".join(notes))
    assert ok


# -- 6 ----------------------------------------------------------------------------------

def test_criterion_6_caching_overhead(tmp_path):
    _, data = dataset(tmp_path, 4, 30_000, 5, cards=[50, 100, 25, 30])
    ratios = {}
    for label, functions, limit in (("run caching", ["SUM:recompute", "MEDIAN"], 1.05),
                                    ("view caching", ["SUM", "COUNT", "MAX"], 1.25)):
        app = make_app(tmp_path, "root", functions, reducers=8, sample_rate=20, app_id=f"c{len(functions)}")
        app.profile(data)
        t = {True: [], False: []}
        for _ in range(5):
            for cache in (False, True):
                t0 = time.perf_counter()
                app.materialize(data, cache=cache)
                t[cache].append(time.perf_counter() - t0)
        ratios[label] = (min(t[True]) / min(t[False]), limit)
    ok = all(r <= lim for r, lim in ratios.values())
    record(6, ok, ", ".join(f"{k} {r:.2f}x (limit {lim}x)" for k, (r, lim) in ratios.items())
           + " [min of 5 interleaved runs, 30k rows, n=4]")
    assert ok


# -- 7 ----------------------------------------------------------------------------------

def test_criterion_7_load_balance(tmp_path):
    _, data = dataset(tmp_path, 4, 100_000, 11, cards=[1000])
    app = make_app(tmp_path, "root", ["SUM", "COUNT"], reducers=16, sample_rate=100, ccc_repeats=3)
    report = app.profile(data)
    alloc = allocate(report, 16)
    job = app.materialize(data).results[0]
    parts = range(alloc.total)    # the reserved reducer of the all cuboid is not part of r
    work = [job.partition_counters[p]["reduce_work_units"] for p in parts]
    mean = statistics.mean(work)
    within = sum(abs(w - mean) <= 0.2 * mean for w in work)
    frac = within / len(work)
    times = [job.reduce_times[p] for p in parts]
    tmean = statistics.mean(times)
    ok = frac >= 0.95
    record(7, ok, f"{within}/{len(work)} reducers ({frac:.0%}) within +-20% of mean work "
                  f"(records x cuboids); CCC times {[round(t) for t in report.times_ms]} ms -> R={alloc.counts}; "
                  f"work/mean {[round(w / mean, 2) for w in work]}; "
                  f"reduce time/mean {[round(t / tmean, 2) for t in times]}")
    assert ok


# -- 8 ----------------------------------------------------------------------------------

def test_criterion_8_sticky_scheduling(tmp_path):
    schema = dataio.default_schema(4)
    schema.save(tmp_path / "schema.txt")
    _, base, deltas = scripted_deltas(tmp_path, 3000, schema, 8)
    app = make_app(tmp_path, "root", ["SUM", "MEDIAN"], reducers=16, nodes=4)
    first = app.materialize(base).results[0].assignment
    same = [app.update(d).results[0].assignment == first for d in deltas[:2]]
    app.cluster.kill(2)
    moved = app.update(deltas[2]).results[0].assignment
    changed = {p for p in first if moved[p] != first[p]}
    on_two = {p for p, node in first.items() if node == 2}
    ok = all(same) and changed == on_two and 2 not in moved.values()
    record(8, ok, f"{sum(same)}/2 live-node updates kept all {len(first)} assignments; "
                  f"after killing node 2, moved {sorted(changed)} (its partitions: {sorted(on_two)})")
    assert ok


# -- 9 ----------------------------------------------------------------------------------

FAILURES = [
    ("task-restart", ["SUM", "MEDIAN"], None),
    ("node-restart", ["SUM", "MEDIAN"], None),
    ("corrupt", ["SUM", "MEDIAN"], 1),
    ("corrupt", ["SUM", "MEDIAN"], 2),
    ("corrupt", ["SUM", "COUNT"], None),     # s = inf, incremental-class only
]


def test_criterion_9_recovery(tmp_path):
    schema = dataio.default_schema(4)
    schema.save(tmp_path / "schema.txt")
    _, base, deltas = scripted_deltas(tmp_path, 3000, schema, 9)
    results = []
    for kind, functions, s in FAILURES:
        outs = []
        for broken in (False, True):
            app = make_app(tmp_path, f"{kind}-{s}-{broken}", functions, checkpoint_interval=s, nodes=3)
            app.materialize(base)
            evidence = None
            for i, d in enumerate(deltas):
                if broken and i == 2:
                    if kind == "task-restart":
                        app.engine.faults = FaultInjector({("reduce", 0): {1}, ("reduce", 3): {1}})
                    elif kind == "node-restart":
                        app.cluster.kill(1)
                        app.cluster.revive(1)
                        evidence = app.recover_node(1, "node-restart")
                    else:
                        app.cluster.corrupt(1)
                rep = app.update(d)
                if broken and i == 2:
                    if kind == "task-restart":
                        evidence = rep.counters["task_retries"]
                    elif kind == "corrupt":
                        evidence = len(rep.recovered)
            outs.append((view_bytes(app), evidence))
        (good, _), (bad, evidence) = outs
        results.append((kind, s, good == bad and bool(evidence), evidence))
    ok = all(r[2] for r in results)
    record(9, ok, "; ".join(f"{k} s={'inf' if s is None else s}: "
                            f"{'identical' if same else 'DIFFERENT'} (recovery evidence {ev})"
                            for k, s, same, ev in results))
    assert ok


# -- 10 ---------------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    schema = dataio.default_schema(4)
    schema.save(tmp_path / "schema.txt")
    _, base, deltas = scripted_deltas(tmp_path, 20_000, schema, 10, fractions=(0.2,))
    outputs, spills = {}, {}
    for workers in (1, 2, 8):
        for budget in (4 << 20, 64 << 20):
            app = make_app(tmp_path, f"w{workers}-m{budget}", ALL6, workers=workers, mem_budget=budget,
                           seed=1)
            m = app.materialize(base)
            app.update(deltas[0])
            outputs[(workers, budget)] = view_bytes(app)
            spills[(workers, budget)] = m.counters["spills"]
    ref = outputs[(1, 64 << 20)]
    same = [k for k, v in outputs.items() if v == ref]
    ok = len(same) == 6 and len(ref) == 16
    record(10, ok, f"{len(same)}/6 configurations byte-identical over {len(ref)} views "
                   f"(spills at 4MiB {spills[(1, 4 << 20)]}, at 64MiB {spills[(1, 64 << 20)]})")
    assert ok
