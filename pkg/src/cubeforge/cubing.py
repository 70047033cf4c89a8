"""CubeGen: one MapReduce job that materializes every cuboid of a batch plan.

Each tuple is emitted once per batch, keyed by the batch's sort dimensions.
The partitioner sends a batch to its own range of reducers and hashes the
partition dimensions inside that range, so every ancestor cell is complete
in one reducer.  The reducer walks the sorted stream once: the descendant's
cells come straight from the groups, each ancestor keeps one open
accumulator that is emitted when its prefix changes.  The ``all`` cuboid
goes to one reserved reducer after the batch range.
"""

from __future__ import annotations

import heapq
import os
from operator import itemgetter
from pathlib import Path
from typing import Iterable, Optional, Sequence

from . import lattice
from .aggregates import RAW, Aggregator, AggSpec, combiner, format_value
from .engine.extsort import RunWriter, read_run
from .engine.job import JobResult, MapReduceJob, TaskContext
from .errors import DataError, JobAbort
from .localstore import VIEW
from .planner import Batch, BatchPlan

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

ALL_IDENTIFIER = 1  # the all cuboid is number 0

BAD_RECORD_LIMIT = 0.01


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def encode_key(values: Iterable) -> bytes:
    """Order-preserving byte encoding of dimension values."""
    out = bytearray()
    for v in values:
        if isinstance(v, int):
            if not -(1 << 63) <= v < (1 << 63):
                raise DataError(f"dimension value {v} outside 64-bit range")
            out += b"\x01"
            out += (v + (1 << 63)).to_bytes(8, "big")
        else:
            out += b"\x02"
            out += str(v).encode("utf-8")
            out += b"\x00"
    return bytes(out)


def _projector(dims: Sequence[int]):
    if not dims:
        return lambda row: ()
    if len(dims) == 1:
        i = dims[0]
        return lambda row: (row[i],)
    return itemgetter(*dims)


def cubegen_map(row: tuple, plan: BatchPlan, n_dims: int, include_all: bool = False) -> list:
    """Records for one tuple: one per batch, keyed by its sort dimensions."""
    meas = tuple(row[n_dims:])
    out = [(tuple(row[d] for d in b.sort_dims), meas + (RAW, b.identifier)) for b in plan.batches]
    if include_all:
        out.append(((), meas + (RAW, ALL_IDENTIFIER)))
    return out


class Partitioner:
    """``S_i + hash(partition dims) mod R_i``; the all cuboid gets partition ``r``."""

    def __init__(self, plan: BatchPlan, alloc, include_all: bool = True):
        if len(alloc.counts) != len(plan.batches):
            raise JobAbort("allocation does not match the batch plan")
        self.total = alloc.total
        self.num_partitions = alloc.total + (1 if include_all else 0)
        self._route = {}
        for b, s, r in zip(plan.batches, alloc.offsets, alloc.counts):
            self._route[b.identifier] = (s, r, len(b.partition_dims))
        if include_all:
            self._route[ALL_IDENTIFIER] = (alloc.total, 1, 0)
        self._hashes: dict = {}

    def hash(self, prefix: tuple) -> int:
        h = self._hashes.get(prefix)
        if h is None:
            h = self._hashes[prefix] = fnv1a_64(encode_key(prefix))
        return h

    def __call__(self, key: tuple, value: tuple) -> int:
        route = self._route.get(value[-1])
        if route is None:
            raise JobAbort(f"unknown batch identifier {value[-1]:#x}")
        s, r, width = route
        if r == 1:
            return s
        return s + self.hash(key[:width]) % r


def cubegen_partition(rec: tuple, alloc, plan: BatchPlan) -> int:
    return Partitioner(plan, alloc, include_all=False)(*rec)


def reduce_batch(groups, lengths: Sequence[int], agg_all: Optional[Aggregator],
                 agg_delta: Optional[Aggregator] = None, gauge: Optional[dict] = None):
    """Stream the cells of one batch out of its sorted reduce input.

    ``groups`` yields ``(key, values, n_cached)``; ``lengths`` are the member
    lengths, shortest first.  ``agg_all`` sees every value, ``agg_delta`` only
    the values after ``n_cached``.  Yields ``(level, key, state_all,
    state_delta)``; a ``None`` delta state means the cell got no new values.
    """
    na = len(lengths) - 1
    longest = lengths[na - 1] if na else 0
    open_keys: list = [None] * na
    acc_a: list = [None] * na
    acc_d: list = [None] * na
    peak = 0
    for key, values, nc in groups:
        sa = agg_all.group(values) if agg_all is not None else None
        sd = None
        if agg_delta is not None:
            dv = values[nc:] if nc else values
            if dv:
                sd = agg_delta.group(dv)
        if na:
            if open_keys[na - 1] is None or key[:longest] != open_keys[na - 1]:
                j = 0
                while j < na and open_keys[j] is not None and key[:lengths[j]] == open_keys[j]:
                    j += 1
                for a in range(j, na):
                    if open_keys[a] is not None:
                        yield a, open_keys[a], acc_a[a], acc_d[a]
                    open_keys[a] = key[:lengths[a]]
                    acc_a[a] = acc_d[a] = None
                if gauge is not None:
                    peak = max(peak, sum(k is not None for k in open_keys))
            for a in range(na):
                if sa is not None:
                    acc_a[a] = agg_all.merge(acc_a[a], sa)
                if sd is not None:
                    acc_d[a] = agg_delta.merge(acc_d[a], sd)
        yield na, key, sa, sd
    for a in range(na):
        if open_keys[a] is not None:
            yield a, open_keys[a], acc_a[a], acc_d[a]
    if gauge is not None:
        gauge["open_accumulators"] = max(gauge.get("open_accumulators", 0), peak)


def cubegen_reduce(groups, batch: Batch, specs: Sequence[AggSpec]) -> dict:
    """Cells of every cuboid in ``batch``: ``{cuboid: [(key, values), ...]}``."""
    agg = Aggregator(specs, partials=True)
    lengths = [len(c) for c in batch.cuboids]
    out = {c: [] for c in batch.cuboids}
    for level, key, st, _ in reduce_batch(groups, lengths, agg):
        out[batch.cuboids[level]].append((key, agg.finalize(st)))
    return out


def compute_all_cuboid(rows: Iterable[tuple], specs: Sequence[AggSpec], n_dims: int) -> Optional[tuple]:
    """Grand total over ``rows``; combines one chunk at a time."""
    agg = Aggregator(specs, partials=True)
    acc = None
    chunk: list = []
    for row in rows:
        chunk.append(tuple(row[n_dims:]) + (RAW, ALL_IDENTIFIER))
        if len(chunk) >= 4096:
            acc = agg.merge(acc, agg.group(chunk))
            chunk = []
    if chunk:
        acc = agg.merge(acc, agg.group(chunk))
    return None if acc is None else agg.finalize(acc)


def format_line(key: tuple, values: tuple) -> str:
    return "\t".join(map(str, key)) + " | " + "\t".join(map(format_value, values))


def view_header(cuboid: Sequence[int], specs: Sequence[AggSpec]) -> str:
    return f"cuboid={lattice.label(cuboid)} functions={','.join(s.label for s in specs)}"


def write_view_file(path: Path, cuboid, specs, cells: Iterable[tuple]) -> int:
    tmp = path.with_name(path.name + ".tmp")
    n = 0
    with open(tmp, "w", encoding="utf-8", buffering=1 << 20) as fh:
        fh.write(view_header(cuboid, specs) + "\n")
        buf = []
        for key, values in cells:
            buf.append(format_line(key, values))
            n += 1
            if len(buf) >= 8192:
                fh.write("\n".join(buf) + "\n")
                buf.clear()
        if buf:
            fh.write("\n".join(buf) + "\n")
    os.replace(tmp, path)
    return n


def merge_states(old, delta, agg: Aggregator):
    """Merge-join two sorted streams of flattened states (V and ΔV)."""
    sentinel = object()
    o_it, d_it = iter(old), iter(delta)
    o = next(o_it, sentinel)
    d = next(d_it, sentinel)
    while o is not sentinel or d is not sentinel:
        if d is sentinel or (o is not sentinel and o[0] < d[0]):
            yield o
            o = next(o_it, sentinel)
        elif o is sentinel or d[0] < o[0]:
            yield d
            d = next(d_it, sentinel)
        else:
            st = agg.merge(agg.unflatten(o[1]), agg.unflatten(d[1]))
            yield o[0], agg.flatten(st)
            o = next(o_it, sentinel)
            d = next(d_it, sentinel)


class CubeGenJob(MapReduceJob):
    """Callbacks of a CubeGen job.

    ``mode="final"`` computes every spec over the whole reduce input and
    writes finished cells (optionally also the incremental-class states, to
    be cached as V).  ``mode="delta"`` recomputes the recompute-class specs
    over cached runs plus delta, computes ΔV for the incremental-class specs
    over the delta only, and merges ΔV into the cached V in the refresh
    phase.
    """

    def __init__(self, plan: BatchPlan, alloc, specs: Sequence[AggSpec], n_dims: int, *,
                 mode: str = "final", cache_views: bool = False, combine: bool = False,
                 include_all: Optional[bool] = None, views_dir=None, store=None,
                 publish_state: bool = True):
        if mode not in ("final", "delta"):
            raise ValueError(f"unknown CubeGen mode {mode!r}")
        self.plan = plan
        self.specs = list(specs)
        self.n_dims = n_dims
        self.mode = mode
        self.include_all = plan.include_all if include_all is None else include_all
        self.part = Partitioner(plan, alloc, self.include_all)
        self.num_partitions = self.part.num_partitions
        self.views_dir = Path(views_dir) if views_dir is not None else None
        self.store = store
        self.publish_state = publish_state

        self.r_idx = [i for i, s in enumerate(self.specs) if not s.incremental]
        self.i_idx = [i for i, s in enumerate(self.specs) if s.incremental]
        self.i_specs = [self.specs[i] for i in self.i_idx]
        self.cache_views = bool(cache_views and self.i_idx)
        if mode == "delta" and not self.i_idx:
            raise ValueError("delta mode needs incremental-class functions")

        use_combine = combine and all(s.func.combinable for s in self.specs)
        self.agg = Aggregator(self.specs, partials=use_combine)
        self.agg_r = Aggregator([self.specs[i] for i in self.r_idx], partials=use_combine,
                                layout=(self.agg, self.r_idx)) if self.r_idx else None
        self.agg_i = Aggregator(self.i_specs, partials=use_combine,
                                layout=(self.agg, self.i_idx)) if self.i_idx else None
        self.combine = combiner(self.agg) if use_combine else None

        self._emitters = [(_projector(b.sort_dims), (RAW, b.identifier)) for b in plan.batches]
        if self.include_all:
            self._emitters.append((_projector(()), (RAW, ALL_IDENTIFIER)))
        self._batch_of_part = []
        for b, s, r in zip(plan.batches, alloc.offsets, alloc.counts):
            self._batch_of_part.extend([b] * r)
        if self.include_all:
            self._batch_of_part.append(Batch(index=len(plan.batches), cuboids=(lattice.ALL,),
                                             identifier=ALL_IDENTIFIER))
        self.numbers = {c: plan.numbering[lattice.canonical_id(c)] for b in self._batch_of_part
                        for c in b.cuboids}

    # -- map side ----------------------------------------------------------
    def map(self, row):
        n = self.n_dims
        meas = row[n:]
        return [(g(row), meas + t) for g, t in self._emitters]

    def partition(self, key, value):
        return self.part(key, value)

    def batch_for(self, partition: int) -> Batch:
        return self._batch_of_part[partition]

    # -- reduce side ---------------------------------------------------------
    def reduce(self, ctx: TaskContext, groups):
        batch = self.batch_for(ctx.partition)
        lengths = [len(c) for c in batch.cuboids]
        numbers = [self.numbers[c] for c in batch.cuboids]
        wd = ctx.workdir
        k = len(batch.cuboids)
        out = {"parts": {}, "istate": {}, "r": {}, "accumulators": k - 1}
        writers: dict = {}

        def open_writer(kind, level):
            path = wd / f"{kind}-{numbers[level]}.run"
            w = RunWriter(path, floats=kind != "istate")
            writers[(kind, level)] = w
            out[kind][numbers[level]] = path
            return w

        if self.mode == "final":
            parts = [open_writer("parts", lv) for lv in range(k)]
            istate = [open_writer("istate", lv) for lv in range(k)] if self.cache_views else None
            agg_all, agg_delta = self.agg, None
        else:
            parts = [open_writer("r", lv) for lv in range(k)] if self.agg_r else None
            istate = [open_writer("istate", lv) for lv in range(k)]
            agg_all, agg_delta = self.agg_r, self.agg_i

        counters = ctx.counters
        work = 0

        def counted(gs):
            nonlocal work
            for g in gs:
                work += len(g[1])
                yield g

        gauge: dict = {}
        try:
            agg, i_idx, agg_i = self.agg, self.i_idx, self.agg_i
            for level, key, sa, sd in reduce_batch(counted(groups), lengths, agg_all, agg_delta, gauge):
                if self.mode == "final":
                    parts[level].write(key, agg.finalize(sa))
                    if istate is not None:
                        istate[level].write(key, agg_i.flatten([sa[i] for i in i_idx]))
                else:
                    if parts is not None:
                        parts[level].write(key, self.agg_r.finalize(sa))
                    if sd is not None:
                        istate[level].write(key, agg_i.flatten(sd))
            for w in writers.values():
                w.close()
        except BaseException:
            for w in writers.values():
                w.abort()
            raise
        counters["reduce_work_units"] += work * k
        counters["reduce_cells"] += sum(w.records for (kind, _), w in writers.items()
                                        if kind in ("parts", "r"))
        out["accumulators"] = gauge.get("open_accumulators", 0)
        return out

    # -- refresh ---------------------------------------------------------------
    def refresh(self, ctx: TaskContext, out):
        if out is None or (self.mode == "final" and not self.cache_views):
            return out
        out = dict(out)
        vdir = ctx.node_work("view")
        if self.mode == "final":
            files = []
            for number, path in out["istate"].items():
                dest = vdir / f"cuboid-{number}.run"
                os.replace(path, dest)
                files.append(dest)
            out["view_files"] = files
            return out

        entry = ctx.store.entry(ctx.node, ctx.app, ctx.partition, VIEW)
        if entry is None:
            raise JobAbort(f"no cached view for {ctx.app} partition {ctx.partition} on node {ctx.node}")
        old_files = {f.name: f for f in entry.files}
        agg_i, agg_r = self.agg_i, self.agg_r
        r_idx, i_idx = self.r_idx, self.i_idx
        width = len(self.specs)
        parts, files = {}, []
        merged = 0
        for number, dpath in out["istate"].items():
            old = old_files.get(f"cuboid-{number}.run")
            if old is None:
                raise JobAbort(f"cached view of partition {ctx.partition} lacks cuboid {number}")
            new_path = vdir / f"cuboid-{number}.run"
            part_path = ctx.workdir / f"parts-{number}.run"
            rstream = read_run(out["r"][number]) if agg_r is not None else None
            sentinel = object()
            r = next(rstream, sentinel) if rstream is not None else None
            with RunWriter(new_path) as vw, RunWriter(part_path, floats=True) as pw:
                delta = _Counted(read_run(dpath))
                for key, flat in merge_states(read_run(old), delta, agg_i):
                    vw.write(key, flat)
                    vals = [None] * width
                    for i, v in zip(i_idx, agg_i.finalize(agg_i.unflatten(flat))):
                        vals[i] = v
                    if rstream is not None:
                        if r is sentinel or r[0] != key:
                            raise JobAbort(f"view state and recomputed cells disagree at {key!r}")
                        for i, v in zip(r_idx, r[1]):
                            vals[i] = v
                        r = next(rstream, sentinel)
                    pw.write(key, tuple(vals))
                if rstream is not None and r is not sentinel:
                    raise JobAbort(f"recomputed cell {r[0]!r} has no view state")
            merged += delta.n
            files.append(new_path)
            parts[number] = part_path
        ctx.counters["refresh_merges"] += merged
        out["parts"] = parts
        out["view_files"] = files
        return out

    # -- commit ------------------------------------------------------------------
    def validate(self, result: JobResult) -> None:
        bad = result.counters.get("bad_records", 0)
        good = result.counters.get("input_tuples_read", 0)
        if bad and bad > BAD_RECORD_LIMIT * (bad + good):
            raise DataError(f"{bad} malformed input lines out of {bad + good} (more than 1%)")

    def part_files(self, result: JobResult) -> dict:
        """cuboid number -> per-partition part files, in partition order."""
        outputs = result.refresh_outputs if result.refresh_outputs else result.reduce_outputs
        by_number: dict = {}
        for p in sorted(outputs):
            for number, path in outputs[p]["parts"].items():
                by_number.setdefault(number, []).append(path)
        return by_number

    def commit(self, result: JobResult) -> None:
        if self.views_dir is not None:
            write_views(self.views_dir, self.cuboid_numbers(), self.specs, self.part_files(result))
        if self.cache_views and self.store is not None:
            for p in sorted(result.refresh_outputs):
                files = result.refresh_outputs[p]["view_files"]
                node = result.assignment[p]
                ent = self.store.register_view(node, result.spec.app_id, p, files, result.spec.epoch)
                if self.publish_state:
                    self.store.publish_view_state(result.spec.app_id, p, ent)

    def cuboid_numbers(self) -> list:
        """``(cuboid, number)`` for every output cuboid, in plan order."""
        return _unique_cuboids(self._batch_of_part, self.numbers)


def _unique_cuboids(batches, numbers) -> list:
    out, seen = [], set()
    for b in batches:
        for c in b.cuboids:
            if numbers[c] not in seen:
                seen.add(numbers[c])
                out.append((c, numbers[c]))
    return out


def write_views(views_dir, cuboids, specs, by_number: dict, cell_sink=None) -> dict:
    """Merge every cuboid's per-partition part files into one view file.

    ``cuboids`` lists ``(cuboid, number)``; returns label -> cell count.
    """
    views_dir = Path(views_dir)
    views_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for c, number in cuboids:
        cells = heapq.merge(*[read_run(p) for p in by_number.get(number, [])], key=itemgetter(0))
        if cell_sink is not None:
            cells = cell_sink(c, cells)
        counts[lattice.label(c)] = write_view_file(views_dir / f"{lattice.label(c)}.view", c, specs, cells)
    return counts


class _Counted:
    def __init__(self, it):
        self._it = iter(it)
        self.n = 0

    def __iter__(self):
        for rec in self._it:
            self.n += 1
            yield rec
