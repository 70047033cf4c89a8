"""In-process MapReduce runner with the optional Merge and Refresh phases.

Phases are barrier-synchronised: every map task finishes (sorted, partitioned
runs on disk) before shuffle; shuffle moves run files to the owning reducer
node; merge+reduce runs per partition; refresh runs after all reduces.
Nothing reaches the local store until every phase has succeeded.
"""

from __future__ import annotations

import logging
import os
import shutil
import time
import uuid
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from ..errors import ConfigError, InjectedFault, JobAbort, TaskFailed
from .. import localstore
from .extsort import (combine_sorted, estimate_size, merge_runs, write_run)
from .scheduler import Cluster, SchedulingFactory, TaskScheduler

log = logging.getLogger(__name__)

DEFAULT_MEM_BUDGET = 64 * 1024 * 1024
JOB_KINDS = ("materialize", "ccc", "update-recompute", "update-incremental", "update-mixed",
             "refresh-baseline", "propagate-baseline", "recover")

COUNTER_NAMES = (
    "jobs", "input_tuples_read", "bad_records", "map_output_records", "combine_output_records",
    "spills", "bytes_shuffled", "cached_runs_merged", "reduce_input_records", "reduce_groups",
    "refresh_merges", "bytes_copied_for_cache", "task_retries",
)


@dataclass
class JobSpec:
    kind: str
    app_id: str
    num_partitions: int
    mappers: int = 4
    workers: int = 1
    mem_budget: int = DEFAULT_MEM_BUDGET
    merge_cache: bool = False
    cache_runs: bool = False
    refresh: bool = False
    scheduling: str = "fresh"
    history: Optional[str] = None
    seed: Optional[int] = None
    max_attempts: int = 3
    merge_factor: int = 16
    partitions: Optional[frozenset] = None
    epoch: int = 0

    def __post_init__(self):
        if self.kind not in JOB_KINDS:
            raise ConfigError(f"unknown job kind {self.kind!r}")
        if self.num_partitions < 1 or self.mappers < 1 or self.workers < 1:
            raise ConfigError("partitions, mappers and workers must all be >= 1")
        if self.mem_budget <= 0:
            raise ConfigError("memory budget must be positive")
        if self.merge_cache and self.scheduling != "replay":
            raise ConfigError("merging cached runs requires replay scheduling")


class MapReduceJob:
    """Callbacks of one job.  Subclasses override what they need."""

    combine: Optional[Callable] = None

    def map(self, item) -> Iterable[tuple]:
        raise NotImplementedError

    def partition(self, key: tuple, value: tuple) -> int:
        return 0

    def reduce(self, ctx: "TaskContext", groups) -> Any:
        for _ in groups:
            pass

    def refresh(self, ctx: "TaskContext", reduced) -> Any:
        return reduced

    def validate(self, result: "JobResult") -> None:
        """Last chance to reject the job before anything is registered."""

    def commit(self, result: "JobResult") -> None:
        pass


@dataclass
class TaskContext:
    job_id: str
    app: str
    partition: int
    node: int
    attempt: int
    epoch: int
    workdir: Path        # job-scoped scratch for outputs, off the node
    store: "localstore.LocalStore"
    counters: Counter = field(default_factory=Counter)
    _node_dirs: list = field(default_factory=list)

    def node_work(self, name: str) -> Path:
        """A fresh directory inside this partition's local store area."""
        d = self.store.partition_dir(self.node, self.app, self.partition) / f"{name}-{self.job_id}-a{self.attempt}"
        d.mkdir(parents=True, exist_ok=True)
        self._node_dirs.append(d)
        return d


@dataclass
class JobResult:
    job_id: str
    spec: JobSpec
    counters: Counter
    assignment: dict
    reduce_outputs: dict
    refresh_outputs: dict
    reduce_times: dict
    partition_counters: dict
    registered: dict = field(default_factory=dict)

    def counter_lines(self) -> list:
        names = list(COUNTER_NAMES) + sorted(set(self.counters) - set(COUNTER_NAMES))
        return [f"counter={n} value={self.counters.get(n, 0)}" for n in names]


class FaultInjector:
    """Test hook: fail chosen task attempts.

    ``plan`` maps ``(phase, task)`` to the set of attempt numbers that fail;
    phases are ``map``, ``reduce`` (fires after all groups were consumed and
    outputs written) and ``refresh``.
    """

    def __init__(self, plan: Optional[dict] = None):
        self.plan = {k: set(v) for k, v in (plan or {}).items()}
        self.fired: list = []

    def check(self, phase: str, task: int, attempt: int) -> None:
        if attempt in self.plan.get((phase, task), ()):
            self.fired.append((phase, task, attempt))
            raise InjectedFault(f"injected {phase} failure: task {task} attempt {attempt}")


_NO_FAULTS = FaultInjector()


def _groups(cached, delta, counters: Counter):
    """Yield ``(key, values, n_cached)``; cached values precede delta values.

    Aborts the job if keys ever go backwards.
    """
    sentinel = object()
    c_it, d_it = iter(cached), iter(delta)
    c = next(c_it, sentinel)
    d = next(d_it, sentinel)
    prev = None
    records = 0
    groups = 0
    while c is not sentinel or d is not sentinel:
        if d is sentinel or (c is not sentinel and c[0] <= d[0]):
            key = c[0]
        else:
            key = d[0]
        if prev is not None and not key > prev:
            raise JobAbort(f"reduce input out of order: {key!r} after {prev!r}")
        values = []
        while c is not sentinel and c[0] == key:
            values.append(c[1])
            c = next(c_it, sentinel)
        n_cached = len(values)
        while d is not sentinel and d[0] == key:
            values.append(d[1])
            d = next(d_it, sentinel)
        records += len(values)
        groups += 1
        prev = key
        yield key, values, n_cached
    counters["reduce_input_records"] += records
    counters["reduce_groups"] += groups


class Engine:
    def __init__(self, root, cluster: Optional[Cluster] = None, store=None,
                 factory: Optional[SchedulingFactory] = None, faults: Optional[FaultInjector] = None):
        self.root = Path(root)
        self.cluster = cluster or Cluster(self.root)
        self.store = store or localstore.LocalStore(self.root)
        self.factory = factory or SchedulingFactory(self.root)
        self.scheduler = TaskScheduler(self.cluster, self.factory)
        self.faults = faults or _NO_FAULTS

    # -- map ---------------------------------------------------------------
    def _map_task(self, spec: JobSpec, job: MapReduceJob, job_id: str, index: int, split, attempt: int):
        workdir = self.root / "tmp" / job_id / f"map-{index:04d}-a{attempt}"
        workdir.mkdir(parents=True, exist_ok=True)
        counters: Counter = Counter()
        nparts = spec.num_partitions
        keep = spec.partitions
        buffers: dict = {}
        spills: dict = {}
        used = 0
        spill_no = 0
        combine = job.combine

        def spill():
            nonlocal spill_no
            for p in sorted(buffers):
                buf = buffers[p]
                buf.sort(key=lambda r: r[0])
                path = workdir / f"p{p}-s{spill_no:04d}.run"
                w = write_run(path, combine_sorted(buf, combine) if combine else buf)
                if combine:
                    counters["combine_output_records"] += w.records
                spills.setdefault(p, []).append(path)
            buffers.clear()
            spill_no += 1
            counters["spills"] += 1

        self.faults.check("map", index, attempt)
        for item in split:
            counters["input_tuples_read"] += 1
            for key, value in job.map(item):
                counters["map_output_records"] += 1
                p = job.partition(key, value)
                if not 0 <= p < nparts:
                    raise JobAbort(f"partition {p} out of range [0, {nparts})")
                if keep is not None and p not in keep:
                    continue
                buf = buffers.get(p)
                if buf is None:
                    buf = buffers[p] = []
                buf.append((key, value))
                used += estimate_size(key, value)
                if used >= spec.mem_budget:
                    spill()
                    used = 0
        if buffers:
            spill()
        counters["bad_records"] += getattr(split, "bad_records", 0)

        outputs = {}
        for p, paths in spills.items():
            if len(paths) == 1:
                outputs[p] = paths[0]
            else:
                final = workdir / f"p{p}.run"
                merged = merge_runs(paths)
                write_run(final, combine_sorted(merged, combine) if combine else merged)
                for q in paths:
                    q.unlink()
                outputs[p] = final
        return outputs, counters

    # -- merge + reduce ------------------------------------------------------
    def _compact(self, runs: list, target: Path, factor: int, label: str) -> list:
        """Intermediate merge passes until at most ``factor`` runs remain."""
        runs = list(runs)
        step = 0
        while len(runs) > factor:
            head, runs = runs[:factor], runs[factor:]
            out = target / f"{label}-merge-{step:04d}.run"
            write_run(out, merge_runs(head))
            runs.insert(0, out)
            step += 1
        return runs

    def _reduce_task(self, spec, job, ctx: TaskContext, delta_runs):
        store, p, node = self.store, ctx.partition, ctx.node
        ctx.workdir.mkdir(parents=True, exist_ok=True)
        cached = []
        old_entry = None
        if spec.merge_cache:
            old_entry = store.entry(node, spec.app_id, p, "sorted-runs")
            if old_entry is None:
                raise JobAbort(f"no cached runs for {spec.app_id} partition {p} on node {node}")
            cached = list(old_entry.files)
        runs_dir = None
        if len(cached) > spec.merge_factor or len(delta_runs) > spec.merge_factor:
            runs_dir = ctx.node_work("runs")
            cached = self._compact(cached, runs_dir, spec.merge_factor, "cached")
            delta_runs = self._compact(delta_runs, runs_dir, spec.merge_factor, "delta")
        ctx.counters["cached_runs_merged"] += len(cached)

        groups = _groups(merge_runs(cached), merge_runs(delta_runs), ctx.counters)
        t0 = time.perf_counter()
        out = job.reduce(ctx, groups)
        elapsed = time.perf_counter() - t0
        self.faults.check("reduce", p, ctx.attempt)
        return out, ctx, elapsed, cached + list(delta_runs), runs_dir

    def _run_with_retries(self, fn, spec: JobSpec, phase: str, task: int, counters: Counter,
                          cleanup: Callable[[int], None]):
        last = None
        for attempt in range(1, spec.max_attempts + 1):
            try:
                return fn(attempt)
            except JobAbort:
                cleanup(attempt)
                raise
            except Exception as exc:  # retried per fault policy
                last = exc
                counters["task_retries"] += 1
                log.warning("%s task %d attempt %d failed: %s", phase, task, attempt, exc)
                cleanup(attempt)
        raise TaskFailed(f"{phase} task {task} failed {spec.max_attempts} times: {last}") from last

    # -- driver ------------------------------------------------------------
    def run_job(self, spec: JobSpec, splits: Sequence, job: MapReduceJob,
                assignment: Optional[dict] = None) -> JobResult:
        job_id = f"{spec.kind}-{uuid.uuid4().hex[:10]}"
        jobdir = self.root / "tmp" / job_id
        counters: Counter = Counter(jobs=1)
        parts = sorted(spec.partitions) if spec.partitions is not None else list(range(spec.num_partitions))
        node_dirs: list = []
        shuffled_files: list = []
        try:
            with ThreadPoolExecutor(max_workers=spec.workers) as pool:
                # map
                def map_one(i, split):
                    return self._run_with_retries(
                        lambda a: self._map_task(spec, job, job_id, i, split, a), spec, "map", i, counters,
                        lambda a: shutil.rmtree(jobdir / f"map-{i:04d}-a{a}", ignore_errors=True))
                map_results = list(pool.map(map_one, range(len(splits)), splits))
                for _, c in map_results:
                    counters.update(c)

                # shuffle
                if assignment is None:
                    assignment = self.scheduler.plan(spec.app_id, parts, spec.scheduling,
                                                     history=spec.history, seed=spec.seed)
                delta: dict = {p: [] for p in parts}
                for i, (outputs, _) in enumerate(map_results):
                    for p, path in sorted(outputs.items()):
                        node = assignment[p]
                        dest_dir = self.store.partition_dir(node, spec.app_id, p) / "incoming"
                        dest_dir.mkdir(parents=True, exist_ok=True)
                        dest = dest_dir / f"{job_id}-m{i:04d}.run"
                        counters["bytes_shuffled"] += path.stat().st_size
                        os.replace(path, dest)
                        shuffled_files.append(dest)
                        delta[p].append(dest)

                # merge + reduce
                def reduce_one(p):
                    holder = {}

                    def attempt_fn(a):
                        ctx = TaskContext(job_id=job_id, app=spec.app_id, partition=p, node=assignment[p],
                                          attempt=a, epoch=spec.epoch, workdir=jobdir / f"reduce-p{p}-a{a}",
                                          store=self.store)
                        holder["ctx"] = ctx
                        return self._reduce_task(spec, job, ctx, delta[p])

                    def cleanup(a):
                        shutil.rmtree(jobdir / f"reduce-p{p}-a{a}", ignore_errors=True)
                        ctx = holder.pop("ctx", None)
                        for d in (ctx._node_dirs if ctx else []):
                            shutil.rmtree(d, ignore_errors=True)

                    return self._run_with_retries(attempt_fn, spec, "reduce", p, counters, cleanup)

                reduce_results = dict(zip(parts, pool.map(reduce_one, parts)))
                for _, ctx, _, _, _ in reduce_results.values():
                    node_dirs.extend(ctx._node_dirs)

                # refresh
                refresh_outputs = {}
                if spec.refresh:
                    def refresh_one(p):
                        out, rctx = reduce_results[p][:2]
                        made: list = []

                        def attempt_fn(a):
                            ctx = TaskContext(job_id=job_id, app=spec.app_id, partition=p, node=assignment[p],
                                              attempt=a, epoch=spec.epoch, workdir=rctx.workdir,
                                              store=self.store, counters=Counter())
                            made.append(ctx)
                            self.faults.check("refresh", p, a)
                            return job.refresh(ctx, out), ctx

                        def cleanup(a):
                            for ctx in made:
                                for d in ctx._node_dirs:
                                    shutil.rmtree(d, ignore_errors=True)
                            made.clear()

                        return self._run_with_retries(attempt_fn, spec, "refresh", p, counters, cleanup)

                    for p, (out, ctx) in zip(parts, pool.map(refresh_one, parts)):
                        refresh_outputs[p] = out
                        node_dirs.extend(ctx._node_dirs)
                        counters.update(ctx.counters)

            partition_counters = {}
            for p, (_, ctx, _, _, _) in reduce_results.items():
                counters.update(ctx.counters)
                partition_counters[p] = ctx.counters
            result = JobResult(
                job_id=job_id, spec=spec, counters=counters, assignment=dict(assignment),
                reduce_outputs={p: r[0] for p, r in reduce_results.items()},
                refresh_outputs=refresh_outputs,
                reduce_times={p: r[2] for p, r in reduce_results.items()},
                partition_counters=partition_counters,
            )

            # commit: register reduce-input runs where they lie, then job outputs
            job.validate(result)
            keep_files: set = set()
            if spec.cache_runs:
                for p in parts:
                    files = reduce_results[p][3]
                    result.registered[p] = self.store.register_runs(assignment[p], spec.app_id, p, files, spec.epoch)
                    keep_files.update(files)
            job.commit(result)
        except BaseException as exc:
            try:
                exc.job_counters = counters   # for the failure report
            except AttributeError:
                pass
            for d in node_dirs:
                shutil.rmtree(d, ignore_errors=True)
            for f in shuffled_files:
                f.unlink(missing_ok=True)
            raise
        finally:
            shutil.rmtree(jobdir, ignore_errors=True)
        for f in shuffled_files:
            if f not in keep_files:
                f.unlink(missing_ok=True)
        if not spec.cache_runs:
            for r in reduce_results.values():
                if r[4] is not None:
                    shutil.rmtree(r[4], ignore_errors=True)
        return result
