"""Applications: materialization, view updates, checkpoints and recovery.

An application owns one cube over one schema.  Its durable state lives in
``durable/<app>/`` under the cluster root::

    app.json          epoch, allocation and the inputs applied so far
    profile.txt       saved CCC report
    views/            one ``<label>.view`` file per cuboid
    vstate/, snapshots/, inputs/   see localstore

Updates come in three flavours.  ``recompute`` replays the sticky schedule
and merges the delta's map output with the sorted runs cached at each
reducer.  ``incremental`` computes ΔV in the reduce phase and folds it into
the cached V in the refresh phase.  ``baseline`` is the plain two-job
MapReduce refresh (propagate ΔV, then re-read V and ΔV and merge), kept for
comparison; it never touches the local store.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
import shutil
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import lattice, localstore
from .aggregates import Aggregator, parse_specs
from .balancer import AllocationPlan, ProfileReport, allocate, run_ccc
from .config import AppConfig
from .cubing import CubeGenJob, Partitioner, write_views
from .dataio import Dataset, Schema
from .engine.extsort import RunWriter, read_run
from .engine.job import Engine, FaultInjector, JobResult, JobSpec, MapReduceJob
from .engine.scheduler import Cluster, SchedulingFactory
from .errors import ConfigError, JobAbort, UpdateRejected
from .localstore import RUNS, VIEW, LocalStore, StoreEntry
from .planner import generate_plan

log = logging.getLogger(__name__)

UPDATE_MODES = ("auto", "recompute", "incremental", "mixed", "baseline")
_MODE_ALIASES = {"mr-baseline": "baseline"}


@dataclass
class UpdateReport:
    app: str
    epoch: int
    mode: str
    results: list                       # JobResult per job, in order
    views_dir: Path
    recovered: list = field(default_factory=list)  # (partition, node, kinds)
    elapsed: float = 0.0

    @property
    def counters(self) -> Counter:
        total: Counter = Counter()
        for r in self.results:
            total.update(r.counters)
        return total


# -- auxiliary jobs ------------------------------------------------------------------

class RecoverJob(MapReduceJob):
    """Re-shuffles retained inputs into one partition's sorted runs.

    Map and partition are CubeGen's; the reduce does nothing, since the
    point of the job is the runs the engine registers.
    """

    def __init__(self, cubegen: CubeGenJob):
        self.cg = cubegen
        self.combine = cubegen.combine

    def map(self, row):
        return self.cg.map(row)

    def partition(self, key, value):
        return self.cg.partition(key, value)

    def reduce(self, ctx, groups):
        return None


class BaselinePropagateJob(CubeGenJob):
    """Job 1 of the baseline: ΔV over ΔD, written to the durable area."""

    def __init__(self, *args, deltav_dir: Path, **kw):
        super().__init__(*args, mode="final", cache_views=True, **kw)
        self.deltav_dir = Path(deltav_dir)

    def commit(self, result: JobResult) -> None:
        for p, out in sorted(result.reduce_outputs.items()):
            pdir = self.deltav_dir / f"p{p}"
            pdir.mkdir(parents=True, exist_ok=True)
            for number, path in out["istate"].items():
                shutil.copyfile(path, pdir / f"cuboid-{number}.run")


class StateSplit:
    """Flattened states of several per-cuboid files, as ``(number, key, flat)``."""

    def __init__(self, files):
        self.files = list(files)   # (number, path)

    def __iter__(self):
        for number, path in self.files:
            for key, flat in read_run(path):
                yield number, key, flat


class BaselineRefreshJob(MapReduceJob):
    """Job 2 of the baseline: merge V and ΔV per cell, at most two values each."""

    def __init__(self, plan, alloc, specs, *, include_all: bool, app: str, store: LocalStore,
                 views_dir: Path, epoch: int):
        self.specs = list(specs)
        self.agg = Aggregator(self.specs)
        self.cg = CubeGenJob(plan, alloc, specs, plan.n, include_all=include_all)
        self.numbers = self.cg.numbers
        part = Partitioner(plan, alloc, include_all)
        self._hash = part.hash
        self.num_partitions = part.num_partitions
        self._route = {}
        for b, s, r in zip(plan.batches, alloc.offsets, alloc.counts):
            for c in b.cuboids:
                self._route[self.numbers[c]] = (s, r, len(b.partition_dims))
        if include_all:
            self._route[self.numbers[lattice.ALL]] = (alloc.total, 1, 0)
        self.app = app
        self.store = store
        self.views_dir = views_dir
        self.epoch = epoch

    def map(self, item):
        number, key, flat = item
        return [((number,) + tuple(key), tuple(flat))]

    def partition(self, key, value):
        s, r, width = self._route[key[0]]
        if r == 1:
            return s
        return s + self._hash(key[1:1 + width]) % r

    def reduce(self, ctx, groups):
        batch = self.cg.batch_for(ctx.partition)
        wd = ctx.workdir
        (wd / "vstate").mkdir(parents=True, exist_ok=True)
        agg = self.agg
        vw, pw = {}, {}
        for c in batch.cuboids:
            n = self.numbers[c]
            vw[n] = RunWriter(wd / "vstate" / f"cuboid-{n}.run")
            pw[n] = RunWriter(wd / f"parts-{n}.run", floats=True)
        try:
            for key, values, _ in groups:
                if len(values) > 2:
                    raise JobAbort(f"cell {key!r} has {len(values)} states; expected V and ΔV at most")
                st = agg.unflatten(values[0])
                if len(values) == 2:
                    st = agg.merge(st, agg.unflatten(values[1]))
                    ctx.counters["refresh_merges"] += 1
                number, cell = key[0], key[1:]
                vw[number].write(cell, agg.flatten(st))
                pw[number].write(cell, agg.finalize(st))
            for w in list(vw.values()) + list(pw.values()):
                w.close()
        except BaseException:
            for w in list(vw.values()) + list(pw.values()):
                w.abort()
            raise
        return {"parts": {n: w.path for n, w in pw.items()},
                "vstate": [w.path for w in vw.values()]}

    def commit(self, result: JobResult) -> None:
        write_views(self.views_dir, self.cg.cuboid_numbers(), self.specs, self.cg.part_files(result))
        for p, out in sorted(result.reduce_outputs.items()):
            ent = StoreEntry(self.app, p, VIEW, [Path(f) for f in out["vstate"]], self.epoch)
            self.store.publish_view_state(self.app, p, ent)


# -- the application -----------------------------------------------------------------

class Application:
    def __init__(self, config: AppConfig, *, cluster: Optional[Cluster] = None,
                 faults: Optional[FaultInjector] = None):
        self.config = config.validate()
        self.app = config.app_id
        self.root = Path(config.root)
        self.cluster = cluster or Cluster(self.root, config.nodes)
        self.store = LocalStore(self.root)
        self.factory = SchedulingFactory(self.root)
        self.engine = Engine(self.root, self.cluster, self.store, self.factory, faults)
        if not config.schema:
            raise ConfigError("a schema file is required")
        self.schema = Schema.load(config.schema)
        self.n = self.schema.n_dims
        self.specs = parse_specs(config.functions, self.schema.measure_names)
        self.r_specs = [s for s in self.specs if not s.incremental]
        self.i_specs = [s for s in self.specs if s.incremental]
        if config.cuboids:
            requested = [lattice.parse_label(c, self.n) for c in config.cuboids]
            self.plan = generate_plan(self.n, requested, include_all=False)
        else:
            self.plan = generate_plan(self.n)

    # -- paths and state -------------------------------------------------------
    @property
    def durable(self) -> Path:
        return self.store.durable_dir(self.app)

    @property
    def views_dir(self) -> Path:
        return self.durable / "views"

    @property
    def state_path(self) -> Path:
        return self.durable / "app.json"

    @property
    def profile_path(self) -> Path:
        return Path(self.config.profile) if self.config.profile else self.durable / "profile.txt"

    def state(self) -> Optional[dict]:
        if not self.state_path.exists():
            return None
        return json.loads(self.state_path.read_text())

    def _save_state(self, st: dict) -> None:
        self.durable.mkdir(parents=True, exist_ok=True)
        tmp = self.state_path.with_name("app.json.tmp")
        tmp.write_text(json.dumps(st, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.state_path)

    def _fingerprint(self) -> dict:
        return {"functions": [f"{s.label}:{s.mode}" for s in self.specs],
                "dims": self.n, "cuboids": sorted(self.plan.requested), "include_all": self.plan.include_all}

    @contextmanager
    def _locked(self):
        """One job per application at a time."""
        self.durable.mkdir(parents=True, exist_ok=True)
        with open(self.durable / "LOCK", "w") as fh:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise UpdateRejected(f"another job of {self.app} is running") from None
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _spec(self, kind: str, num_partitions: int, **kw) -> JobSpec:
        c = self.config
        kw.setdefault("mappers", c.mappers)
        return JobSpec(kind=kind, app_id=kw.pop("app_id", self.app), num_partitions=num_partitions,
                       workers=c.workers, mem_budget=c.mem_budget, **kw)

    def _cubegen(self, alloc, **kw) -> CubeGenJob:
        return CubeGenJob(self.plan, alloc, self.specs, self.n, combine=self.config.combine, **kw)

    def _splits(self, path, mappers: Optional[int] = None) -> list:
        return Dataset(path, self.schema).splits(mappers or self.config.mappers)

    def _log_bad(self, splits) -> None:
        lines = [ln for sp in splits for ln in getattr(sp, "bad_lines", ())]
        if lines:
            with open(self.durable / "bad_records.log", "a", encoding="utf-8") as fh:
                fh.write("".join(ln + "\n" for ln in lines))

    # -- profiling -----------------------------------------------------------------
    def profile(self, data, save: bool = True) -> ProfileReport:
        """Run the CCC job over ``data`` and (by default) save the report."""
        c = self.config
        report = run_ccc(self.engine, self._splits(data), self.plan, self.specs, self.n,
                         sample_rate=c.sample_rate, app_id=f"{self.app}.ccc", combine=c.combine,
                         repeats=c.ccc_repeats, workers=c.workers, mem_budget=c.mem_budget)
        if save:
            report.save(self.profile_path)
        return report

    def allocation(self, data=None) -> AllocationPlan:
        """The saved allocation, else one from the saved (or a fresh) profile."""
        st = self.state()
        if st is not None and st.get("alloc"):
            return AllocationPlan.from_counts(st["alloc"])
        if self.profile_path.exists():
            report = ProfileReport.load(self.profile_path)
            if len(report) != len(self.plan.batches):
                raise ConfigError(f"saved profile has {len(report)} batches, the plan has "
                                  f"{len(self.plan.batches)}; re-run profile")
        elif data is None:
            raise ConfigError("no saved profile; profile the data first")
        else:
            report = self.profile(data)
        return allocate(report, self.config.reducers)

    # -- materialization -------------------------------------------------------------
    def _reset(self) -> None:
        for node in range(self.cluster.nodes):
            shutil.rmtree(self.store.root / "nodes" / str(node) / self.app, ignore_errors=True)
        keep = {self.profile_path.resolve(), (self.durable / "LOCK").resolve()}
        if self.durable.exists():
            for child in self.durable.iterdir():
                if child.resolve() in keep:
                    continue
                if child.is_dir():
                    shutil.rmtree(child)
                else:
                    child.unlink()

    def materialize(self, data, cache: bool = True) -> UpdateReport:
        """Compute every cuboid over ``data`` and cache what later updates need.

        Starts the application over: earlier views, caches and snapshots go.
        """
        t0 = time.perf_counter()
        data = Path(data).resolve()
        with self._locked():
            if self.state() is not None:
                self._reset()
            alloc = self.allocation(data)
            cache_views = cache and bool(self.i_specs)
            cache_runs = cache and bool(self.r_specs)
            job = self._cubegen(alloc, cache_views=cache_views, views_dir=self.views_dir, store=self.store)
            spec = self._spec("materialize", job.num_partitions, cache_runs=cache_runs,
                              refresh=job.cache_views, epoch=0)
            splits = self._splits(data)
            result = self.engine.run_job(spec, splits, job)
            self._log_bad(splits)
            if cache_runs:
                self.store.log_input(self.app, 0, data)
            self._save_state({"app": self.app, "epoch": 0, "alloc": list(alloc.counts),
                              "inputs": [str(data)], "cached": cache, **self._fingerprint()})
            self._maybe_checkpoint(0, result.assignment)
        return UpdateReport(self.app, 0, "materialize", [result], self.views_dir,
                            elapsed=time.perf_counter() - t0)

    # -- updates ---------------------------------------------------------------------
    def resolve_mode(self, mode: Optional[str]) -> str:
        mode = _MODE_ALIASES.get(mode or "auto", mode or "auto")
        if mode not in UPDATE_MODES:
            raise UpdateRejected(f"unknown update mode {mode!r}")
        if mode == "auto":
            if not self.i_specs:
                return "recompute"
            return "incremental" if not self.r_specs else "mixed"
        if mode == "recompute" and self.i_specs:
            raise UpdateRejected(
                f"{', '.join(s.label for s in self.i_specs)} configured for incremental maintenance; "
                + ("use --mode mixed" if self.r_specs else "use --mode incremental"))
        if mode in ("incremental", "baseline") and self.r_specs:
            raise UpdateRejected(
                f"{', '.join(s.label for s in self.r_specs)} cannot be maintained incrementally; "
                + ("use --mode mixed" if self.i_specs else "use --mode recompute"))
        if mode == "mixed" and not (self.i_specs and self.r_specs):
            raise UpdateRejected("mixed mode needs both recompute-class and incremental-class functions")
        return mode

    def _check_state(self) -> dict:
        st = self.state()
        if st is None:
            raise UpdateRejected(f"application {self.app} has not been materialized")
        fp = self._fingerprint()
        if any(st.get(k) != v for k, v in fp.items()):
            raise UpdateRejected(f"configuration of {self.app} changed since materialization; "
                                 "materialize again")
        if not st.get("cached", True):
            raise UpdateRejected(f"{self.app} was materialized without caching")
        return st

    def update(self, delta, mode: Optional[str] = "auto", reapply: bool = False) -> UpdateReport:
        """Apply the appended tuples in ``delta`` to every view.

        A delta already applied (same path, same content) is skipped unless
        ``reapply`` is set, so re-running an update is harmless.
        """
        t0 = time.perf_counter()
        mode = self.resolve_mode(mode)
        delta = Path(delta).resolve()
        if not delta.exists():
            raise ConfigError(f"delta file {delta} does not exist")
        digest = localstore.sha256_file(delta)
        with self._locked():
            st = self._check_state()
            applied = st.setdefault("applied", [])
            if not reapply and [str(delta), digest] in applied:
                return UpdateReport(self.app, st["epoch"], "skipped", [], self.views_dir)
            epoch = st["epoch"] + 1
            alloc = AllocationPlan.from_counts(st["alloc"])
            if mode == "baseline":
                results, recovered = self._update_baseline(delta, alloc, epoch), []
            else:
                results, recovered = self._update_local(delta, alloc, epoch, mode)
            st["epoch"] = epoch
            st["inputs"].append(str(delta))
            applied.append([str(delta), digest])
            self._save_state(st)
        return UpdateReport(self.app, epoch, mode, results, self.views_dir, recovered,
                            elapsed=time.perf_counter() - t0)

    def _update_local(self, delta: Path, alloc, epoch: int, mode: str):
        r_side, i_side = bool(self.r_specs), bool(self.i_specs)
        probe = self._cubegen(alloc)
        parts = list(range(probe.num_partitions))
        assignment = self.engine.scheduler.plan(self.app, parts, "replay")
        recovered = self.ensure_local(assignment, epoch - 1)
        job = self._cubegen(alloc, mode="delta" if i_side else "final", cache_views=i_side,
                            views_dir=self.views_dir, store=self.store)
        spec = self._spec(f"update-{mode}", job.num_partitions, merge_cache=r_side, cache_runs=r_side,
                          refresh=i_side, scheduling="replay", epoch=epoch)
        splits = self._splits(delta)
        result = self.engine.run_job(spec, splits, job, assignment=assignment)
        self._log_bad(splits)
        if r_side:
            self.store.log_input(self.app, epoch, delta)
        self._maybe_checkpoint(epoch, result.assignment)
        return [result], recovered

    def _update_baseline(self, delta: Path, alloc, epoch: int) -> list:
        ns = f"{self.app}.baseline"
        deltav = self.durable / "deltav" / f"epoch-{epoch}"
        shutil.rmtree(deltav, ignore_errors=True)
        try:
            job1 = BaselinePropagateJob(self.plan, alloc, self.specs, self.n, combine=self.config.combine,
                                        deltav_dir=deltav)
            spec1 = self._spec("propagate-baseline", job1.num_partitions, app_id=ns, epoch=epoch)
            splits = self._splits(delta)
            r1 = self.engine.run_job(spec1, splits, job1)
            self._log_bad(splits)

            job2 = BaselineRefreshJob(self.plan, alloc, self.specs, include_all=job1.include_all,
                                      app=self.app, store=self.store, views_dir=self.views_dir, epoch=epoch)
            files = []
            for p in range(job2.num_partitions):
                for src in (self.store.vstate_dir(self.app, p), deltav / f"p{p}"):
                    for f in sorted(src.glob("cuboid-*.run")):
                        files.append((int(f.stem.split("-")[1]), f))
            m = max(1, min(self.config.mappers, len(files)))
            splits2 = [StateSplit(files[i::m]) for i in range(m)]
            spec2 = self._spec("refresh-baseline", job2.num_partitions, app_id=ns, mappers=m, epoch=epoch)
            r2 = self.engine.run_job(spec2, splits2, job2)
        finally:
            shutil.rmtree(deltav, ignore_errors=True)
        # the cached V is stale now; a later local update restores it from the durable copy
        for node in range(self.cluster.nodes):
            for p in range(job2.num_partitions):
                self.store.drop(node, self.app, p, VIEW)
        return [r1, r2]

    # -- checkpoints and recovery --------------------------------------------------
    def _maybe_checkpoint(self, epoch: int, assignment: dict):
        s = self.config.checkpoint_interval
        if not self.r_specs or not s or epoch == 0 or epoch % s:
            return None
        extra = {"scheduling.tsv": self.factory.path(self.app)}
        return self.store.checkpoint(self.app, epoch, assignment, extra=extra)

    def _kinds(self) -> list:
        return ([RUNS] if self.r_specs else []) + ([VIEW] if self.i_specs else [])

    def ensure_local(self, assignment: dict, epoch: int) -> list:
        """Rebuild any local-store entry an update is about to rely on.

        A missing (or out-of-date) entry is treated as a corrupted store.
        """
        recovered = []
        for p, node in sorted(assignment.items()):
            missing = []
            for kind in self._kinds():
                ent = self.store.entry(node, self.app, p, kind)
                if ent is None or ent.epoch != epoch:
                    if ent is not None:
                        self.store.drop(node, self.app, p, kind)
                    missing.append(kind)
            if missing:
                self.recover_partition(p, "node-corrupt", node, kinds=missing, epoch=epoch)
                recovered.append((p, node, tuple(missing)))
        return recovered

    def recover_partition(self, partition: int, failure: str, node: int, *,
                          kinds=None, epoch: Optional[int] = None) -> dict:
        st = self._check_state()
        epoch = st["epoch"] if epoch is None else epoch
        log.info("recovering %s partition %d on node %d (%s)", self.app, partition, node, failure)
        return localstore.recover(self.store, self.app, partition, failure, node,
                                  kinds=kinds or self._kinds(), epoch=epoch,
                                  replay=lambda p, nd, inputs, restored: self._replay(p, nd, inputs,
                                                                                      restored, epoch))

    def recover_node(self, node: int, failure: str) -> list:
        """Recover every partition recorded on ``node`` (which must be live)."""
        out = []
        for p, nd in sorted(self.factory.load(self.app).items()):
            if nd == node:
                self.recover_partition(p, failure, node)
                out.append(p)
        return out

    def _replay(self, partition: int, node: int, inputs: list, restored, epoch: int) -> StoreEntry:
        alloc = AllocationPlan.from_counts(self.state()["alloc"])
        cg = self._cubegen(alloc)
        splits = [sp for path in inputs for sp in self._splits(path, 1)]
        spec = self._spec("recover", cg.num_partitions, mappers=len(splits), merge_cache=restored is not None,
                          cache_runs=True, scheduling="replay", partitions=frozenset({partition}), epoch=epoch)
        self.engine.run_job(spec, splits, RecoverJob(cg), assignment={partition: node})
        return self.store.entry(node, self.app, partition, RUNS)

    def checkpoint(self):
        """Snapshot the cached runs now, whatever the interval."""
        st = self._check_state()
        if not self.r_specs:
            raise ConfigError("nothing to checkpoint: no recompute-class functions")
        assignment = self.factory.load(self.app)
        return self.store.checkpoint(self.app, st["epoch"], assignment,
                                     extra={"scheduling.tsv": self.factory.path(self.app)})
