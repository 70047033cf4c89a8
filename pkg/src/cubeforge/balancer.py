"""LBCCC load balancing.

A CCC job runs CubeGen over a sample of the input with one reducer per
batch; the reduce time of reducer ``i`` is the cost ``T_i`` of batch ``i``.
Reducers are then handed out in proportion to those costs.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .errors import AllocationError, ConfigError, ProfilingError

DEFAULT_SAMPLE_RATE = 100


@dataclass(frozen=True)
class ProfileReport:
    times_ms: tuple
    sample_rate: int
    sampled: int = 0

    def __post_init__(self):
        if any(t < 0 for t in self.times_ms):
            raise ProfilingError("batch times must be non-negative")

    def __len__(self):
        return len(self.times_ms)

    def lines(self) -> list:
        out = [f"sample_rate={self.sample_rate}", f"sampled={self.sampled}"]
        out += [f"batch={i} time_ms={t:.6f}" for i, t in enumerate(self.times_ms)]
        return out

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n")

    @classmethod
    def load(cls, path) -> "ProfileReport":
        rate, sampled, times = None, 0, {}
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = dict(tok.split("=", 1) for tok in line.split())
            if "batch" in fields:
                times[int(fields["batch"])] = float(fields["time_ms"])
            elif "sample_rate" in fields:
                rate = int(fields["sample_rate"])
            elif "sampled" in fields:
                sampled = int(fields["sampled"])
        if rate is None or not times or sorted(times) != list(range(len(times))):
            raise ConfigError(f"malformed profile report {path}")
        return cls(tuple(times[i] for i in range(len(times))), rate, sampled)


@dataclass(frozen=True)
class AllocationPlan:
    counts: tuple    # R_i
    offsets: tuple   # S_i

    @property
    def total(self) -> int:
        return sum(self.counts)

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "AllocationPlan":
        offsets, s = [], 0
        for r in counts:
            if r < 1:
                raise AllocationError("every batch needs at least one reducer")
            offsets.append(s)
            s += r
        return cls(tuple(counts), tuple(offsets))

    @classmethod
    def uniform(cls, b: int) -> "AllocationPlan":
        return cls.from_counts([1] * b)

    def range_of(self, i: int) -> range:
        return range(self.offsets[i], self.offsets[i] + self.counts[i])


def allocate(report, r: int) -> AllocationPlan:
    """``R_i = T_i * r / sum(T)`` rounded by largest remainder, each at least 1.

    ``report`` is a ProfileReport or a plain sequence of times.
    """
    times = report.times_ms if isinstance(report, ProfileReport) else tuple(report)
    b = len(times)
    if b == 0:
        raise AllocationError("nothing to allocate: the plan has no batches")
    if r < b:
        raise AllocationError(f"{r} reducers for {b} batches: at least one reducer per batch")
    fr = [Fraction(t) for t in times]
    total = sum(fr)
    if total == 0:
        fr, total = [Fraction(1)] * b, Fraction(b)
    quota = [t * r / total for t in fr]
    counts = [max(1, int(q)) for q in quota]
    while sum(counts) > r:
        # take back from the batch that is most over its quota
        i = min((i for i in range(b) if counts[i] > 1), key=lambda i: (quota[i] - counts[i], i))
        counts[i] -= 1
    while sum(counts) < r:
        i = max(range(b), key=lambda i: (quota[i] - counts[i], -i))
        counts[i] += 1
    return AllocationPlan.from_counts(counts)


# -- sampling ---------------------------------------------------------------------

class Sampled:
    """Keeps one record out of every ``s`` read from a split."""

    def __init__(self, split: Iterable, s: int):
        self.split = split
        self.s = s

    @property
    def bad_records(self) -> int:
        return getattr(self.split, "bad_records", 0)

    def __iter__(self):
        s = self.s
        for i, rec in enumerate(self.split):
            if i % s == s - 1:
                yield rec


Sampler = Callable[[Iterable, int], Iterable]


def every_nth(split: Iterable, s: int) -> Iterable:
    return Sampled(split, s)


def run_ccc(engine, splits: Sequence, plan, specs, n_dims: int, *, sample_rate: int = DEFAULT_SAMPLE_RATE,
            app_id: str = "ccc", combine: bool = True, sampler: Optional[Sampler] = None,
            repeats: int = 1, workers: int = 1, mem_budget: Optional[int] = None) -> ProfileReport:
    """Profile every batch on a 1-in-``sample_rate`` sample with one reducer each."""
    from .cubing import CubeGenJob
    from .engine.job import DEFAULT_MEM_BUDGET, JobSpec

    if sample_rate < 1:
        raise ConfigError("sample rate must be >= 1")
    if len(plan.batches) == 0:
        raise ProfilingError("the plan has no batches to profile")
    sampler = sampler or every_nth
    alloc = AllocationPlan.uniform(len(plan.batches))
    runs = []
    sampled = 0
    for _ in range(max(1, repeats)):
        job = CubeGenJob(plan, alloc, specs, n_dims, include_all=False, combine=combine)
        spec = JobSpec(kind="ccc", app_id=app_id, num_partitions=job.num_partitions,
                       mappers=len(splits), workers=workers,
                       mem_budget=mem_budget or DEFAULT_MEM_BUDGET)
        result = engine.run_job(spec, [sampler(sp, sample_rate) for sp in splits], job)
        sampled = result.counters["input_tuples_read"]
        if sampled == 0:
            raise ProfilingError(f"the 1-in-{sample_rate} sample is empty; use a smaller sample rate")
        runs.append([result.reduce_times[i] * 1000.0 for i in range(len(plan.batches))])
    times = tuple(statistics.median(col) for col in zip(*runs))
    return ProfileReport(times, sample_rate, sampled)
