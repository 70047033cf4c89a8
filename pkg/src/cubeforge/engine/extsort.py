"""Bounded-memory sorting into sorted run files, and k-way merging of runs."""

from __future__ import annotations

import errno
import heapq
import os
from itertools import groupby
from operator import itemgetter
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

from ..errors import JobAbort
from .codec import encode_record, iter_records

_key = itemgetter(0)

Combiner = Callable[[tuple, list], list]


def estimate_size(key: tuple, value: tuple) -> int:
    """Approximate in-memory footprint of one buffered record."""
    return 96 + 32 * (len(key) + len(value))


class RunWriter:
    """Append-only writer for one sorted-run file."""

    def __init__(self, path, floats: bool = False):
        self.path = Path(path)
        self.floats = floats  # hint: records usually carry float fields
        self.records = 0
        self.bytes = 0
        self._fh = open(self.path, "wb", buffering=1 << 20)
        self._chunks: list = []
        self._pending = 0

    def write(self, key: tuple, value: tuple) -> None:
        data = encode_record(key, value, self.floats)
        self._chunks.append(data)
        self._pending += len(data)
        self.records += 1
        if self._pending >= 1 << 20:
            self._flush()

    def write_all(self, records: Iterable[tuple]) -> None:
        for key, value in records:
            self.write(key, value)

    def _flush(self) -> None:
        if self._chunks:
            self._fh.write(b"".join(self._chunks))
            self.bytes += self._pending
            self._chunks.clear()
            self._pending = 0

    def close(self) -> None:
        if self._fh.closed:
            return
        try:
            self._flush()
        finally:
            self._fh.close()

    def abort(self) -> None:
        try:
            self._fh.close()
        finally:
            self.path.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


def read_run(path) -> Iterator[tuple]:
    with open(path, "rb") as fh:
        yield from iter_records(fh)


def merge_runs(runs: Sequence) -> Iterator[tuple]:
    """K-way merge of sorted runs (paths or iterables); stable across inputs."""
    iters = [read_run(r) if isinstance(r, (str, os.PathLike)) else iter(r) for r in runs]
    if not iters:
        return iter(())
    if len(iters) == 1:
        return iters[0]
    return heapq.merge(*iters, key=_key)


def combine_sorted(records: Iterable[tuple], combine: Combiner) -> Iterator[tuple]:
    for key, group in groupby(records, key=_key):
        values = [v for _, v in group]
        if len(values) == 1:
            yield key, values[0]
        else:
            for v in combine(key, values):
                yield key, v


def write_run(path, records: Iterable[tuple]) -> RunWriter:
    """Write records to ``path``; translate disk-full into a job abort."""
    try:
        with RunWriter(path) as w:
            w.write_all(records)
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise JobAbort(f"disk full while writing {path}") from exc
        raise
    return w


def external_sort(records: Iterable[tuple], budget: int, workdir, prefix: str = "spill",
                  combine: Optional[Combiner] = None) -> list:
    """Sort ``(key, value)`` records into spill files holding at most ``budget`` bytes each.

    Returns the spill paths; ``merge_runs`` over them is totally ordered.
    An empty input produces no files.  On failure every file created so far
    is removed.
    """
    if budget <= 0:
        raise ValueError("memory budget must be positive")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    paths: list = []
    buf: list = []
    used = 0

    def spill() -> None:
        buf.sort(key=_key)
        path = workdir / f"{prefix}-{len(paths):04d}.run"
        paths.append(path)
        out = combine_sorted(buf, combine) if combine else buf
        write_run(path, out)
        buf.clear()

    try:
        for rec in records:
            buf.append(rec)
            used += estimate_size(*rec)
            if used >= budget:
                spill()
                used = 0
        if buf:
            spill()
    except BaseException:
        for p in paths:
            Path(p).unlink(missing_ok=True)
        raise
    return paths
