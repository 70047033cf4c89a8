"""Single-machine MapReduce with the Merge and Refresh extensions."""

from .extsort import external_sort, merge_runs, read_run, write_run
from .job import (COUNTER_NAMES, Engine, FaultInjector, JobResult, JobSpec, MapReduceJob,
                  TaskContext)
from .scheduler import Cluster, SchedulingFactory, TaskScheduler

__all__ = [
    "COUNTER_NAMES", "Cluster", "Engine", "FaultInjector", "JobResult", "JobSpec", "MapReduceJob",
    "SchedulingFactory", "TaskContext", "TaskScheduler", "external_sort", "merge_runs", "read_run",
    "write_run",
]
