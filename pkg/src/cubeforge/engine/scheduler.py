"""Reducer nodes, the scheduling factory and the sticky task scheduler."""

from __future__ import annotations

import os
import random
import shutil
import threading
from pathlib import Path
from typing import Optional

from ..errors import ConfigError, SchedulingError


class Cluster:
    """A simulated set of reducer nodes, each owning a directory under ``root/nodes``.

    Liveness and over-load are explicit hooks; nothing is inferred.
    """

    def __init__(self, root, nodes: int = 4):
        if nodes < 1:
            raise ConfigError("a cluster needs at least one reducer node")
        self.root = Path(root)
        self.nodes = nodes
        self._dead: set = set()
        self._overloaded: set = set()

    def node_dir(self, node: int) -> Path:
        return self.root / "nodes" / str(node)

    def kill(self, node: int) -> None:
        self._dead.add(node)

    def revive(self, node: int) -> None:
        self._dead.discard(node)

    def mark_overloaded(self, node: int, overloaded: bool = True) -> None:
        if overloaded:
            self._overloaded.add(node)
        else:
            self._overloaded.discard(node)

    def corrupt(self, node: int) -> None:
        """Lose everything stored on ``node`` (its local store included)."""
        shutil.rmtree(self.node_dir(node), ignore_errors=True)

    def is_available(self, node: int) -> bool:
        return 0 <= node < self.nodes and node not in self._dead and node not in self._overloaded

    def live_nodes(self) -> list:
        return [n for n in range(self.nodes) if self.is_available(n)]

    def nearest_live(self, node: int) -> int:
        for step in range(1, self.nodes + 1):
            cand = (node + step) % self.nodes
            if self.is_available(cand):
                return cand
        raise SchedulingError("no live reducer node available")


class SchedulingFactory:
    """Persistent ``(application, partition) -> node`` history.

    Stored as one text file per application: ``<partition> <node>`` lines.
    """

    def __init__(self, root):
        self.dir = Path(root) / "master" / "scheduling"
        self._lock = threading.Lock()

    def path(self, app: str) -> Path:
        return self.dir / f"{app}.tsv"

    def load(self, app: str) -> dict:
        p = self.path(app)
        if not p.exists():
            return {}
        out = {}
        for line in p.read_text().splitlines():
            if line.strip():
                part, node = line.split()
                out[int(part)] = int(node)
        return out

    def save(self, app: str, mapping: dict) -> None:
        with self._lock:
            self.dir.mkdir(parents=True, exist_ok=True)
            tmp = self.path(app).with_suffix(".tmp")
            tmp.write_text("".join(f"{p} {n}\n" for p, n in sorted(mapping.items())))
            os.replace(tmp, self.path(app))

    def has(self, app: str) -> bool:
        return self.path(app).exists()


class TaskScheduler:
    """Assigns reduce partitions to nodes.

    Fresh mode spreads partitions as ``partition mod nodes`` (or randomly when
    seeded) and records the result; replay mode reuses the recorded node,
    moving a partition to the nearest live node only when its recorded node
    is dead or over-loaded.
    """

    def __init__(self, cluster: Cluster, factory: SchedulingFactory):
        self.cluster = cluster
        self.factory = factory

    def plan(self, app: str, partitions, mode: str = "fresh", history: Optional[str] = None,
             seed: Optional[int] = None, record: bool = True) -> dict:
        history = history or app
        if mode == "fresh":
            rng = random.Random(seed) if seed is not None else None
            assignment = {}
            for p in partitions:
                if rng is not None:
                    assignment[p] = rng.choice(self.cluster.live_nodes())
                else:
                    node = p % self.cluster.nodes
                    assignment[p] = node if self.cluster.is_available(node) else self.cluster.nearest_live(node)
            if record:
                self.factory.save(app, assignment)
            return assignment
        if mode != "replay":
            raise ConfigError(f"unknown scheduling mode {mode!r}")
        recorded = self.factory.load(history)
        assignment = {}
        changed = False
        for p in partitions:
            if p not in recorded:
                raise SchedulingError(f"no scheduling history for {history} partition {p}")
            node = recorded[p]
            if not self.cluster.is_available(node):
                node = self.cluster.nearest_live(node)
                changed = True
            assignment[p] = node
        if record and (changed or history != app):
            merged = dict(recorded)
            merged.update(assignment)
            self.factory.save(app, merged)
        return assignment

    def schedule(self, app: str, partition: int, mode: str = "fresh", **kw) -> int:
        if mode == "fresh":
            return self.plan(app, [partition], mode, record=False, **kw)[partition]
        return self.plan(app, [partition], mode, **kw)[partition]
