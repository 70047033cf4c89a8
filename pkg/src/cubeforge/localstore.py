"""Per-reducer persistent cache, lazy checkpoints and recovery.

Layout under the cluster root::

    nodes/<node>/<app>/<partition>/      local store of one partition
        runs.entry                       registered sorted reduce-input runs
        view.entry                       cached view state, one file per cuboid
    durable/<app>/                       stands in for the DFS
        vstate/p<partition>/             durable copy of cached view state
        snapshots/epoch-<e>/MANIFEST     latest checkpoint only
        inputs/epoch-<e>.tsv             inputs applied after the latest checkpoint
"""

from __future__ import annotations

import hashlib
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import ChecksumMismatch, RecoveryError, UnrecoverableError
from .engine.extsort import write_run

RUNS = "sorted-runs"
VIEW = "view"
_ENTRY_FILE = {RUNS: "runs.entry", VIEW: "view.entry"}

FAILURE_KINDS = ("task-restart", "node-restart", "node-corrupt")


@dataclass
class StoreEntry:
    app: str
    partition: int
    kind: str
    files: list
    epoch: int
    node: Optional[int] = None


@dataclass
class CheckpointManifest:
    app: str
    epoch: int
    files: dict = field(default_factory=dict)  # relative path -> sha256
    path: Optional[Path] = None

    def partition_files(self, partition: int) -> list:
        prefix = f"p{partition}/"
        return sorted(f for f in self.files if f.startswith(prefix))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class LocalStore:
    def __init__(self, root):
        self.root = Path(root)
        self.bytes_copied = 0  # registration must never move bytes

    # -- paths -------------------------------------------------------------
    def partition_dir(self, node: int, app: str, partition: int) -> Path:
        return self.root / "nodes" / str(node) / app / str(partition)

    def durable_dir(self, app: str) -> Path:
        return self.root / "durable" / app

    def vstate_dir(self, app: str, partition: int) -> Path:
        return self.durable_dir(app) / "vstate" / f"p{partition}"

    def snapshot_root(self, app: str) -> Path:
        return self.durable_dir(app) / "snapshots"

    # -- entries -----------------------------------------------------------
    def entry(self, node: int, app: str, partition: int, kind: str) -> Optional[StoreEntry]:
        pdir = self.partition_dir(node, app, partition)
        path = pdir / _ENTRY_FILE[kind]
        if not path.exists():
            return None
        meta, files = {}, []
        for line in path.read_text().splitlines():
            k, _, v = line.partition("=")
            if k == "file":
                files.append(pdir / v)
            else:
                meta[k] = v
        return StoreEntry(app=meta["app"], partition=int(meta["partition"]), kind=meta["kind"],
                          files=files, epoch=int(meta["epoch"]), node=node)

    def _write_entry(self, node: int, app: str, partition: int, kind: str, files: Iterable,
                     epoch: int) -> StoreEntry:
        pdir = self.partition_dir(node, app, partition)
        rel = []
        for f in files:
            f = Path(f)
            if not f.exists():
                raise FileNotFoundError(f"cannot register missing file {f}")
            try:
                rel.append(f.relative_to(pdir).as_posix())
            except ValueError:
                raise ValueError(f"{f} is not in the local store of partition {partition}") from None
        old = self.entry(node, app, partition, kind)
        lines = [f"app={app}", f"partition={partition}", f"kind={kind}", f"epoch={epoch}"]
        lines += [f"file={r}" for r in rel]
        _atomic_write(pdir / _ENTRY_FILE[kind], "\n".join(lines) + "\n")
        new = self.entry(node, app, partition, kind)
        if old is not None:
            keep = set(new.files)
            for f in old.files:
                if f not in keep:
                    f.unlink(missing_ok=True)
            _prune_empty_dirs(pdir)
        return new

    def register_runs(self, node: int, app: str, partition: int, files: Iterable, epoch: int) -> StoreEntry:
        """Record completed sorted runs by location; no bytes are copied."""
        return self._write_entry(node, app, partition, RUNS, files, epoch)

    def register_view(self, node: int, app: str, partition: int, files: Iterable, epoch: int) -> StoreEntry:
        return self._write_entry(node, app, partition, VIEW, files, epoch)

    def cache_view(self, node: int, app: str, partition: int, cells: dict, epoch: int) -> StoreEntry:
        """Store view state, one sorted file per cuboid number (``cells`` maps number -> records)."""
        vdir = self.partition_dir(node, app, partition) / f"view-e{epoch}"
        vdir.mkdir(parents=True, exist_ok=True)
        files = []
        for number in sorted(cells):
            path = vdir / f"cuboid-{number}.run"
            write_run(path, sorted(cells[number], key=lambda r: r[0]))
            files.append(path)
        return self.register_view(node, app, partition, files, epoch)

    def drop(self, node: int, app: str, partition: int, kind: str) -> None:
        ent = self.entry(node, app, partition, kind)
        if ent is None:
            return
        (self.partition_dir(node, app, partition) / _ENTRY_FILE[kind]).unlink()
        for f in ent.files:
            f.unlink(missing_ok=True)

    # -- durable view state --------------------------------------------------
    def publish_view_state(self, app: str, partition: int, entry: StoreEntry) -> None:
        """Copy a partition's cached view state to the durable area."""
        dest = self.vstate_dir(app, partition)
        tmp = dest.with_name(dest.name + ".tmp")
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir(parents=True)
        for f in entry.files:
            shutil.copyfile(f, tmp / f.name)
        (tmp / "EPOCH").write_text(f"{entry.epoch}\n")
        shutil.rmtree(dest, ignore_errors=True)
        os.replace(tmp, dest)

    def restore_view_state(self, node: int, app: str, partition: int) -> StoreEntry:
        src = self.vstate_dir(app, partition)
        if not (src / "EPOCH").exists():
            raise UnrecoverableError(f"no durable view state for {app} partition {partition}")
        epoch = int((src / "EPOCH").read_text())
        vdir = self.partition_dir(node, app, partition) / f"view-e{epoch}"
        shutil.rmtree(vdir, ignore_errors=True)
        vdir.mkdir(parents=True)
        files = []
        for f in sorted(src.glob("*.run")):
            shutil.copyfile(f, vdir / f.name)
            files.append(vdir / f.name)
        return self.register_view(node, app, partition, files, epoch)

    # -- inputs retained for replay -------------------------------------------
    def inputs_dir(self, app: str) -> Path:
        return self.durable_dir(app) / "inputs"

    def log_input(self, app: str, epoch: int, path) -> Path:
        dest = self.inputs_dir(app) / f"epoch-{epoch}.tsv"
        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp = dest.with_name(dest.name + ".tmp")
        shutil.copyfile(path, tmp)
        os.replace(tmp, dest)
        return dest

    def retained_inputs(self, app: str) -> list:
        d = self.inputs_dir(app)
        if not d.exists():
            return []
        out = []
        for f in d.glob("epoch-*.tsv"):
            out.append((int(f.stem.split("-")[1]), f))
        return sorted(out)

    # -- checkpoints -----------------------------------------------------------
    def checkpoint(self, app: str, epoch: int, locations: dict, extra: Optional[dict] = None) -> CheckpointManifest:
        """Snapshot every partition's registered runs to the durable area.

        ``locations`` maps partition -> node.  ``extra`` maps a snapshot-relative
        name to a file to include verbatim (e.g. the scheduling history).
        Only the newest snapshot and the inputs after it are retained.
        """
        sroot = self.snapshot_root(app)
        sdir = sroot / f"epoch-{epoch}"
        shutil.rmtree(sdir, ignore_errors=True)
        sdir.mkdir(parents=True)
        files = {}
        for partition, node in sorted(locations.items()):
            ent = self.entry(node, app, partition, RUNS)
            if ent is None:
                raise RecoveryError(f"partition {partition} has no runs to checkpoint")
            pdir = sdir / f"p{partition}"
            pdir.mkdir()
            for i, f in enumerate(ent.files):
                rel = f"p{partition}/run-{i:04d}.run"
                shutil.copyfile(f, sdir / rel)
                files[rel] = sha256_file(sdir / rel)
        for name, src in (extra or {}).items():
            shutil.copyfile(src, sdir / name)
            files[name] = sha256_file(sdir / name)
        lines = [f"epoch={epoch}"] + [f"file={rel} sha256={h}" for rel, h in sorted(files.items())]
        _atomic_write(sdir / "MANIFEST", "\n".join(lines) + "\n")
        for old in sroot.glob("epoch-*"):
            if old != sdir:
                shutil.rmtree(old, ignore_errors=True)
        for e, f in self.retained_inputs(app):
            if e <= epoch:
                f.unlink()
        return CheckpointManifest(app=app, epoch=epoch, files=files, path=sdir)

    def latest_snapshot(self, app: str) -> Optional[CheckpointManifest]:
        sroot = self.snapshot_root(app)
        found = [d for d in sroot.glob("epoch-*") if (d / "MANIFEST").exists()]
        if not found:
            return None
        sdir = max(found, key=lambda d: int(d.name.split("-")[1]))
        epoch, files = None, {}
        for line in (sdir / "MANIFEST").read_text().splitlines():
            if line.startswith("epoch="):
                epoch = int(line.split("=", 1)[1])
            elif line.startswith("file="):
                rel, digest = line[len("file="):].split(" sha256=")
                files[rel] = digest
        return CheckpointManifest(app=app, epoch=epoch, files=files, path=sdir)

    def restore_snapshot(self, manifest: CheckpointManifest, node: int, partition: int) -> StoreEntry:
        pdir = self.partition_dir(node, manifest.app, partition)
        dest = pdir / f"snapshot-e{manifest.epoch}"
        shutil.rmtree(dest, ignore_errors=True)
        dest.mkdir(parents=True)
        restored = []
        for rel in manifest.partition_files(partition):
            src = manifest.path / rel
            if not src.exists() or sha256_file(src) != manifest.files[rel]:
                shutil.rmtree(dest, ignore_errors=True)
                raise ChecksumMismatch(
                    f"snapshot file {rel} of {manifest.app} failed verification; full recompute required")
            target = dest / Path(rel).name
            shutil.copyfile(src, target)
            restored.append(target)
        return self.register_runs(node, manifest.app, partition, restored, manifest.epoch)


def _prune_empty_dirs(pdir: Path) -> None:
    for d in pdir.iterdir():
        if d.is_dir():
            try:
                d.rmdir()
            except OSError:
                pass


Replay = Callable[[int, int, list, Optional[StoreEntry]], StoreEntry]


def recover(store: LocalStore, app: str, partition: int, failure: str, node: int, *,
            kinds: Iterable[str], epoch: int, replay: Optional[Replay] = None) -> dict:
    """Bring the local store of ``partition`` on ``node`` back to ``epoch``.

    Restart failures leave persisted data untouched.  For a corrupted node,
    cached views come back from the durable view state; cached runs come back
    from the latest snapshot plus a replay of the inputs applied after it
    (``replay(partition, node, inputs, restored_entry)`` appends them).
    """
    if failure not in FAILURE_KINDS:
        raise ValueError(f"unknown failure kind {failure!r}")
    kinds = list(kinds)
    out = {}
    if failure in ("task-restart", "node-restart"):
        for kind in kinds:
            ent = store.entry(node, app, partition, kind)
            if ent is None:
                raise RecoveryError(f"{kind} entry of partition {partition} missing after {failure}")
            out[kind] = ent
        return out

    if VIEW in kinds:
        out[VIEW] = store.restore_view_state(node, app, partition)
    if RUNS in kinds:
        if replay is None:
            raise RecoveryError("recomputation recovery needs a replay function")
        manifest = store.latest_snapshot(app)
        restored = None
        base_epoch = -1
        if manifest is not None:
            restored = store.restore_snapshot(manifest, node, partition)
            base_epoch = manifest.epoch
        pending = [(e, f) for e, f in store.retained_inputs(app) if base_epoch < e <= epoch]
        expected = list(range(base_epoch + 1, epoch + 1))
        if [e for e, _ in pending] != expected:
            raise UnrecoverableError(
                f"{app} partition {partition}: no snapshot covers epochs {expected} and their "
                "inputs are not retained; full rebuild required")
        if pending:
            out[RUNS] = replay(partition, node, [f for _, f in pending], restored)
        else:
            out[RUNS] = restored
    return out
