"""Command line: gen-data, profile, plan, materialize, update, verify.

Reports are ``key=value`` lines on stdout (``--json``: one JSON object per
line).  Exit codes: 0 success, 1 job or verification failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import dataio, lattice, oracle
from .balancer import ProfileReport, allocate
from .config import AppConfig, coerce, load_config
from .errors import (AllocationError, ConfigError, CubeError, PlanError, ProfilingError,
                     UpdateRejected)
from .maintenance import Application
from .planner import format_plan, generate_plan

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

USAGE_ERRORS = (ConfigError, AllocationError, PlanError, UpdateRejected, ProfilingError)

# flag -> config key
_OVERRIDES = {
    "app": "app_id", "schema": "schema", "functions": "functions", "reducers": "reducers",
    "sample_rate": "sample_rate", "checkpoint_interval": "checkpoint_interval", "workers": "workers",
    "mappers": "mappers", "nodes": "nodes", "mem_budget": "mem_budget", "root": "root", "seed": "seed",
    "profile": "profile", "cuboids": "cuboids",
}


class Reporter:
    def __init__(self, as_json: bool, out=None):
        self.as_json = as_json
        self.out = out or sys.stdout

    def emit(self, **fields) -> None:
        if self.as_json:
            line = json.dumps(fields, sort_keys=False, default=str)
        else:
            line = " ".join(f"{k}={v}" for k, v in fields.items())
        print(line, file=self.out, flush=True)

    def counters(self, counters, job=None) -> None:
        from .engine.job import COUNTER_NAMES
        names = list(COUNTER_NAMES) + sorted(set(counters) - set(COUNTER_NAMES))
        for n in names:
            if job is None:
                self.emit(counter=n, value=counters.get(n, 0))
            else:
                self.emit(job=job, counter=n, value=counters.get(n, 0))

    def result(self, res) -> None:
        self.emit(job=res.spec.kind, job_id=res.job_id, partitions=len(res.assignment))
        self.counters(res.counters, job=res.spec.kind)


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override the config file)")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--app", help="application id")
    g.add_argument("--schema", help="schema file")
    g.add_argument("--functions", help="e.g. SUM(quantity),COUNT(*),MEDIAN:recompute")
    g.add_argument("--reducers", "-r", type=int)
    g.add_argument("--sample-rate", "-s", type=int)
    g.add_argument("--checkpoint-interval", help="updates between snapshots; inf disables")
    g.add_argument("--workers", type=int)
    g.add_argument("--mappers", type=int)
    g.add_argument("--nodes", type=int)
    g.add_argument("--mem-budget", help="e.g. 4MiB")
    g.add_argument("--root", help="cluster root directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--profile", help="profile report path")
    g.add_argument("--cuboids", help="partial cube, e.g. A,AB,all")
    g.add_argument("--no-combine", action="store_true", help="disable map-side combining")
    p.add_argument("--json", action="store_true", help="line-delimited JSON reports")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cubeforge", description="Data cube materialization and view maintenance")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic lineitem-like dataset")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--dims", type=int, default=4)
    g.add_argument("--cards", "--cardinality", dest="cardinality", default="100",
                   help="one value or a comma list per dimension")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--schema", help="use this schema instead of the default one")
    g.add_argument("--schema-out", help="where to write the schema (default <out>.schema)")
    g.add_argument("--delta-fraction", type=float,
                   help="also split the output into <out>.base and <out>.delta, |delta| = f/(1+f) of rows")
    g.add_argument("--json", action="store_true")
    g.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("profile", help="run the CCC job and save batch costs")
    _common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("plan", help="print the batch plan")
    _common(p)
    p.add_argument("--dims", type=int, help="dimension count (default: from the schema)")

    p = sub.add_parser("materialize", help="compute every cuboid")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--no-cache", action="store_true", help="skip run and view caching")

    p = sub.add_parser("update", help="apply a delta to the views")
    _common(p)
    p.add_argument("--delta", required=True)
    p.add_argument("--mode", default="auto",
                   choices=["auto", "recompute", "incremental", "mixed", "baseline", "mr-baseline"])
    p.add_argument("--reapply", action="store_true", help="apply a delta even if it was applied before")

    p = sub.add_parser("verify", help="compare the views with a brute-force cube")
    _common(p)
    p.add_argument("--data", action="append", help="input files (default: every input applied so far)")
    p.add_argument("--views", help="view directory (default: the application's)")
    p.add_argument("--show", type=int, default=20, help="mismatch lines to print")
    return ap


def make_config(args) -> AppConfig:
    cfg = load_config(args.config) if args.config else AppConfig()
    kw = {}
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        if isinstance(v, str) and key not in ("app_id", "schema", "root", "profile"):
            key, v = coerce(key, v)
        kw[key] = v
    if getattr(args, "no_combine", False):
        kw["combine"] = False
    return cfg.with_overrides(**kw)


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args, rep: Reporter) -> int:
    if args.schema:
        schema = dataio.Schema.load(args.schema)
    else:
        schema = dataio.default_schema(args.dims)
    cards = [int(c) for c in args.cardinality.split(",")]
    out = dataio.generate_synthetic(schema, args.rows, cards, args.seed, args.out)
    schema_out = Path(args.schema_out) if args.schema_out else out.with_name(out.name + ".schema")
    schema.save(schema_out)
    rep.emit(data=out, rows=args.rows, schema=schema_out)
    if args.delta_fraction:
        base, delta = dataio.split_delta(out, args.delta_fraction, args.seed,
                                         out.with_name(out.name + ".base"), out.with_name(out.name + ".delta"))
        k = dataio.delta_size(args.rows, args.delta_fraction)
        rep.emit(base=base, base_rows=args.rows - k, delta=delta, delta_rows=k)
    return EXIT_OK


def cmd_profile(args, rep: Reporter) -> int:
    app = Application(make_config(args))
    t0 = time.perf_counter()
    report = app.profile(args.data)
    for line in report.lines():
        rep.emit(**dict(tok.split("=", 1) for tok in line.split()))
    rep.emit(profile=app.profile_path, time_s=f"{time.perf_counter() - t0:.3f}")
    return EXIT_OK


def cmd_plan(args, rep: Reporter) -> int:
    cfg = make_config(args)
    if args.dims:
        requested = None
        if cfg.cuboids:
            requested = [lattice.parse_label(c, args.dims) for c in cfg.cuboids]
        plan = generate_plan(args.dims, requested, include_all=requested is None)
        counts = None
    else:
        app = Application(cfg)
        plan = app.plan
        counts = None
        if app.profile_path.exists():
            counts = allocate(ProfileReport.load(app.profile_path), cfg.reducers).counts
    for i, line in enumerate(format_plan(plan)):
        if counts is not None:
            line += f" reducers={counts[i]}"
        if rep.as_json:
            head, rest = line.split(": ", 1)
            rep.emit(batch=head, **dict(tok.split("=", 1) for tok in rest.split()))
        else:
            print(line, file=rep.out, flush=True)
    return EXIT_OK


def cmd_materialize(args, rep: Reporter) -> int:
    app = Application(make_config(args))
    report = app.materialize(args.data, cache=not args.no_cache)
    for res in report.results:
        rep.result(res)
    rep.emit(epoch=report.epoch, views=report.views_dir, time_s=f"{report.elapsed:.3f}")
    return EXIT_OK


def cmd_update(args, rep: Reporter) -> int:
    app = Application(make_config(args))
    report = app.update(args.delta, args.mode, reapply=args.reapply)
    if report.mode == "skipped":
        rep.emit(skipped=args.delta, reason="already applied", epoch=report.epoch)
        return EXIT_OK
    for p, node, kinds in report.recovered:
        rep.emit(recovered=p, node=node, kinds=",".join(kinds))
    for res in report.results:
        rep.result(res)
    rep.emit(mode=report.mode, epoch=report.epoch, jobs=len(report.results), views=report.views_dir,
             time_s=f"{report.elapsed:.3f}")
    return EXIT_OK


def cmd_verify(args, rep: Reporter) -> int:
    app = Application(make_config(args))
    st = app.state()
    inputs = args.data or (st["inputs"] if st else None)
    if not inputs:
        raise ConfigError("nothing to verify: no inputs given and the application has no state")
    rows = []
    for path in inputs:
        rows.extend(dataio.read_rows(path, app.schema))
    requested = sorted(app.plan.requested)
    cuboids = [lattice.from_mask(m) for m in requested] + ([lattice.ALL] if app.plan.include_all else [])
    views = Path(args.views) if args.views else app.views_dir
    functions = [s.label for s in app.specs]
    headers = sorted(views.glob("*.view"))
    if args.views and headers:
        functions = list(oracle.read_view_file(headers[0], app.n)[1])
    t0 = time.perf_counter()
    expected = oracle.brute_force_cube(rows, app.n, app.schema.measure_names, cuboids=cuboids,
                                       functions=functions)
    diff = oracle.diff_views(views, expected, [c.type for c in app.schema.dims], cuboids=cuboids)
    for line in diff[:args.show]:
        rep.emit(mismatch=json.dumps(line))
    rep.emit(rows=len(rows), cuboids=len(cuboids), mismatches=len(diff),
             time_s=f"{time.perf_counter() - t0:.3f}")
    return EXIT_OK if not diff else EXIT_FAIL


COMMANDS = {
    "gen-data": cmd_gen_data, "profile": cmd_profile, "plan": cmd_plan,
    "materialize": cmd_materialize, "update": cmd_update, "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    rep = Reporter(args.json)
    try:
        return COMMANDS[args.command](args, rep)
    except USAGE_ERRORS as exc:
        print(f"cubeforge {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CubeError, OSError) as exc:
        print(f"cubeforge {args.command}: job failed: {exc}", file=sys.stderr)
        counters = getattr(exc, "job_counters", None)
        if counters is not None:
            rep.counters(counters)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
