"""``twophase`` command line: run a config, sweep a grid of overrides, run the
verification suite.

Exit status: 0 success, 1 check failure, 2 config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional

from . import config as C
from . import diagnostics as dg
from . import verify
from .optim import DivergenceError, run_schedule
from .streams import derive_seed

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

SWEEP_COLUMNS = ["point", "status", "steps", "final_train_loss", "final_pop_loss",
                 "final_theta_err", "escape_step", "phase_boundary_step", "error"]


def workers_from_env() -> int:
    try:
        return max(1, int(os.environ.get("TWOPHASE_WORKERS", "1")))
    except ValueError:
        return 1


def resolve_config(name) -> Path:
    """A path on disk, or the name of a bundled config such as ``fig2.cfg``."""
    path = Path(name)
    if path.exists():
        return path
    bundled = resources.files("twophase.configs").joinpath(path.name)
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"no config file {name!r} and no bundled config of that name")


def execute(cfg: C.RunConfig, out_dir: Path, log=None):
    """Run one config, writing its outputs under ``out_dir``.

    Returns ``(summary_dict, exit_status)``.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    built = C.build_run(cfg)
    sinks = []
    if cfg.trace:
        sinks.append(dg.CSVTraceSink(out_dir / cfg.trace, include_inner=cfg.include_inner))
    if cfg.neuron_dump:
        sinks.append(dg.NeuronDumpSink(out_dir / "neurons.csv"))
    telescope = dg.TelescopeMonitor(built.params)
    a_bound = dg.ABoundMonitor(built.params)
    status = EXIT_OK
    try:
        summary = run_schedule(built.params, built.teacher, built.dataset, built.segments,
                               sinks=sinks, rng=built.rng, markov_state=built.markov_state,
                               monitors=(telescope, a_bound))
    except DivergenceError as err:
        summary = err.summary
        status = EXIT_DIVERGED
        if log:
            log(f"diverged: {err}")
    finally:
        for s in sinks:
            s.close()
    out = summary.to_dict()
    out["experiment"] = cfg.name
    out["a_bound_monitor"] = a_bound.report()
    if telescope.valid:
        out["telescope_max_residual"] = float(telescope.residuals(built.params).max())
    if cfg.summary:
        (out_dir / cfg.summary).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out, status


def cmd_run(args) -> int:
    try:
        cfg = C.load_config(resolve_config(args.config))
    except (C.ConfigError, FileNotFoundError) as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    for w in C.check_conditions(cfg):
        print(f"warning: {w}", file=sys.stderr)
    out_dir = Path(args.out) if args.out else Path("runs") / cfg.name
    summary, status = execute(cfg, out_dir, log=lambda s: print(s, file=sys.stderr))
    report = dict(summary["phase_report"], steps=summary["steps"],
                  final_pop_loss=summary["final_pop_loss"])
    report.pop("escape_step_per_neuron")
    report["escape_step"] = summary["escape_step"]
    print(json.dumps(report, indent=2, sort_keys=True))
    return status


def parse_grid(items: List[str]):
    grid = []
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"grid entry {item!r} is not key=v1,v2,...")
        key, vals = item.split("=", 1)
        values = [v.strip() for v in vals.split(",") if v.strip()]
        if not values:
            raise ValueError(f"grid entry {item!r} has no values")
        grid.append((key.strip(), values))
    if not grid:
        raise ValueError("empty grid: pass at least one --grid key=v1,v2")
    return grid


def _sweep_point(job):
    index, cfg_text, overrides, out_dir = job
    cfg = C.parse_config(cfg_text)
    row = {"point": index, **overrides}
    try:
        cfg = C.apply_overrides(cfg, overrides)
        if "run.seed" not in overrides:
            cfg.run_seed = derive_seed(cfg.run_seed, index)
        summary, status = execute(cfg, Path(out_dir) / f"point_{index:03d}")
        row.update({k: summary.get(k) for k in SWEEP_COLUMNS[2:8]})
        row["status"] = "diverged" if status == EXIT_DIVERGED else "ok"
        row["error"] = summary.get("divergence_reason") or ""
    except Exception as err:  # recorded per point; the sweep goes on
        row.update(status="error", error=str(err).replace("\n", " "))
    return row


def cmd_sweep(args, parser) -> int:
    try:
        grid = parse_grid(args.grid)
        cfg = C.load_config(resolve_config(args.config))
    except (ValueError, FileNotFoundError) as err:
        print(err, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    keys = [k for k, _ in grid]
    out_dir = Path(args.out) if args.out else Path("runs") / f"{cfg.name}_sweep"
    out_dir.mkdir(parents=True, exist_ok=True)
    text = C.serialize_config(cfg)
    jobs = [(i, text, dict(zip(keys, combo)), str(out_dir))
            for i, combo in enumerate(itertools.product(*(v for _, v in grid)))]
    workers = workers_from_env()
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    columns = ["point"] + keys + SWEEP_COLUMNS[1:]
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    bad = [r for r in rows if r["status"] != "ok"]
    for r in bad:
        print(f"point {r['point']}: {r['status']} {r['error']}", file=sys.stderr)
    print(f"{len(rows)} points, {len(bad)} failed; summaries in {out_dir / 'sweep.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    reports = verify.run_suite(args.suite, seed=args.seed, workers=workers_from_env())
    text = verify.reports_to_json(reports)
    print(verify.summary_table(reports))
    if args.json:
        Path(args.json).write_text(text + "\n")
    else:
        print(text)
    return EXIT_CHECK if verify.suite_failed(reports) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twophase", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one config")
    p_run.add_argument("config", help="config path or bundled name (fig2.cfg, ...)")
    p_run.add_argument("--out", help="output directory (default runs/<experiment name>)")
    p_sweep = sub.add_parser("sweep", help="Cartesian sweep over config overrides")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                         help="config key and comma-separated values; repeatable")
    p_sweep.add_argument("--out")
    p_ver = sub.add_parser("verify", help="run the lemma verification suite")
    p_ver.add_argument("suite", nargs="?", default="quick", choices=("quick", "full"))
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--json", help="write the JSON report array here instead of stdout")
    parser.set_defaults(sweep_parser=p_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "sweep":
        return cmd_sweep(args, args.sweep_parser)
    return cmd_verify(args)


if __name__ == "__main__":
    sys.exit(main())
