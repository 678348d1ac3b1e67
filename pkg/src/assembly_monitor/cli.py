"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (task, config, files, arguments),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, load_simulation_config
from .evaluate import RangeMismatchError, evaluate
from .fusion import FormatError, load_calibrations, load_tray_regions
from .ingest import parse_address, write_log
from .pipeline import Monitor, run_live, run_replay
from .planner import PlanningError, build_state_graph, dump_nodes, enumerate_plans, to_dot, transition_matrix
from .reasoner import read_timeline, write_timeline
from .simulator import GroundTruthTimeline, Rig, random_session
from .task import TaskError, TaskParseError, load_task, serialize_task

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("assembly_monitor")


class InputError(Exception):
    """Bad user input; maps to exit code 1."""


def bundled(name: str) -> Path:
    return Path(str(resources.files("assembly_monitor") / "data" / name))


def _task(args):
    path = Path(args.task) if args.task else bundled("lego.task")
    if not path.exists():
        raise InputError(f"task file not found: {path}")
    return load_task(path)


def _rig_files(args):
    calib = Path(args.calib) if args.calib else bundled("lego.calib")
    trays = Path(args.trays) if args.trays else bundled("lego.trays")
    for p in (calib, trays):
        if not p.exists():
            raise InputError(f"file not found: {p}")
    return load_calibrations(calib), load_tray_regions(trays)


# --------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    task = _task(args)
    if args.config:
        load_config(args.config)
        load_simulation_config(args.config)
    print(f"ok: {len(task.objects)} objects, {len(task.predicate_schemas)} predicates, "
          f"{len(task.steps)} steps")
    if args.canonical:
        Path(args.canonical).write_text(serialize_task(task), encoding="utf-8")
    return EXIT_OK


def cmd_plan(args) -> int:
    task = _task(args)
    cfg = load_config(args.config)
    stay = args.stay_prob if args.stay_prob is not None else cfg.stay_prob
    if not 0 < stay < 1:
        raise InputError("--stay-prob must lie in (0, 1)")
    g = build_state_graph(task)
    tm = transition_matrix(g, stay)
    plans = enumerate_plans(g, max_plans=args.max_plans)
    capped = args.max_plans is not None and len(plans) >= args.max_plans
    print(f"states={g.n_states} edges={len(g.edges)} final={g.final_index} "
          f"plans={len(plans)}{'+' if capped else ''}")
    for p in plans[:args.show]:
        print("  " + " -> ".join(task.steps[s].name for s in p))
    if args.dot:
        Path(args.dot).write_text(to_dot(g, task), encoding="utf-8")
    if args.dump:
        Path(args.dump).write_text(dump_nodes(g), encoding="utf-8")
    if args.matrix:
        np.savetxt(args.matrix, tm.probs, fmt="%.6f", delimiter=",")
    return EXIT_OK


def cmd_simulate(args) -> int:
    task = _task(args)
    sim = load_simulation_config(
        args.config, seed=args.seed, dropout=args.dropout, confidence_jitter=args.confidence_jitter,
        position_jitter=args.position_jitter, confusion=args.confusion,
        step_frames=args.step_frames, step_jitter=args.step_jitter, frames=args.frames)
    rig = Rig.default(task)
    if args.calib:
        calibs, _ = _rig_files(args)
        rig.cameras = [calibs[c] for c in sorted(calibs)]
    g = build_state_graph(task)
    session = random_session(task, g, sim.seed, sim.dropout, sim.confidence_jitter,
                             sim.position_jitter, sim.confusion, sim.step_frames, sim.step_jitter,
                             sim.frames, rig)
    n = write_log(args.out, (m for frame in session.frames() for m in frame))
    session.timeline.write_csv(args.gt)
    plan = " -> ".join(task.steps[s].name for s in session.plan)
    print(f"frames={session.timeline.n_frames} messages={n} plan: {plan}")
    return EXIT_OK


def _monitor(args) -> Monitor:
    task = _task(args)
    cfg = load_config(args.config)
    calibs, regions = _rig_files(args)
    return Monitor(task, calibs, regions, cfg, on_warning=lambda w: print(f"warning: {w}", file=sys.stderr))


def _finish(monitor: Monitor, rows, out) -> int:
    if out:
        write_timeline(rows, out)
    print(monitor.stats.summary())
    return EXIT_OK


def cmd_monitor(args) -> int:
    if bool(args.listen) == bool(args.log):
        raise InputError("give exactly one of --listen or --log")
    if args.log and not Path(args.log).exists():
        raise InputError(f"log file not found: {args.log}")
    address = parse_address(args.listen) if args.listen else None
    monitor = _monitor(args)
    if address is None:
        rows = run_replay(monitor, args.log, 0.0)
    else:
        rows = run_live(monitor, *address, expected_connections=args.connections,
                        started=lambda a: print(f"listening on {a[0]}:{a[1]}", file=sys.stderr, flush=True))
    return _finish(monitor, rows, args.out)


def cmd_replay(args) -> int:
    if not Path(args.log).exists():
        raise InputError(f"log file not found: {args.log}")
    if args.speed < 0:
        raise InputError("--speed must be non-negative")
    monitor = _monitor(args)
    return _finish(monitor, run_replay(monitor, args.log, args.speed), args.out)


def cmd_eval(args) -> int:
    for p in (args.pred, args.gt):
        if not Path(p).exists():
            raise InputError(f"file not found: {p}")
    pred = [r[args.column] for r in read_timeline(args.pred)]
    gt = GroundTruthTimeline.read_csv(args.gt)
    res = evaluate(pred, gt, args.tol)
    print(f"precision={res.precision:.4f} recall={res.recall:.4f} tol={args.tol} frames={len(pred)}")
    if args.per_frame:
        with open(args.per_frame, "w", encoding="utf-8") as fh:
            fh.write("frame,predicted,gt,match\n")
            for f, p, g, m in res.per_frame:
                fh.write(f"{f},{p},{g},{int(m)}\n")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="assembly-monitor", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI file with [monitor] and [simulate] sections")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_task(p):
        p.add_argument("--task", help="task definition (default: bundled LEGO task)")
        return p

    def with_rig(p):
        p.add_argument("--calib", help="camera calibration file (default: bundled rig)")
        p.add_argument("--trays", help="tray region file (default: bundled rig)")
        return p

    p = with_task(sub.add_parser("validate", help="parse and check a task definition"))
    p.add_argument("--canonical", help="write the canonical serialization here")
    p.set_defaults(func=cmd_validate)

    p = with_task(sub.add_parser("plan", help="build the state graph"))
    p.add_argument("--dot", help="write the graph in DOT format")
    p.add_argument("--dump", help="write each node's predicate set")
    p.add_argument("--matrix", help="write the transition matrix as CSV")
    p.add_argument("--stay-prob", type=float)
    p.add_argument("--max-plans", type=int, default=100_000)
    p.add_argument("--show", type=int, default=0, help="print the first N plans")
    p.set_defaults(func=cmd_plan)

    p = with_rig(with_task(sub.add_parser("simulate", help="write a synthetic detection log")))
    p.add_argument("--out", required=True, help=".detlog output")
    p.add_argument("--gt", required=True, help="ground-truth CSV output")
    p.add_argument("--seed", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--confidence-jitter", type=float)
    p.add_argument("--position-jitter", type=float)
    p.add_argument("--confusion", type=float, help="look-alike confusion probability")
    p.add_argument("--step-frames", type=int)
    p.add_argument("--step-jitter", type=int)
    p.add_argument("--frames", type=int, help="fixed session length")
    p.set_defaults(func=cmd_simulate)

    p = with_rig(with_task(sub.add_parser("monitor", help="run the pipeline on a socket or log")))
    p.add_argument("--listen", help="host:port")
    p.add_argument("--connections", type=int, help="stop after this many connections close")
    p.add_argument("--log", help=".detlog input")
    p.add_argument("--out", help="timeline CSV output")
    p.set_defaults(func=cmd_monitor)

    p = with_rig(with_task(sub.add_parser("replay", help="run the pipeline on a log at recorded pace")))
    p.add_argument("--log", required=True)
    p.add_argument("--speed", type=float, default=0.0, help="pace multiplier, 0 = unpaced")
    p.add_argument("--out", help="timeline CSV output")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("eval", help="precision/recall of a timeline against ground truth")
    p.add_argument("--pred", required=True, help="timeline CSV")
    p.add_argument("--gt", required=True, help="ground-truth CSV")
    p.add_argument("--tol", type=int, default=0, help="anticipation tolerance in frames")
    p.add_argument("--column", default="state_index", choices=("state_index", "map_state"))
    p.add_argument("--per-frame", help="write per-frame matches as CSV")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse: usage errors are bad input, --help is success
        return EXIT_OK if not e.code else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TaskParseError as e:
        for d in e.diagnostics:
            print(f"{e.source}:{d.line}:{d.column}: {d.message}", file=sys.stderr)
        return EXIT_INVALID
    except (InputError, ConfigError, TaskError, FormatError, RangeMismatchError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (PlanningError, OSError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
