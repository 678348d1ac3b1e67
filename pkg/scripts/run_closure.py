"""Noise-free closure: simulate, write a log, replay it through the monitor, score.

    python3 scripts/run_closure.py --frames 10000
"""

import argparse
import tempfile
import time
from pathlib import Path

from assembly_monitor import Monitor, build_state_graph, evaluate, load_task, random_session, write_log
from assembly_monitor.cli import bundled
from assembly_monitor.fusion import load_calibrations, load_tray_regions
from assembly_monitor.pipeline import run_replay


def run(frames: int, seed: int, tol: int = 1) -> dict:
    t0 = time.perf_counter()
    task = load_task(bundled("lego.task"))
    g = build_state_graph(task)
    session = random_session(task, g, seed, frames=frames)
    with tempfile.TemporaryDirectory() as tmp:
        log = Path(tmp) / "session.detlog"
        write_log(log, (m for frame in session.frames() for m in frame))
        t_sim = time.perf_counter() - t0
        mon = Monitor(task, load_calibrations(bundled("lego.calib")),
                      load_tray_regions(bundled("lego.trays")))
        rows = run_replay(mon, log)
    res = evaluate([r["state_index"] for r in rows], session.timeline, tol)
    return {"precision": res.precision, "recall": res.recall, "frames": len(rows),
            "simulate_s": t_sim, "total_s": time.perf_counter() - t0,
            "latency_p95_ms": mon.stats.p95_latency_ms}


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tol", type=int, default=1)
    a = ap.parse_args()
    for k, v in run(a.frames, a.seed, a.tol).items():
        print(f"{k:>15}: {v:.4f}" if isinstance(v, float) else f"{k:>15}: {v}")
