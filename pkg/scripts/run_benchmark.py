"""Calibrated-noise benchmark on the LEGO task.

Every seed draws a plan, simulates detections under the given noise and
runs fusion plus decoding in memory. Prints per-seed and mean precision and recall.

    python3 scripts/run_benchmark.py --seeds 20 --dropout 0.2 --confidence-jitter 0.1 --confusion 0.1
"""

import argparse

import numpy as np

from assembly_monitor import Monitor, build_state_graph, evaluate, load_task, random_session
from assembly_monitor.cli import bundled
from assembly_monitor.config import MonitorConfig
from assembly_monitor.fusion import load_calibrations, load_tray_regions
from assembly_monitor.ingest import FrameBundle


def run_seed(task, g, seed: int, tol: int = 0, config: MonitorConfig = MonitorConfig(), **noise):
    session = random_session(task, g, seed, **noise)
    mon = Monitor(task, load_calibrations(bundled("lego.calib")),
                  load_tray_regions(bundled("lego.trays")), config)
    for msgs in session.frames():
        mon.process(FrameBundle(msgs[0].timestamp, {m.camera_id: m for m in msgs}))
    rows = mon.timeline()
    return evaluate([r["state_index"] for r in rows], session.timeline, tol)


def benchmark(seeds, tol: int = 0, config: MonitorConfig = MonitorConfig(), **noise):
    task = load_task(bundled("lego.task"))
    g = build_state_graph(task)
    return [run_seed(task, g, s, tol, config, **noise) for s in seeds]


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--dropout", type=float, default=0.2)
    ap.add_argument("--confidence-jitter", type=float, default=0.1)
    ap.add_argument("--position-jitter", type=float, default=0.0)
    ap.add_argument("--confusion", type=float, default=0.1)
    ap.add_argument("--tol", type=int, default=0)
    a = ap.parse_args()
    results = benchmark(range(a.seeds), a.tol, dropout=a.dropout,
                        confidence_jitter=a.confidence_jitter,
                        position_jitter=a.position_jitter, confusion=a.confusion)
    for s, r in enumerate(results):
        print(f"seed {s:3d}  precision {r.precision:.3f}  recall {r.recall:.3f}")
    print(f"mean       precision {np.mean([r.precision for r in results]):.3f}  "
          f"recall {np.mean([r.recall for r in results]):.3f}")
