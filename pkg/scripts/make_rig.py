"""Regenerate the bundled camera calibration and tray-region files.

    python3 scripts/make_rig.py [--cameras 3] [--out src/assembly_monitor/data]
"""

import argparse
from pathlib import Path

from assembly_monitor.cli import bundled
from assembly_monitor.fusion import save_calibrations, save_tray_regions
from assembly_monitor.simulator import Rig
from assembly_monitor.task import load_task

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--cameras", type=int, default=3)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/assembly_monitor/data"))
    a = ap.parse_args()
    rig = Rig.default(load_task(bundled("lego.task")), n_cameras=a.cameras)
    out = Path(a.out)
    save_calibrations(rig.cameras, out / "lego.calib")
    save_tray_regions(rig.regions(), out / "lego.trays")
    print(f"wrote {out / 'lego.calib'} and {out / 'lego.trays'}")
