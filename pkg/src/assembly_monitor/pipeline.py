"""Bundles in, timeline out: fusion followed by state estimation."""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .config import MonitorConfig
from .fusion import CameraCalibration, FusionPipeline, ObservationLayout, TrayRegion
from .ingest import FrameBundle, IngestServer, replay
from .planner import build_state_graph, transition_matrix
from .reasoner import DeviationWarning, StateEstimator
from .task import TaskDefinition

log = logging.getLogger(__name__)


@dataclass
class MonitorStats:
    frames: int = 0
    partial_bundles: int = 0
    failed_frames: int = 0
    warnings: int = 0
    latencies: list[float] = field(default_factory=list, repr=False)

    @property
    def mean_latency_ms(self) -> float:
        return 1e3 * float(np.mean(self.latencies)) if self.latencies else 0.0

    @property
    def p95_latency_ms(self) -> float:
        return 1e3 * float(np.percentile(self.latencies, 95)) if self.latencies else 0.0

    def summary(self) -> str:
        return (f"frames={self.frames} partial={self.partial_bundles} failed={self.failed_frames} "
                f"warnings={self.warnings} latency_mean_ms={self.mean_latency_ms:.2f} "
                f"latency_p95_ms={self.p95_latency_ms:.2f}")


class Monitor:
    """Stateful per-bundle processing; a frame that fails in fusion reuses the last observation."""

    def __init__(self, task: TaskDefinition, calibrations: Mapping[str, CameraCalibration],
                 regions: Sequence[TrayRegion], config: MonitorConfig = MonitorConfig(),
                 on_warning: Callable[[DeviationWarning], None] | None = None):
        self.task = task
        self.config = config
        self.graph = build_state_graph(task)
        self.tm = transition_matrix(self.graph, config.stay_prob)
        self.layout = ObservationLayout.for_task(task)
        self.fusion = FusionPipeline(self.layout, calibrations, regions, radius=config.radius,
                                     iou_thresh=config.iou_thresh, alpha_up=config.alpha_up,
                                     alpha_down=config.alpha_down, smoothing=config.smoothing)
        self.estimator = StateEstimator(
            self.graph, task, self.tm, sigma=config.sigma, norm=config.norm,
            deviation_threshold=config.deviation_threshold,
            deviation_window=config.deviation_window, trellis_window=config.trellis_window,
            uniform_prior=config.uniform_prior, layout=self.layout)
        self.on_warning = on_warning
        self.stats = MonitorStats()
        self._last_y = self.layout.zeros()

    @property
    def cameras(self) -> list[str]:
        return sorted(self.fusion.calibrations)

    def process(self, bundle: FrameBundle) -> None:
        t0 = time.perf_counter()
        try:
            y = self.fusion(bundle.detections())
        except Exception as e:  # keep the timeline contiguous
            self.stats.failed_frames += 1
            log.error("frame %d: fusion failed: %s", self.stats.frames, e)
            y = self._last_y
        self._last_y = y
        res = self.estimator.update(y, bundle.bundle_time)
        self.stats.latencies.append(time.perf_counter() - t0)
        self.stats.frames += 1
        self.stats.partial_bundles += bundle.partial
        if res.warning is not None:
            self.stats.warnings += 1
            if self.on_warning is not None:
                self.on_warning(res.warning)

    def run(self, bundles: Iterable[FrameBundle]) -> list[dict]:
        for b in bundles:
            self.process(b)
        return self.timeline()

    def timeline(self) -> list[dict]:
        return self.estimator.timeline_rows()


def run_replay(monitor: Monitor, log_path: str | Path, speed: float = 0.0) -> list[dict]:
    return monitor.run(replay(log_path, monitor.cameras, speed, monitor.config.sync_window_us))


def run_live(monitor: Monitor, host: str, port: int, expected_connections: int | None = None,
             stall_timeout: float = 2.0,
             started: Callable[[tuple[str, int]], None] | None = None) -> list[dict]:
    """Serve until ``expected_connections`` connections have closed (forever if None)."""
    server = IngestServer(monitor.cameras, monitor.process, monitor.config.sync_window_us,
                          stall_timeout=stall_timeout, expected_connections=expected_connections)
    asyncio.run(server.serve(host, port, started))
    return monitor.timeline()
