"""Synthetic assembly sessions: sampled plans, ground truth and noisy detection streams.

The world is a table plane (z = 0) holding axis-aligned tray rectangles.
Each element is a small box proxy sampled as a point set; an element sits at
a fixed slot inside whichever tray the true configuration puts it in.
Detections are produced by projecting the proxy points into each camera.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .fusion import (DEFAULT_DEPTH_STRIDE, CameraCalibration, Detection2D, ObservationLayout,
                     TrayRegion)
from .ingest import DetectionMessage
from .planner import StateGraph, enumerate_plans, plan_states
from .reasoner import expected_matrix
from .task import TaskDefinition

DEFAULT_STEP_FRAMES = 90
DEFAULT_STEP_JITTER = 30
FRAME_PERIOD_US = 33_333
SESSION_START_US = 1_700_000_000_000_000
PLAN_ENUMERATION_CAP = 10_000


@dataclass(frozen=True)
class NoiseModel:
    """Detector imperfections.

    ``position_jitter`` bounds a rigid per-detection offset of the element's
    point set (uniform in a ball of that radius), standing in for depth and
    registration error.
    """

    dropout_prob: float = 0.0
    confusion: np.ndarray | None = None  # row-stochastic; None = identity
    confidence_jitter: float = 0.0
    position_jitter: float = 0.0
    base_confidence: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.confidence_jitter < 0 or self.position_jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.confusion is not None:
            c = np.asarray(self.confusion, dtype=float)
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise ValueError("confusion must be square")
            if np.any(c < 0) or not np.allclose(c.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError("confusion rows must be probability vectors")
            object.__setattr__(self, "confusion", c)

    @staticmethod
    def similar_confusion(task: TaskDefinition, p: float) -> np.ndarray:
        """Confusion concentrated on look-alike pairs (``E4`` vs ``E4'``)."""
        elems = task.elements
        idx = {e: i for i, e in enumerate(elems)}
        c = np.eye(len(elems))
        for e, i in idx.items():
            twin = e.rstrip("'") if e.endswith("'") else e + "'"
            j = idx.get(twin)
            if j is not None:
                c[i, i] = 1.0 - p
                c[i, j] = p
        return c


@dataclass(frozen=True)
class Segment:
    start: int
    stop: int  # exclusive
    state_index: int
    step_id: int | None


@dataclass(frozen=True)
class GroundTruthTimeline:
    entries: tuple[Segment, ...]
    timestamps: tuple[int, ...] = ()

    def __post_init__(self):
        pos = 0
        for s in self.entries:
            if s.start != pos or s.stop <= s.start:
                raise ValueError("timeline segments must be contiguous and non-empty")
            pos = s.stop

    @property
    def n_frames(self) -> int:
        return self.entries[-1].stop if self.entries else 0

    def states(self) -> np.ndarray:
        out = np.empty(self.n_frames, dtype=np.int64)
        for s in self.entries:
            out[s.start:s.stop] = s.state_index
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "timestamp", "state_index", "step_id"])
            ts = self.timestamps or tuple(range(self.n_frames))
            for s in self.entries:
                for f in range(s.start, s.stop):
                    w.writerow([f, ts[f], s.state_index, "" if s.step_id is None else s.step_id])

    @classmethod
    def read_csv(cls, path: str | Path) -> "GroundTruthTimeline":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        entries, stamps = [], []
        for i, r in enumerate(rows):
            if int(r["frame"]) != i:
                raise ValueError(f"{path}: frames must be consecutive from 0")
            state = int(r["state_index"])
            step = int(r["step_id"]) if r["step_id"] else None
            stamps.append(int(r["timestamp"]))
            if entries and entries[-1][2] == state and entries[-1][3] == step:
                entries[-1][1] = i + 1
            else:
                entries.append([i, i + 1, state, step])
        return cls(tuple(Segment(*e) for e in entries), tuple(stamps))


def sample_plan(g: StateGraph, rng: np.random.Generator,
                cap: int = PLAN_ENUMERATION_CAP) -> tuple[int, ...]:
    """Uniform draw over simple plans; beyond ``cap`` plans, a self-avoiding random walk."""
    plans = enumerate_plans(g, max_plans=cap + 1)
    if not plans:
        raise ValueError("graph has no plan")
    if len(plans) <= cap:
        return plans[int(rng.integers(len(plans)))]
    while True:
        node, visited, steps = 0, {0}, []
        while node != g.final_index:
            options = [(s, t) for s, t in g.successors(node) if t not in visited]
            if not options:
                break
            s, node = options[int(rng.integers(len(options)))]
            visited.add(node)
            steps.append(s)
        if node == g.final_index:
            return tuple(steps)


def sample_durations(n_states: int, rng: np.random.Generator, mean: int = DEFAULT_STEP_FRAMES,
                     jitter: int = DEFAULT_STEP_JITTER) -> list[int]:
    return [max(1, int(rng.integers(mean - jitter, mean + jitter + 1))) for _ in range(n_states)]


# --------------------------------------------------------------------------
# Rig


def look_at(position, target, camera_id: str, fx=525.0, fy=525.0, cx=319.5, cy=239.5,
            width=640, height=480, depth_scale=0.001) -> CameraCalibration:
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    ext = np.eye(4)
    ext[:3, :3] = np.column_stack([right, down, fwd])
    ext[:3, 3] = position
    return CameraCalibration(camera_id, fx, fy, cx, cy, ext, depth_scale, width, height)


@dataclass
class Rig:
    cameras: list[CameraCalibration]
    tray_rects: dict[str, tuple[float, float, float, float]]  # xmin, ymin, xmax, ymax
    element_size: float = 0.05
    points_per_element: int = 200
    depth_stride: int = DEFAULT_DEPTH_STRIDE
    geometry_seed: int = 12345
    proxies: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def default(cls, task: TaskDefinition, n_cameras: int = 3, **kw) -> "Rig":
        trays = task.trays
        cols = math.ceil(math.sqrt(len(trays)))
        size, gap = 0.3, 0.1
        pitch = size + gap
        rows = math.ceil(len(trays) / cols)
        rects = {}
        for i, t in enumerate(trays):
            cx = (i % cols - (cols - 1) / 2) * pitch
            cy = (i // cols - (rows - 1) / 2) * pitch
            rects[t] = (cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2)
        cams = []
        for k in range(n_cameras):
            ang = 2 * math.pi * k / n_cameras - math.pi / 2
            pos = (0.6 * math.cos(ang), 0.6 * math.sin(ang), 1.0)
            cams.append(look_at(pos, (0.0, 0.0, 0.0), f"cam{k}"))
        return cls(cams, rects, **kw)

    def proxy(self, element: int) -> np.ndarray:
        """Points on the surface of the element's box, centered at the origin."""
        pts = self.proxies.get(element)
        if pts is None:
            rng = np.random.default_rng((self.geometry_seed, element))
            h = self.element_size / 2
            pts = rng.uniform(-h, h, size=(self.points_per_element, 3))
            axis = rng.integers(0, 3, size=len(pts))
            side = rng.choice([-h, h], size=len(pts))
            pts[np.arange(len(pts)), axis] = side
            self.proxies[element] = pts
        return pts

    def slot_center(self, element: int, tray: str) -> np.ndarray:
        xmin, ymin, xmax, ymax = self.tray_rects[tray]
        i, j = element % 3, (element // 3) % 3
        x = xmin + (xmax - xmin) * (i + 1) / 4
        y = ymin + (ymax - ymin) * (j + 1) / 4
        return np.array([x, y, self.element_size / 2])

    def regions(self) -> list[TrayRegion]:
        """Tray rectangles (at element mid-height) projected into every camera."""
        out = []
        z = self.element_size / 2
        for cam in self.cameras:
            for tray, (xmin, ymin, xmax, ymax) in self.tray_rects.items():
                corners = np.array([[xmin, ymin, z], [xmax, ymin, z], [xmax, ymax, z], [xmin, ymax, z]])
                uv = cam.project(corners)[:, :2]
                out.append(TrayRegion(tray, cam.camera_id, tuple(map(tuple, uv))))
        return out


# --------------------------------------------------------------------------
# Streams


def build_timeline(g: StateGraph, plan: Sequence[int], durations: Sequence[int],
                   frame_period_us: int = FRAME_PERIOD_US,
                   start_us: int = SESSION_START_US) -> GroundTruthTimeline:
    states = plan_states(g, plan)
    if len(durations) != len(states):
        raise ValueError(f"need {len(states)} durations (one per visited state), got {len(durations)}")
    if any(d <= 0 for d in durations):
        raise ValueError("durations must be positive")
    entries, pos = [], 0
    for k, (s, d) in enumerate(zip(states, durations)):
        entries.append(Segment(pos, pos + d, s, plan[k - 1] if k else None))
        pos += d
    stamps = tuple(start_us + f * frame_period_us for f in range(pos))
    return GroundTruthTimeline(tuple(entries), stamps)


@dataclass
class Session:
    """A simulated run: ground truth plus a lazily generated detection stream."""

    task: TaskDefinition
    graph: StateGraph
    plan: tuple[int, ...]
    timeline: GroundTruthTimeline
    rig: Rig
    noise: NoiseModel
    camera_skew_us: tuple[int, ...] = ()

    def frames(self) -> Iterator[list[DetectionMessage]]:
        """One list of per-camera messages per frame, deterministic in the noise seed."""
        layout = ObservationLayout.for_task(self.task)
        expected = expected_matrix(self.graph, self.task, layout)
        labels = layout.labels()
        elem_idx = {e: i for i, e in enumerate(layout.elements)}
        n_cls = len(layout.elements)
        noise = self.noise
        rng = np.random.default_rng(noise.seed)
        cum_conf = None if noise.confusion is None else np.cumsum(noise.confusion, axis=1)
        stride = max(1, self.rig.depth_stride)
        proxies = np.stack([self.rig.proxy(i)[::stride] for i in range(n_cls)])
        skew = self.camera_skew_us or tuple(0 for _ in self.rig.cameras)
        states = self.timeline.states()
        stamps = self.timeline.timestamps
        cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for f, s in enumerate(states):
            present = cache.get(s)
            if present is None:
                keys = np.flatnonzero(expected[s] > 0.5)
                elems = np.array([elem_idx[labels[k][0]] for k in keys], dtype=np.int64)
                centers = np.array([self.rig.slot_center(elem_idx[labels[k][0]], labels[k][1])
                                    for k in keys]).reshape(-1, 3)
                present = cache[s] = (elems, centers)
            elems, centers = present
            msgs = []
            for ci, cam in enumerate(self.rig.cameras):
                keep = rng.random(len(elems)) >= noise.dropout_prob
                e, c = elems[keep], centers[keep]
                cls = e
                if cum_conf is not None:
                    u = rng.random(len(e))
                    cls = np.minimum((u[:, None] > cum_conf[e]).sum(axis=1), n_cls - 1)
                conf = np.full(len(e), noise.base_confidence)
                if noise.confidence_jitter > 0:
                    conf += rng.normal(0.0, noise.confidence_jitter, len(e))
                conf = np.clip(conf, 0.0, 1.0)
                if noise.position_jitter > 0:
                    c = c + _balls(rng, noise.position_jitter, len(e))
                dets = _render(cam, cls, conf, proxies[e] + c[:, None, :])
                msgs.append(DetectionMessage(cam.camera_id, f, stamps[f] + skew[ci], tuple(dets)))
            yield msgs


def _balls(rng: np.random.Generator, radius: float, n: int) -> np.ndarray:
    """``n`` points uniform in a ball of ``radius``."""
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * (radius * rng.random(n) ** (1 / 3))[:, None]


def _render(cam: CameraCalibration, cls: np.ndarray, conf: np.ndarray,
            world: np.ndarray) -> list[Detection2D]:
    """Project ``(n, points, 3)`` world point sets into detections with depth samples."""
    n, m = world.shape[:2]
    if n == 0:
        return []
    uvz = cam.project(world.reshape(-1, 3)).reshape(n, m, 3)
    lo = np.maximum(uvz[:, :, :2].min(axis=1), 0.0)
    hi = np.minimum(uvz[:, :, :2].max(axis=1), [float(cam.width), float(cam.height)])
    uvz[:, :, 2] /= cam.depth_scale
    wh = hi - lo
    return [Detection2D(int(cls[k]), (lo[k, 0], lo[k, 1], wh[k, 0], wh[k, 1]), float(conf[k]), uvz[k])
            for k in range(n)]


def simulate(plan: Sequence[int], g: StateGraph, task: TaskDefinition, durations: Sequence[int],
             noise: NoiseModel, rig: Rig | None = None,
             camera_skew_us: Sequence[int] | None = None) -> Session:
    rig = rig or Rig.default(task)
    if camera_skew_us is None:
        camera_skew_us = tuple(3_000 * i for i in range(len(rig.cameras)))
    timeline = build_timeline(g, plan, durations)
    return Session(task, g, tuple(plan), timeline, rig, noise, tuple(camera_skew_us))


def simulate_observations(session: Session) -> Iterator[np.ndarray]:
    """Detector-free shortcut: consolidated observation vectors under the same noise model.

    Geometry is skipped; each present (element, tray) entry takes the max
    confidence over cameras that did not drop it, after class confusion.
    """
    layout = ObservationLayout.for_task(session.task)
    expected = expected_matrix(session.graph, session.task, layout)
    ntr = len(layout.trays)
    rng = np.random.default_rng(session.noise.seed)
    n_cls = len(layout.elements)
    for s in session.timeline.states():
        y = layout.zeros()
        for k in np.flatnonzero(expected[s] > 0.5):
            e, t = divmod(int(k), ntr)
            for _ in session.rig.cameras:
                if rng.random() < session.noise.dropout_prob:
                    continue
                cls = e
                if session.noise.confusion is not None:
                    cls = int(rng.choice(n_cls, p=session.noise.confusion[e]))
                conf = session.noise.base_confidence
                if session.noise.confidence_jitter > 0:
                    conf += rng.normal(0.0, session.noise.confidence_jitter)
                conf = min(1.0, max(0.0, conf))
                idx = cls * ntr + t
                y[idx] = max(y[idx], conf)
        yield y


def spread_frames(total: int, n_states: int) -> list[int]:
    """Split ``total`` frames as evenly as possible over ``n_states`` states."""
    if total < n_states:
        raise ValueError(f"{total} frames cannot cover {n_states} states")
    base, extra = divmod(total, n_states)
    return [base + (i < extra) for i in range(n_states)]


def random_session(task: TaskDefinition, g: StateGraph, seed: int = 0, dropout: float = 0.0,
                   confidence_jitter: float = 0.0, position_jitter: float = 0.0,
                   confusion: float = 0.0, step_frames: int = DEFAULT_STEP_FRAMES,
                   step_jitter: int = DEFAULT_STEP_JITTER, frames: int = 0,
                   rig: Rig | None = None) -> Session:
    """Sample a plan and durations from ``seed``, then attach a noise model.

    Plan/duration sampling and detection noise use independent child streams
    of the same seed. ``frames > 0`` fixes the session length, spread evenly
    over the visited states.
    """
    plan_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(plan_ss)
    plan = sample_plan(g, rng)
    n = len(plan) + 1
    durations = (spread_frames(frames, n) if frames > 0
                 else sample_durations(n, rng, step_frames, step_jitter))
    noise = NoiseModel(dropout_prob=dropout,
                       confusion=NoiseModel.similar_confusion(task, confusion) if confusion > 0 else None,
                       confidence_jitter=confidence_jitter, position_jitter=position_jitter,
                       seed=int(noise_ss.generate_state(1)[0]))
    return simulate(plan, g, task, durations, noise, rig)
