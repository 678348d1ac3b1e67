"""Multi-view detection fusion.

Per-camera 2D detections are assigned to trays, back-projected into world
point clouds, associated across views with a radius-based point-cloud IoU,
collapsed into a fixed-length observation vector and smoothed over time.

Point clouds are plain ``(N, 3)`` float arrays in world coordinates (meters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numba import njit
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

DEFAULT_RADIUS = 0.01
DEFAULT_IOU_THRESH = 0.25
DEFAULT_ALPHA_UP = 0.7
DEFAULT_ALPHA_DOWN = 0.3
DEFAULT_DEPTH_STRIDE = 4

# Above this many point pairs, intersection counting switches to a k-d tree.
_DENSE_PAIR_LIMIT = 250_000
# Above this many points in total, pairwise IoU falls back to per-pair k-d trees.
_KERNEL_POINT_LIMIT = 20_000

CALIBRATION_HEADER = "assembly-monitor calibration v1"
TRAYS_HEADER = "assembly-monitor trays v1"


class FusionError(Exception):
    pass


class EmptyCloudError(FusionError):
    pass


class UnknownClassError(FusionError):
    pass


class DimensionMismatchError(FusionError):
    pass


class FormatError(FusionError):
    pass


@dataclass(frozen=True)
class CameraCalibration:
    camera_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray  # 4x4 camera -> world
    depth_scale: float = 1.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        ext = np.array(self.extrinsic, dtype=float).reshape(4, 4)
        ext.setflags(write=False)
        object.__setattr__(self, "extrinsic", ext)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"camera {self.camera_id}: focal lengths must be positive")
        rot = ext[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise ValueError(f"camera {self.camera_id}: extrinsic rotation is not orthonormal")
        if not np.allclose(ext[3], [0, 0, 0, 1]):
            raise ValueError(f"camera {self.camera_id}: extrinsic bottom row must be 0 0 0 1")
        if self.depth_scale <= 0:
            raise ValueError(f"camera {self.camera_id}: depth_scale must be positive")

    def __eq__(self, other):
        if not isinstance(other, CameraCalibration):
            return NotImplemented
        return (
            (self.camera_id, self.fx, self.fy, self.cx, self.cy, self.depth_scale,
             self.width, self.height)
            == (other.camera_id, other.fx, other.fy, other.cx, other.cy, other.depth_scale,
                other.width, other.height)
            and np.array_equal(self.extrinsic, other.extrinsic)
        )

    __hash__ = None

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        rot, t = self.extrinsic[:3, :3], self.extrinsic[:3, 3]
        return (np.asarray(points, dtype=float) - t) @ rot

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points -> ``(N, 3)`` rows of (u, v, metric depth)."""
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        return np.column_stack([self.fx * pc[:, 0] / z + self.cx,
                                self.fy * pc[:, 1] / z + self.cy, z])


@dataclass(frozen=True, eq=False)
class Detection2D:
    class_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h
    confidence: float
    depth_samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # (u, v, depth)

    def __post_init__(self):
        ds = self.depth_samples
        if not (type(ds) is np.ndarray and ds.dtype == np.float64 and ds.ndim == 2
                and ds.shape[1] == 3):
            ds = np.asarray(ds, dtype=float).reshape(-1, 3)
            object.__setattr__(self, "depth_samples", ds)
        object.__setattr__(self, "bbox", tuple(map(float, self.bbox)))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @classmethod
    def trusted(cls, class_id: int, bbox: tuple, confidence: float,
                depth_samples: np.ndarray) -> "Detection2D":
        """Skip validation for fields a decoder has already checked."""
        d = object.__new__(cls)
        object.__setattr__(d, "class_id", class_id)
        object.__setattr__(d, "bbox", bbox)
        object.__setattr__(d, "confidence", confidence)
        object.__setattr__(d, "depth_samples", depth_samples)
        return d

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return x + w / 2.0, y + h / 2.0

    def __eq__(self, other):
        if not isinstance(other, Detection2D):
            return NotImplemented
        return (self.class_id == other.class_id and self.bbox == other.bbox
                and self.confidence == other.confidence
                and np.array_equal(self.depth_samples, other.depth_samples))


@dataclass(frozen=True)
class TrayRegion:
    tray_name: str
    camera_id: str
    polygon: tuple[tuple[float, float], ...]

    def __post_init__(self):
        poly = tuple((float(x), float(y)) for x, y in self.polygon)
        if len(poly) < 3:
            raise ValueError(f"tray region {self.tray_name}/{self.camera_id} needs >= 3 vertices")
        object.__setattr__(self, "polygon", poly)


class ObservationLayout:
    """Canonical (element, tray) indexing of observation vectors."""

    def __init__(self, elements: Sequence[str], trays: Sequence[str]):
        self.elements = list(elements)
        self.trays = list(trays)
        self._e = {e: i for i, e in enumerate(self.elements)}
        self._t = {t: i for i, t in enumerate(self.trays)}

    @classmethod
    def for_task(cls, task) -> "ObservationLayout":
        return cls(task.elements, task.trays)

    @property
    def dim(self) -> int:
        return len(self.elements) * len(self.trays)

    def index(self, element: str, tray: str) -> int:
        return self._e[element] * len(self.trays) + self._t[tray]

    def labels(self) -> list[tuple[str, str]]:
        return [(e, t) for e in self.elements for t in self.trays]

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)


# --------------------------------------------------------------------------
# Geometry


def sample_depth_grid(depth: np.ndarray, bbox, stride: int = DEFAULT_DEPTH_STRIDE) -> np.ndarray:
    """Subsample a depth image inside ``bbox`` on a regular pixel grid.

    Returns ``(N, 3)`` rows of (u, v, raw depth); invalid depths are kept
    and dropped later by :func:`backproject`.
    """
    x, y, w, h = bbox
    u0, v0 = int(np.floor(x)), int(np.floor(y))
    u1 = min(int(np.ceil(x + w)), depth.shape[1])
    v1 = min(int(np.ceil(y + h)), depth.shape[0])
    us = np.arange(max(u0, 0), u1, stride)
    vs = np.arange(max(v0, 0), v1, stride)
    uu, vv = np.meshgrid(us, vs)
    return np.column_stack([uu.ravel(), vv.ravel(), depth[vv.ravel(), uu.ravel()]]).astype(float)


def _backproject_samples(samples: np.ndarray, cal: CameraCalibration):
    z = samples[:, 2] * cal.depth_scale
    valid = np.isfinite(z) & (z > 0)
    cam = np.empty((len(samples), 3))
    cam[:, 0] = z * (samples[:, 0] - cal.cx) / cal.fx
    cam[:, 1] = z * (samples[:, 1] - cal.cy) / cal.fy
    cam[:, 2] = z
    rot, t = cal.extrinsic[:3, :3], cal.extrinsic[:3, 3]
    return cam @ rot.T + t, valid


def backproject(det: Detection2D, cal: CameraCalibration) -> np.ndarray:
    """World-frame cloud of a detection's valid depth samples."""
    world, valid = _backproject_samples(det.depth_samples, cal)
    if not valid.any():
        raise EmptyCloudError(f"detection of class {det.class_id} has no valid depth samples")
    return world[valid]


def _nearest_distances(p1: np.ndarray, p2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance from each point of ``p2`` to ``p1`` and from each point of ``p1`` to ``p2``."""
    if len(p1) * len(p2) <= _DENSE_PAIR_LIMIT:
        d = cdist(p2, p1)
        return d.min(axis=1), d.min(axis=0)
    return cKDTree(p1).query(p2, k=1)[0], cKDTree(p2).query(p1, k=1)[0]


def _as_cloud(p) -> np.ndarray:
    return np.asarray(p, dtype=float).reshape(-1, 3)


def cloud_intersection_count(p1: np.ndarray, p2: np.ndarray, r: float) -> int:
    """Number of points of ``p2`` lying strictly within ``r`` of some point of ``p1``."""
    if r <= 0:
        raise ValueError("radius must be positive")
    p1, p2 = _as_cloud(p1), _as_cloud(p2)
    if len(p1) == 0 or len(p2) == 0:
        return 0
    if len(p1) * len(p2) <= _DENSE_PAIR_LIMIT:
        nearest = cdist(p2, p1).min(axis=1)
    else:
        nearest = cKDTree(p1).query(p2, k=1)[0]
    return int(np.count_nonzero(nearest < r))


def cloud_iou(p1: np.ndarray, p2: np.ndarray, r: float) -> float:
    """Symmetrized radius IoU: ``I / (|P1| + |P2| - I)``.

    I is the larger of the two directed intersection counts, capped at the
    smaller cloud size.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    p1, p2 = _as_cloud(p1), _as_cloud(p2)
    n1, n2 = len(p1), len(p2)
    if n1 == 0 or n2 == 0:
        raise EmptyCloudError("IoU of an empty cloud is undefined")
    lo = np.maximum(p1.min(axis=0), p2.min(axis=0))
    hi = np.minimum(p1.max(axis=0), p2.max(axis=0))
    if np.any(lo - hi >= r):
        return 0.0  # bounding boxes farther apart than r along some axis
    d21, d12 = _nearest_distances(p1, p2)
    inter = _capped(max(int(np.count_nonzero(d21 < r)), int(np.count_nonzero(d12 < r))), n1, n2)
    return inter / (n1 + n2 - inter)


def _capped(inter, n1, n2):
    # A dense cloud can have more points near a sparse one than the sparse
    # one has points; capping at the smaller size keeps IoU within [0, 1].
    return min(inter, n1, n2)


class RegionSet:
    """Tray regions of one camera, stacked for vectorized point location.

    Polygons are padded to a common vertex count by repeating their last
    vertex; the resulting zero-length edges never reject a point.
    """

    def __init__(self, regions: Sequence[TrayRegion], eps: float = 1e-9):
        self.regions = list(regions)
        nv = max((len(r.polygon) for r in self.regions), default=3)
        poly = np.array([list(r.polygon) + [r.polygon[-1]] * (nv - len(r.polygon))
                         for r in self.regions], dtype=float).reshape(-1, nv, 2)
        self.poly = poly
        self.edge = np.roll(poly, -1, axis=1) - poly
        self.tol = eps * np.maximum(1.0, np.abs(self.edge).sum(axis=2))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean ``(N, R)``: point n lies in region r (closed)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        rel = pts[:, None, None, :] - self.poly[None]  # (N, R, V, 2)
        cross = self.edge[None, ..., 0] * rel[..., 1] - self.edge[None, ..., 1] * rel[..., 0]
        cross = np.where(np.abs(cross) <= self.tol[None], 0.0, cross)
        return ~((cross > 0).any(axis=2) & (cross < 0).any(axis=2))

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Index of the first region containing each point, or -1."""
        if not self.regions:
            return np.full(len(points), -1)
        inside = self.contains(points)
        return np.where(inside.any(axis=1), inside.argmax(axis=1), -1)


def points_in_polygon(points: np.ndarray, polygon: Sequence[tuple[float, float]],
                      eps: float = 1e-9) -> np.ndarray:
    """Closed point-in-convex-polygon test (on-edge counts as inside)."""
    region = TrayRegion("_", "_", tuple(polygon))
    return RegionSet([region], eps).contains(points)[:, 0]


def point_in_polygon(pt: tuple[float, float], polygon: Sequence[tuple[float, float]],
                     eps: float = 1e-9) -> bool:
    return bool(points_in_polygon(np.asarray(pt), polygon, eps)[0])


def assign_to_trays(dets: Iterable[Detection2D], regions: Iterable[TrayRegion],
                    camera_id: str) -> dict[str, list[Detection2D]]:
    """Map tray -> detections whose bbox center lies in that tray's region.

    Detections outside every region are dropped; a center inside overlapping
    regions goes to the first region listed.
    """
    dets = list(dets)
    own = [r for r in regions if r.camera_id == camera_id]
    out: dict[str, list[Detection2D]] = {r.tray_name: [] for r in own}
    if not dets or not own:
        return out
    idx = RegionSet(own).locate(np.array([d.center for d in dets]))
    for d, k in zip(dets, idx):
        if k >= 0:
            out[own[k].tray_name].append(d)
    return out


# --------------------------------------------------------------------------
# Cross-view association


@dataclass(frozen=True, eq=False)
class ViewDetection:
    camera_id: str
    detection: Detection2D
    cloud: np.ndarray


@dataclass(eq=False)
class Cluster:
    tray: str
    class_id: int
    members: list[ViewDetection]

    @property
    def confidence(self) -> float:
        return max(m.detection.confidence for m in self.members)

    @property
    def cameras(self) -> set[str]:
        return {m.camera_id for m in self.members}


@njit(cache=True)
def _directed_counts(pts, starts, r):  # pragma: no cover - compiled
    k = starts.shape[0] - 1
    counts = np.zeros((k, k), np.int64)
    for bi in range(k):
        for i in range(starts[bi], starts[bi + 1]):
            x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
            for bj in range(k):
                if bj == bi:
                    continue
                for j in range(starts[bj], starts[bj + 1]):
                    dx = x - pts[j, 0]
                    dy = y - pts[j, 1]
                    dz = z - pts[j, 2]
                    if math.sqrt(dx * dx + dy * dy + dz * dz) < r:
                        counts[bi, bj] += 1
                        break
    return counts


def pairwise_cloud_iou(clouds: Sequence[np.ndarray], r: float) -> np.ndarray:
    """Matrix of :func:`cloud_iou` over all cloud pairs (diagonal set to 1)."""
    if r <= 0:
        raise ValueError("radius must be positive")
    k = len(clouds)
    if k == 0:
        return np.zeros((0, 0))
    clouds = [_as_cloud(c) for c in clouds]
    sizes = np.array([len(c) for c in clouds])
    if np.any(sizes == 0):
        raise EmptyCloudError("IoU of an empty cloud is undefined")
    if sizes.sum() > _KERNEL_POINT_LIMIT:
        out = np.eye(k)
        for i in range(k):
            for j in range(i + 1, k):
                out[i, j] = out[j, i] = cloud_iou(clouds[i], clouds[j], r)
        return out
    starts = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    # counts[i, j]: points of cloud i within r of cloud j
    counts = _directed_counts(np.ascontiguousarray(np.concatenate(clouds)), starts, float(r))
    inter = np.minimum(np.maximum(counts, counts.T), np.minimum(sizes[:, None], sizes[None, :]))
    out = inter / (sizes[:, None] + sizes[None, :] - inter)
    np.fill_diagonal(out, 1.0)
    return out


@njit(cache=True)
def _candidate_pairs(pts, starts, group, cam, r, thresh):  # pragma: no cover - compiled
    """IoU of every same-group, cross-camera cloud pair at or above ``thresh``."""
    k = starts.shape[0] - 1
    out_i, out_j, out_iou = [], [], []
    for a in range(k):
        for b in range(a + 1, k):
            if group[a] != group[b] or cam[a] == cam[b]:
                continue
            best = 0
            for src, dst in ((a, b), (b, a)):
                c = 0
                for i in range(starts[src], starts[src + 1]):
                    x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
                    for j in range(starts[dst], starts[dst + 1]):
                        dx = x - pts[j, 0]
                        dy = y - pts[j, 1]
                        dz = z - pts[j, 2]
                        if math.sqrt(dx * dx + dy * dy + dz * dz) < r:
                            c += 1
                            break
                best = max(best, c)
            na = starts[a + 1] - starts[a]
            nb = starts[b + 1] - starts[b]
            best = min(best, na, nb)
            iou = best / (na + nb - best)
            if iou >= thresh:
                out_i.append(a)
                out_j.append(b)
                out_iou.append(iou)
    return out_i, out_j, out_iou


def _scored_pairs(nodes: Sequence[ViewDetection], group: np.ndarray, cam: np.ndarray,
                  r: float, iou_thresh: float) -> list[tuple[float, int, int]]:
    sizes = np.array([len(n.cloud) for n in nodes], dtype=np.int64)
    if np.any(sizes == 0):
        raise EmptyCloudError("IoU of an empty cloud is undefined")
    if sizes.sum() <= _KERNEL_POINT_LIMIT:
        starts = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        pts = np.ascontiguousarray(np.concatenate([n.cloud for n in nodes]), dtype=np.float64)
        ii, jj, vv = _candidate_pairs(pts, starts, group, cam, float(r), float(iou_thresh))
        return [(-v, i, j) for i, j, v in zip(ii, jj, vv)]
    pairs = []
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            if group[i] == group[j] and cam[i] != cam[j]:
                v = cloud_iou(nodes[i].cloud, nodes[j].cloud, r)
                if v >= iou_thresh:
                    pairs.append((-v, i, j))
    return pairs


def match_across_views(per_view: Mapping[str, Mapping[str, Sequence[ViewDetection]]],
                       r: float = DEFAULT_RADIUS,
                       iou_thresh: float = DEFAULT_IOU_THRESH) -> list[Cluster]:
    """Greedy agglomeration of same-class detections per tray by descending cloud IoU.

    ``per_view`` maps camera -> tray -> detections with their clouds. A
    cluster never holds two detections from the same camera.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    if r <= 0:
        raise ValueError("radius must be positive")
    trays: dict[str, list[ViewDetection]] = {}
    for cam in sorted(per_view):
        for tray, vds in per_view[cam].items():
            trays.setdefault(tray, []).extend(vds)
    tray_names = sorted(trays)
    nodes = [n for t in tray_names for n in trays[t]]
    if not nodes:
        return []
    node_tray = [t for t in tray_names for _ in trays[t]]
    keys: dict = {}
    group = np.array([keys.setdefault((t, n.detection.class_id), len(keys))
                      for t, n in zip(node_tray, nodes)], dtype=np.int64)
    cam_ids: dict = {}
    cam = np.array([cam_ids.setdefault(n.camera_id, len(cam_ids)) for n in nodes], dtype=np.int64)

    pairs = _scored_pairs(nodes, group, cam, r, iou_thresh) if len(keys) < len(nodes) else []
    pairs.sort()  # descending IoU, then index order

    root = list(range(len(nodes)))
    cams = [{c} for c in cam.tolist()]

    def find(i):
        while root[i] != i:
            root[i] = root[root[i]]
            i = root[i]
        return i

    for _, i, j in pairs:
        ri, rj = find(i), find(j)
        if ri == rj or cams[ri] & cams[rj]:
            continue
        lo, hi = min(ri, rj), max(ri, rj)
        root[hi] = lo
        cams[lo] |= cams[hi]

    groups: dict[int, list[ViewDetection]] = {}
    for i, n in enumerate(nodes):
        groups.setdefault(find(i), []).append(n)
    return [Cluster(node_tray[k], groups[k][0].detection.class_id, groups[k]) for k in sorted(groups)]


def consolidate(clusters: Iterable[Cluster], layout: ObservationLayout) -> np.ndarray:
    """Max-confidence observation vector; ``class_id`` indexes ``layout.elements``."""
    y = layout.zeros()
    for c in clusters:
        if not 0 <= c.class_id < len(layout.elements):
            raise UnknownClassError(f"class id {c.class_id} maps to no task element")
        idx = layout.index(layout.elements[c.class_id], c.tray)
        y[idx] = max(y[idx], c.confidence)
    return y


def smooth(prev: np.ndarray, curr: np.ndarray, alpha_up: float = DEFAULT_ALPHA_UP,
           alpha_down: float = DEFAULT_ALPHA_DOWN) -> np.ndarray:
    """Asymmetric exponential smoothing: rises follow ``alpha_up``, drops ``alpha_down``."""
    prev = np.asarray(prev, dtype=float)
    curr = np.asarray(curr, dtype=float)
    if prev.shape != curr.shape:
        raise DimensionMismatchError(f"cannot smooth {prev.shape} with {curr.shape}")
    if not 0.0 <= alpha_down <= alpha_up <= 1.0:
        raise ValueError("require 0 <= alpha_down <= alpha_up <= 1")
    alpha = np.where(curr > prev, alpha_up, alpha_down)
    out = alpha * curr + (1.0 - alpha) * prev
    # Guard against rounding just outside [min, max].
    return np.clip(out, np.minimum(prev, curr), np.maximum(prev, curr))


class TemporalSmoother:
    def __init__(self, alpha_up: float = DEFAULT_ALPHA_UP, alpha_down: float = DEFAULT_ALPHA_DOWN):
        if not 0.0 <= alpha_down <= alpha_up <= 1.0:
            raise ValueError("require 0 <= alpha_down <= alpha_up <= 1")
        self.alpha_up = alpha_up
        self.alpha_down = alpha_down
        self.state: np.ndarray | None = None

    def __call__(self, y: np.ndarray) -> np.ndarray:
        if self.state is None:
            self.state = np.array(y, dtype=float)
        else:
            self.state = smooth(self.state, y, self.alpha_up, self.alpha_down)
        return self.state.copy()

    def reset(self):
        self.state = None


class FusionPipeline:
    """Per-frame fusion from per-camera detection lists to a smoothed observation."""

    def __init__(self, layout: ObservationLayout, calibrations: Mapping[str, CameraCalibration],
                 regions: Sequence[TrayRegion], radius: float = DEFAULT_RADIUS,
                 iou_thresh: float = DEFAULT_IOU_THRESH, alpha_up: float = DEFAULT_ALPHA_UP,
                 alpha_down: float = DEFAULT_ALPHA_DOWN, smoothing: bool = True):
        self.layout = layout
        self.calibrations = dict(calibrations)
        self.regions = list(regions)
        self.radius = radius
        self.iou_thresh = iou_thresh
        self.smoother = TemporalSmoother(alpha_up, alpha_down) if smoothing else None
        self.dropped_detections = 0
        self._regions_by_camera: dict[str, RegionSet] = {}

    def clusters(self, detections: Mapping[str, Sequence[Detection2D]]) -> list[Cluster]:
        per_view: dict[str, dict[str, list[ViewDetection]]] = {}
        for cam, dets in detections.items():
            cal = self.calibrations.get(cam)
            if cal is None:
                raise FusionError(f"no calibration for camera {cam!r}")
            regions = self._regions_by_camera.get(cam)
            if regions is None:
                regions = RegionSet([r for r in self.regions if r.camera_id == cam])
                self._regions_by_camera[cam] = regions
            views: dict[str, list[ViewDetection]] = {}
            per_view[cam] = views
            if not dets or not regions.regions:
                continue
            trays = regions.locate(np.array([d.center for d in dets]))
            kept = [(d, k) for d, k in zip(dets, trays) if k >= 0]
            if not kept:
                continue
            # Back-project every kept detection of this camera in one pass.
            samples = np.concatenate([d.depth_samples for d, _ in kept])
            world, valid = _backproject_samples(samples, cal)
            bounds = np.cumsum([0] + [len(d.depth_samples) for d, _ in kept])
            all_valid = bool(valid.all())
            for (d, k), lo, hi in zip(kept, bounds[:-1].tolist(), bounds[1:].tolist()):
                cloud = world[lo:hi] if all_valid else world[lo:hi][valid[lo:hi]]
                if len(cloud) == 0:
                    self.dropped_detections += 1
                    continue
                views.setdefault(regions.regions[k].tray_name, []).append(ViewDetection(cam, d, cloud))
        return match_across_views(per_view, self.radius, self.iou_thresh)

    def observe(self, detections: Mapping[str, Sequence[Detection2D]]) -> np.ndarray:
        """Raw consolidated observation for one synchronized frame."""
        return consolidate(self.clusters(detections), self.layout)

    def __call__(self, detections: Mapping[str, Sequence[Detection2D]]) -> np.ndarray:
        y = self.observe(detections)
        return self.smoother(y) if self.smoother is not None else y


# --------------------------------------------------------------------------
# Calibration and tray-region files


def _content_lines(path: Path, header: str) -> list[tuple[int, list[str]]]:
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != header:
        raise FormatError(f"{path}: first line must be {header!r}")
    out = []
    for n, raw in enumerate(text[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append((n, line.split()))
    return out


def load_calibrations(path: str | Path) -> dict[str, CameraCalibration]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"calibration file not found: {path}")
    cams: dict[str, CameraCalibration] = {}
    cur: dict | None = None

    def close(n):
        missing = {"fx", "fy", "cx", "cy", "extrinsic"} - cur.keys()
        if missing:
            raise FormatError(f"{path}:{n}: camera {cur['camera_id']} missing {sorted(missing)}")
        try:
            cams[cur["camera_id"]] = CameraCalibration(**cur)
        except ValueError as e:
            raise FormatError(f"{path}:{n}: {e}") from None

    for n, toks in _content_lines(path, CALIBRATION_HEADER):
        key, vals = toks[0], toks[1:]
        try:
            if key == "camera":
                if cur is not None:
                    raise FormatError(f"{path}:{n}: previous camera block not closed with 'end'")
                cur = {"camera_id": vals[0]}
            elif key == "end":
                close(n)
                cur = None
            elif cur is None:
                raise FormatError(f"{path}:{n}: {key!r} outside a camera block")
            elif key in ("fx", "fy", "cx", "cy", "depth_scale"):
                cur[key] = float(vals[0])
            elif key in ("width", "height"):
                cur[key] = int(vals[0])
            elif key == "extrinsic":
                if len(vals) != 16:
                    raise FormatError(f"{path}:{n}: extrinsic needs 16 values")
                cur[key] = np.array([float(v) for v in vals]).reshape(4, 4)
            else:
                raise FormatError(f"{path}:{n}: unknown key {key!r}")
        except (IndexError, ValueError) as e:
            raise FormatError(f"{path}:{n}: bad value for {key!r}: {e}") from None
    if cur is not None:
        raise FormatError(f"{path}: camera {cur['camera_id']} not closed with 'end'")
    return cams


def save_calibrations(cams: Iterable[CameraCalibration], path: str | Path) -> None:
    lines = [CALIBRATION_HEADER]
    for c in cams:
        lines += [f"camera {c.camera_id}",
                  f"  fx {float(c.fx)!r}", f"  fy {float(c.fy)!r}",
                  f"  cx {float(c.cx)!r}", f"  cy {float(c.cy)!r}",
                  f"  width {c.width}", f"  height {c.height}",
                  f"  depth_scale {float(c.depth_scale)!r}",
                  "  extrinsic " + " ".join(repr(float(v)) for v in c.extrinsic.ravel()),
                  "end"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tray_regions(path: str | Path) -> list[TrayRegion]:
    """Lines ``region <camera> <tray> x1 y1 x2 y2 ...`` after the header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tray-region file not found: {path}")
    regions = []
    seen = set()
    for n, toks in _content_lines(path, TRAYS_HEADER):
        if toks[0] != "region" or len(toks) < 3:
            raise FormatError(f"{path}:{n}: expected 'region <camera> <tray> <vertices>'")
        cam, tray, coords = toks[1], toks[2], toks[3:]
        if len(coords) % 2 or len(coords) < 6:
            raise FormatError(f"{path}:{n}: need at least 3 (x, y) vertex pairs")
        if (cam, tray) in seen:
            raise FormatError(f"{path}:{n}: duplicate region for ({cam}, {tray})")
        seen.add((cam, tray))
        xy = [float(v) for v in coords]
        regions.append(TrayRegion(tray, cam, tuple(zip(xy[::2], xy[1::2]))))
    return regions


def save_tray_regions(regions: Iterable[TrayRegion], path: str | Path) -> None:
    lines = [TRAYS_HEADER]
    for r in regions:
        verts = " ".join(f"{x!r} {y!r}" for x, y in r.polygon)
        lines.append(f"region {r.camera_id} {r.tray_name} {verts}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
