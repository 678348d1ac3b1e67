"""Log-domain Viterbi decoding of assembly states from observation vectors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fusion import DimensionMismatchError, ObservationLayout
from .planner import StateGraph, TransitionMatrix
from .task import Configuration, TaskDefinition

DEFAULT_SIGMA = 0.5
DEFAULT_DEVIATION_THRESHOLD = 0.3
DEFAULT_DEVIATION_WINDOW = 15
DEFAULT_TRELLIS_WINDOW = 10_000

CONTAIN_PREDICATE = "do_contain"
MOUNTED_PREDICATE = "is_mounted"
DEFAULT_WORK_TRAY = "T_work"

TIMELINE_COLUMNS = ("frame", "timestamp", "state_index", "belief", "map_state", "warning_flag")


def expected_observation(c: Configuration, task: TaskDefinition,
                         layout: ObservationLayout | None = None) -> np.ndarray:
    """Binary observation a configuration would produce under perfect perception.

    ``do_contain(tray, e)`` lights (e, tray); ``is_mounted(e, ...)`` lights
    (e, work tray).
    """
    layout = layout or ObservationLayout.for_task(task)
    work = task.work_tray or (DEFAULT_WORK_TRAY if DEFAULT_WORK_TRAY in layout.trays else None)
    elements, trays = set(layout.elements), set(layout.trays)
    y = layout.zeros()
    for p in c:
        if p.name == CONTAIN_PREDICATE and len(p.args) == 2:
            tray, elem = p.args
            if tray in trays and elem in elements:
                y[layout.index(elem, tray)] = 1.0
        elif p.name == MOUNTED_PREDICATE and work is not None and p.args[0] in elements:
            y[layout.index(p.args[0], work)] = 1.0
    return y


def expected_matrix(g: StateGraph, task: TaskDefinition,
                    layout: ObservationLayout | None = None) -> np.ndarray:
    """Rows are expected observations of the graph's states."""
    layout = layout or ObservationLayout.for_task(task)
    return np.vstack([expected_observation(c, task, layout) for c in g.nodes])


def _norm(residual: np.ndarray, norm: str) -> np.ndarray:
    if norm == "l2":
        return np.sqrt(np.einsum("...i,...i->...", residual, residual))
    if norm == "l1":
        return np.abs(residual).sum(axis=-1)
    raise ValueError(f"unknown norm {norm!r}")


def observation_likelihood(y: np.ndarray, expected: np.ndarray, sigma: float = DEFAULT_SIGMA,
                           norm: str = "l2") -> float | np.ndarray:
    """Unnormalized log P(y | s) = -||y - E_y(s)|| / sigma.

    ``expected`` may be one state's vector or a ``(states, dim)`` matrix, in
    which case one value per state is returned.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    y = np.asarray(y, dtype=float)
    expected = np.asarray(expected, dtype=float)
    if expected.shape[-1] != y.shape[-1]:
        raise DimensionMismatchError(f"observation dim {y.shape[-1]} != {expected.shape[-1]}")
    out = -_norm(y - expected, norm) / sigma
    return float(out) if out.ndim == 0 else out


@dataclass
class Trellis:
    """Viterbi table in log domain; column ``t`` holds log V over all states."""

    sigma: float
    columns: list[np.ndarray] = field(default_factory=list)
    backpointers: list[np.ndarray] = field(default_factory=list)
    time: int = 0
    window: int = DEFAULT_TRELLIS_WINDOW
    committed: list[int] = field(default_factory=list)

    @property
    def last(self) -> np.ndarray:
        return self.columns[-1]

    def compact(self) -> None:
        """Commit the older half of the path and drop its columns."""
        keep = self.window // 2
        drop = len(self.columns) - keep
        if drop <= 0:
            return
        path = _backtrack(self.columns, self.backpointers)
        self.committed.extend(path[:drop])
        del self.columns[:drop]
        del self.backpointers[:drop]


def _argmax(v: np.ndarray) -> int:
    return int(np.argmax(v))  # first maximum: smallest index wins ties


def _backtrack(columns: Sequence[np.ndarray], backpointers: Sequence[np.ndarray]) -> list[int]:
    state = _argmax(columns[-1])
    path = [state]
    for t in range(len(columns) - 1, 0, -1):
        state = int(backpointers[t][state])
        path.append(state)
    path.reverse()
    return path


def viterbi_init(y1: np.ndarray, expected: np.ndarray, tm: TransitionMatrix | None = None,
                 sigma: float = DEFAULT_SIGMA, prior: np.ndarray | None = None,
                 norm: str = "l2", window: int = DEFAULT_TRELLIS_WINDOW) -> Trellis:
    """First column: log P(y1 | s_k) + log pi_k with pi one-hot on state 0 by default."""
    n = expected.shape[0]
    if prior is None:
        log_prior = np.full(n, -np.inf)
        log_prior[0] = 0.0
    else:
        with np.errstate(divide="ignore"):
            log_prior = np.log(np.asarray(prior, dtype=float))
    col = observation_likelihood(y1, expected, sigma, norm) + log_prior
    tr = Trellis(sigma=sigma, window=window)
    tr.columns.append(np.atleast_1d(col).astype(float))
    tr.backpointers.append(np.full(n, -1, dtype=np.int64))
    tr.time = 1
    return tr


def viterbi_step(tr: Trellis, y: np.ndarray, expected: np.ndarray, tm: TransitionMatrix | np.ndarray,
                 norm: str = "l2", log_transitions: np.ndarray | None = None) -> Trellis:
    """Append one column: loglik(y, k) + max_x (log a[x, k] + log V[t-1, x])."""
    if log_transitions is None:
        log_transitions = tm.log_probs if isinstance(tm, TransitionMatrix) else np.log(tm)
    scores = tr.last[:, None] + log_transitions
    bp = np.argmax(scores, axis=0)
    best = scores[bp, np.arange(scores.shape[1])]
    tr.columns.append(observation_likelihood(y, expected, tr.sigma, norm) + best)
    tr.backpointers.append(bp.astype(np.int64))
    tr.time += 1
    if len(tr.columns) > tr.window:
        tr.compact()
    return tr


def viterbi_path(tr: Trellis) -> list[int]:
    if not tr.columns:
        raise ValueError("empty trellis")
    return tr.committed + _backtrack(tr.columns, tr.backpointers)


def path_log_prob(path: Sequence[int], logliks: np.ndarray, log_transitions: np.ndarray,
                  log_prior: np.ndarray) -> float:
    """Log-probability of a state sequence given per-frame log-likelihood rows."""
    total = log_prior[path[0]] + logliks[0, path[0]]
    for t in range(1, len(path)):
        total += log_transitions[path[t - 1], path[t]] + logliks[t, path[t]]
    return float(total)


@dataclass(frozen=True)
class BeliefState:
    probs: np.ndarray
    map_state: int

    @property
    def max_prob(self) -> float:
        return float(self.probs[self.map_state])

    def top(self, k: int = 3) -> list[tuple[int, float]]:
        order = np.argsort(-self.probs, kind="stable")[:k]
        return [(int(i), float(self.probs[i])) for i in order]


def current_belief(tr: Trellis) -> BeliefState:
    col = tr.last
    w = np.exp(col - col.max())
    p = w / w.sum()
    return BeliefState(p, _argmax(col))


@dataclass(frozen=True)
class DeviationWarning:
    frame: int
    low_frames: int
    candidates: list[tuple[int, float]]

    def __str__(self) -> str:
        cands = ", ".join(f"state {s} p={p:.3f}" for s, p in self.candidates)
        return (f"frame {self.frame}: no configuration above threshold for "
                f"{self.low_frames} frames; candidates: {cands}")


class DeviationMonitor:
    """Warns when the best belief stays below ``threshold`` for ``window`` frames."""

    def __init__(self, threshold: float = DEFAULT_DEVIATION_THRESHOLD,
                 window: int = DEFAULT_DEVIATION_WINDOW):
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        self.threshold = threshold
        self.window = window
        self.low = 0
        self.frame = 0

    def update(self, belief: BeliefState) -> DeviationWarning | None:
        self.frame += 1
        self.low = self.low + 1 if belief.max_prob < self.threshold else 0
        if self.low >= self.window:
            return DeviationWarning(self.frame - 1, self.low, belief.top(3))
        return None


def deviation_check(belief: BeliefState, threshold: float, monitor: DeviationMonitor | None = None,
                    ) -> DeviationWarning | None:
    """One-shot check; pass a persistent monitor to apply the persistence window."""
    monitor = monitor or DeviationMonitor(threshold, window=1)
    return monitor.update(belief)


@dataclass
class FrameResult:
    frame: int
    timestamp: int
    belief: BeliefState
    warning: DeviationWarning | None


class StateEstimator:
    """Online estimator: feeds observations into a trellis frame by frame."""

    def __init__(self, graph: StateGraph, task: TaskDefinition, tm: TransitionMatrix,
                 sigma: float = DEFAULT_SIGMA, norm: str = "l2",
                 deviation_threshold: float = DEFAULT_DEVIATION_THRESHOLD,
                 deviation_window: int = DEFAULT_DEVIATION_WINDOW,
                 trellis_window: int = DEFAULT_TRELLIS_WINDOW, uniform_prior: bool = False,
                 layout: ObservationLayout | None = None):
        self.graph = graph
        self.task = task
        self.tm = tm
        self.layout = layout or ObservationLayout.for_task(task)
        self.expected = expected_matrix(graph, task, self.layout)
        self.sigma = sigma
        self.norm = norm
        self.log_a = tm.log_probs
        self.prior = np.full(graph.n_states, 1.0 / graph.n_states) if uniform_prior else None
        self.trellis_window = trellis_window
        self.deviation = DeviationMonitor(deviation_threshold, deviation_window)
        self.trellis: Trellis | None = None
        self.results: list[FrameResult] = []

    def update(self, y: np.ndarray, timestamp: int = 0) -> FrameResult:
        if self.trellis is None:
            self.trellis = viterbi_init(y, self.expected, self.tm, self.sigma, self.prior,
                                        self.norm, self.trellis_window)
        else:
            viterbi_step(self.trellis, y, self.expected, self.tm, self.norm, self.log_a)
        belief = current_belief(self.trellis)
        res = FrameResult(len(self.results), timestamp, belief, self.deviation.update(belief))
        self.results.append(res)
        return res

    def path(self) -> list[int]:
        return viterbi_path(self.trellis) if self.trellis is not None else []

    def timeline_rows(self) -> list[dict]:
        path = self.path()
        return [
            {"frame": r.frame, "timestamp": r.timestamp, "state_index": path[r.frame],
             "belief": r.belief.max_prob, "map_state": r.belief.map_state,
             "warning_flag": int(r.warning is not None)}
            for r in self.results
        ]


def write_timeline(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMELINE_COLUMNS)
        for r in rows:
            w.writerow([r["frame"], r["timestamp"], r["state_index"], f"{r['belief']:.6f}",
                        r["map_state"], r["warning_flag"]])


def read_timeline(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != TIMELINE_COLUMNS:
        raise ValueError(f"{path}: unexpected timeline columns {tuple(rows[0].keys())}")
    return [
        {"frame": int(r["frame"]), "timestamp": int(r["timestamp"]),
         "state_index": int(r["state_index"]), "belief": float(r["belief"]),
         "map_state": int(r["map_state"]), "warning_flag": int(r["warning_flag"])}
        for r in rows
    ]
