"""State-graph construction, plan enumeration and the transition matrix."""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass

import numpy as np

from .task import Configuration, TaskDefinition, apply_step, check_preconditions

DEFAULT_NODE_CAP = 100_000
DEFAULT_STAY_PROB = 0.8


class PlanningError(Exception):
    pass


class UnreachableGoalError(PlanningError):
    pass


class StateExplosionError(PlanningError):
    pass


@dataclass(frozen=True)
class StateGraph:
    nodes: tuple[Configuration, ...]
    edges: tuple[tuple[int, int, int], ...]  # (from, step_id, to)
    final_index: int

    @property
    def n_states(self) -> int:
        return len(self.nodes)

    def successors(self, i: int) -> list[tuple[int, int]]:
        """(step_id, to) pairs leaving node ``i``, sorted by target then step."""
        return sorted(((s, t) for f, s, t in self.edges if f == i), key=lambda e: (e[1], e[0]))

    def index_of(self, c: Configuration) -> int:
        return self.nodes.index(c)


def _closure(task: TaskDefinition, node_cap: int):
    nodes = [task.initial]
    index = {task.initial: 0}
    edges = []
    queue = deque([0])
    while queue:
        i = queue.popleft()
        c = nodes[i]
        # The goal is terminal: steps leaving C_final are never part of a plan.
        if c == task.final:
            continue
        for sid, step in enumerate(task.steps):
            if not check_preconditions(c, step):
                continue
            nxt = apply_step(c, step)
            if nxt == c:
                continue  # no-op: staying put is the transition model's job
            j = index.get(nxt)
            if j is None:
                if len(nodes) >= node_cap:
                    raise StateExplosionError(
                        f"state graph exceeds {node_cap} nodes; check step effects"
                    )
                j = len(nodes)
                index[nxt] = j
                nodes.append(nxt)
                queue.append(j)
            edges.append((i, sid, j))
    return nodes, index, sorted(set(edges))


def build_state_graph(task: TaskDefinition, node_cap: int = DEFAULT_NODE_CAP) -> StateGraph:
    """Breadth-first closure from C_init, pruned to nodes on some C_init -> C_final path.

    Node numbering is BFS discovery order (node 0 = C_init), preserved
    through pruning.
    """
    nodes, index, edges = _closure(task, node_cap)
    if task.final not in index:
        raise UnreachableGoalError("final configuration is not reachable from the initial one")
    goal = index[task.final]

    preds: dict[int, list[int]] = {}
    for f, _, t in edges:
        preds.setdefault(t, []).append(f)
    keep = {goal}
    stack = [goal]
    while stack:
        for p in preds.get(stack.pop(), ()):
            if p not in keep:
                keep.add(p)
                stack.append(p)

    old = sorted(keep)
    remap = {o: n for n, o in enumerate(old)}
    kept_edges = tuple(
        (remap[f], s, remap[t]) for f, s, t in edges if f in keep and t in keep
    )
    return StateGraph(tuple(nodes[o] for o in old), tuple(sorted(kept_edges)), remap[goal])


def enumerate_plans(g: StateGraph, max_plans: int | None = None) -> list[tuple[int, ...]]:
    """Simple root-to-goal paths as step-id sequences, in lexicographic node order."""
    succ = {i: g.successors(i) for i in range(g.n_states)}
    plans: list[tuple[int, ...]] = []
    on_path = [False] * g.n_states

    def dfs(node: int, steps: list[int]) -> bool:
        if max_plans is not None and len(plans) >= max_plans:
            return False
        if node == g.final_index:
            plans.append(tuple(steps))
            return True
        on_path[node] = True
        for sid, nxt in succ[node]:
            if on_path[nxt]:
                continue
            steps.append(sid)
            dfs(nxt, steps)
            steps.pop()
        on_path[node] = False
        return True

    dfs(0, [])
    return plans


def plan_states(g: StateGraph, plan) -> list[int]:
    """Node indices visited by ``plan`` starting at node 0."""
    out = [0]
    for sid in plan:
        for s, t in g.successors(out[-1]):
            if s == sid:
                out.append(t)
                break
        else:
            raise PlanningError(f"step {sid} does not leave node {out[-1]}")
    return out


@dataclass(frozen=True)
class TransitionMatrix:
    probs: np.ndarray
    stay_prob: float

    @property
    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)


def transition_matrix(g: StateGraph, stay_prob: float = DEFAULT_STAY_PROB) -> TransitionMatrix:
    if not 0.0 < stay_prob < 1.0:
        raise ValueError(f"stay_prob must lie in (0, 1), got {stay_prob}")
    n = g.n_states
    probs = np.zeros((n, n))
    for i in range(n):
        targets = sorted({t for _, t in g.successors(i) if t != i})
        if i == g.final_index or not targets:
            probs[i, i] = 1.0
            continue
        probs[i, i] = stay_prob
        probs[i, targets] = (1.0 - stay_prob) / len(targets)
    probs.setflags(write=False)
    return TransitionMatrix(probs, stay_prob)


def config_digest(c: Configuration) -> str:
    return hashlib.sha1(str(c).encode()).hexdigest()[:8]


def to_dot(g: StateGraph, task: TaskDefinition) -> str:
    lines = ["digraph states {", "  rankdir=LR;"]
    for i, c in enumerate(g.nodes):
        shape = "doublecircle" if i == g.final_index else ("box" if i == 0 else "ellipse")
        lines.append(f'  n{i} [label="{i}:{config_digest(c)}", shape={shape}];')
    for f, s, t in g.edges:
        label = task.steps[s].name.replace('"', '\\"')
        lines.append(f'  n{f} -> n{t} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def dump_nodes(g: StateGraph) -> str:
    out = []
    for i, c in enumerate(g.nodes):
        tag = " (initial)" if i == 0 else (" (final)" if i == g.final_index else "")
        out.append(f"node {i} {config_digest(c)}{tag}")
        out += [f"  {p}" for p in c]
    return "\n".join(out) + "\n"
