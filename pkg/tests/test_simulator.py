from collections import Counter

import numpy as np
import pytest

from assembly_monitor.fusion import FusionPipeline, ObservationLayout, backproject
from assembly_monitor.ingest import encode_message
from assembly_monitor.planner import build_state_graph, enumerate_plans, plan_states
from assembly_monitor.reasoner import expected_matrix
from assembly_monitor.simulator import (GroundTruthTimeline, NoiseModel, build_timeline,
                                        random_session, sample_durations, sample_plan, simulate,
                                        spread_frames)
from assembly_monitor.task import apply_step
from conftest import make_task
from test_planner import CHAIN, DIAMOND


def test_single_plan_graph():
    g = build_state_graph(make_task(CHAIN))
    rng = np.random.default_rng(0)
    assert {sample_plan(g, rng) for _ in range(50)} == {(0, 1, 2)}


def test_diamond_branch_frequency():
    g = build_state_graph(make_task(DIAMOND))
    rng = np.random.default_rng(7)
    counts = Counter(sample_plan(g, rng) for _ in range(1000))
    assert set(counts) == {(0, 1), (2, 3)}
    assert abs(counts[(0, 1)] / 1000 - 0.5) <= 0.05


def test_random_walk_beyond_cap(lego, lego_graph):
    rng = np.random.default_rng(3)
    plans = set(enumerate_plans(lego_graph))
    for _ in range(20):
        assert sample_plan(lego_graph, rng, cap=5) in plans


def test_lego_plans_replay_to_final(lego, lego_graph):
    rng = np.random.default_rng(1)
    for _ in range(100):
        c = lego.initial
        for s in sample_plan(lego_graph, rng):
            c = apply_step(c, lego.steps[s])
        assert c == lego.final


def test_noise_model_validation(lego):
    with pytest.raises(ValueError):
        NoiseModel(dropout_prob=1.5)
    with pytest.raises(ValueError):
        NoiseModel(position_jitter=-1)
    with pytest.raises(ValueError):
        NoiseModel(confusion=np.array([[0.5, 0.4], [0, 1]]))
    c = NoiseModel.similar_confusion(lego, 0.1)
    assert np.allclose(c.sum(axis=1), 1.0, atol=1e-9)
    i, j = lego.elements.index("E4"), lego.elements.index("E4'")
    assert c[i, j] == pytest.approx(0.1) and c[j, i] == pytest.approx(0.1)
    k = lego.elements.index("E1")
    assert c[k, k] == 1.0


def test_durations():
    rng = np.random.default_rng(0)
    d = sample_durations(500, rng)
    assert min(d) >= 60 and max(d) <= 120
    assert spread_frames(10, 3) == [4, 3, 3]
    with pytest.raises(ValueError):
        spread_frames(2, 3)


def test_timeline_layout(lego, lego_graph):
    plan = enumerate_plans(lego_graph, 1)[0]
    n = len(plan) + 1
    tl = build_timeline(lego_graph, plan, [3] * n)
    assert tl.n_frames == 3 * n
    assert list(tl.states()[::3]) == plan_states(lego_graph, plan)
    assert tl.entries[0].step_id is None and tl.entries[1].step_id == plan[0]
    with pytest.raises(ValueError):
        build_timeline(lego_graph, plan, [3])
    with pytest.raises(ValueError):
        build_timeline(lego_graph, plan, [0] * n)


def test_gt_csv_roundtrip(tmp_path, lego, lego_graph):
    s = random_session(lego, lego_graph, seed=5, step_frames=10, step_jitter=3)
    s.timeline.write_csv(tmp_path / "gt.csv")
    assert GroundTruthTimeline.read_csv(tmp_path / "gt.csv") == s.timeline


def observations(session, smoothing=False):
    fuse = FusionPipeline(ObservationLayout.for_task(session.task),
                          {c.camera_id: c for c in session.rig.cameras}, session.rig.regions(),
                          smoothing=smoothing)
    for msgs in session.frames():
        yield fuse({m.camera_id: m.detections for m in msgs})


def test_noise_free_closure_exact(lego, lego_graph):
    s = random_session(lego, lego_graph, seed=2, step_frames=2, step_jitter=0)
    E = expected_matrix(lego_graph, lego)
    for y, st in zip(observations(s), s.timeline.states()):
        np.testing.assert_array_equal(y, E[st])


def test_dropout_one_gives_zero(lego, lego_graph):
    s = random_session(lego, lego_graph, seed=2, dropout=1.0, step_frames=2, step_jitter=0)
    for msgs in s.frames():
        assert all(not m.detections for m in msgs)
    assert all(not y.any() for y in observations(s))


def test_dropout_presence_frequency(lego, lego_graph):
    s = random_session(lego, lego_graph, seed=11, dropout=0.2, frames=2000)
    E = expected_matrix(lego_graph, lego)
    hits = total = 0
    for y, st in zip(observations(s), s.timeline.states()):
        on = E[st] > 0.5
        hits += int((y[on] > 0).sum())
        total += int(on.sum())
        assert not y[~on].any()
    assert abs(hits / total - (1 - 0.2 ** 3)) <= 0.03


def test_deterministic_streams(lego, lego_graph):
    def stream(seed):
        s = random_session(lego, lego_graph, seed=seed, dropout=0.2, confidence_jitter=0.1,
                           position_jitter=0.003, confusion=0.1, step_frames=4, step_jitter=2)
        return b"".join(encode_message(m) for msgs in s.frames() for m in msgs)

    assert stream(9) == stream(9)
    assert stream(9) != stream(10)


def test_simulated_samples_backproject(lego, lego_graph):
    s = random_session(lego, lego_graph, seed=4, position_jitter=0.004, step_frames=1, step_jitter=0)
    cams = {c.camera_id: c for c in s.rig.cameras}
    msgs = next(iter(s.frames()))
    for m in msgs:
        for d in m.detections:
            world = backproject(d, cams[m.camera_id])
            again = cams[m.camera_id].project(world)
            np.testing.assert_allclose(again[:, :2], d.depth_samples[:, :2], atol=1e-6)


def test_confidence_clamped(lego, lego_graph):
    s = random_session(lego, lego_graph, seed=3, confidence_jitter=0.5, step_frames=3, step_jitter=0)
    confs = [d.confidence for msgs in s.frames() for m in msgs for d in m.detections]
    assert min(confs) >= 0.0 and max(confs) <= 1.0 and len(set(confs)) > 10


def test_camera_skew(lego, lego_graph):
    plan = enumerate_plans(lego_graph, 1)[0]
    s = simulate(plan, lego_graph, lego, [1] * (len(plan) + 1), NoiseModel())
    msgs = next(iter(s.frames()))
    assert [m.timestamp - msgs[0].timestamp for m in msgs] == [0, 3000, 6000]
