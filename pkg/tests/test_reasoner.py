import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from assembly_monitor.fusion import DimensionMismatchError, ObservationLayout
from assembly_monitor.planner import transition_matrix
from assembly_monitor.reasoner import (BeliefState, DeviationMonitor, StateEstimator, Trellis,
                                       current_belief, deviation_check, expected_matrix,
                                       expected_observation, observation_likelihood,
                                       path_log_prob, read_timeline, viterbi_init, viterbi_path,
                                       viterbi_step, write_timeline)
from assembly_monitor.task import Configuration, Predicate
from oracles import viterbi as oracle_viterbi

P = Predicate


def test_expected_contain(lego):
    layout = ObservationLayout.for_task(lego)
    y = expected_observation(Configuration.of([P("do_contain", ("T_in", "E4"))]), lego, layout)
    assert y[layout.index("E4", "T_in")] == 1.0 and y.sum() == 1.0


def test_expected_mounted_goes_to_work_tray(lego):
    layout = ObservationLayout.for_task(lego)
    y = expected_observation(Configuration.of([P("is_mounted", ("E4",))]), lego, layout)
    assert y[layout.index("E4", "T_work")] == 1.0 and y.sum() == 1.0


def test_expected_empty(lego):
    assert not expected_observation(Configuration(), lego).any()


def test_expected_initial_lego(lego):
    layout = ObservationLayout.for_task(lego)
    y = expected_observation(lego.initial, lego, layout)
    on = {layout.labels()[k] for k in np.flatnonzero(y)}
    assert on == {("E1", "T_work"), ("E2", "T_work"), ("E3", "T_work"), ("E4'", "T_work"),
                  ("E5'", "T_work"), ("E6'", "T_work"), ("E4", "T_in"), ("E5", "T_in"),
                  ("E6", "T_in")}


def test_lego_states_distinguishable(lego, lego_graph):
    E = expected_matrix(lego_graph, lego)
    assert len({row.tobytes() for row in E}) == lego_graph.n_states


def test_likelihood_values():
    e = np.array([1.0, 0.0, 0.0])
    assert observation_likelihood(e, e, 0.5) == 0.0
    y = np.array([1.0, 0.3, 0.4])  # residual norm 0.5
    assert observation_likelihood(y, e, 0.5) == pytest.approx(-1.0, abs=1e-15)
    assert math.exp(observation_likelihood(y, e, 0.5)) == pytest.approx(0.36788, abs=1e-5)
    assert observation_likelihood(y, e, 1.0) == pytest.approx(-0.5)
    assert observation_likelihood(y, e, 0.5, norm="l1") == pytest.approx(-1.4)


def test_likelihood_matrix_and_errors():
    E = np.eye(3)
    ll = observation_likelihood(np.array([1.0, 0, 0]), E, 0.5)
    assert ll.shape == (3,) and np.argmax(ll) == 0
    with pytest.raises(ValueError):
        observation_likelihood(np.zeros(3), E, 0.0)
    with pytest.raises(DimensionMismatchError):
        observation_likelihood(np.zeros(4), E)


def test_init_only_initial_state_finite():
    E = np.eye(3)
    tr = viterbi_init(np.array([0.0, 1.0, 0.0]), E)
    assert np.isfinite(tr.last).tolist() == [True, False, False]
    assert viterbi_init(E[0], E).last[0] == 0.0
    y = np.array([1.0, 0.3, 0.4])
    assert viterbi_init(y, np.array([[1.0, 0, 0]]), sigma=0.5).last[0] == pytest.approx(-1.0)


def test_single_state_accumulates():
    E = np.array([[1.0, 0.0]])
    tm = np.array([[1.0]])
    ys = [np.array([1.0, 0.5]), np.array([0.5, 0.0]), np.array([1.0, 0.0])]
    tr = viterbi_init(ys[0], E)
    for y in ys[1:]:
        viterbi_step(tr, y, E, tm)
    assert tr.last[0] == pytest.approx(sum(observation_likelihood(y, E[0]) for y in ys))
    assert viterbi_path(tr) == [0, 0, 0]


def test_single_column_path():
    tr = viterbi_init(np.zeros(2), np.eye(2), prior=np.array([0.5, 0.5]))
    assert viterbi_path(tr) == [0]


def test_ties_go_to_smallest_index():
    E = np.zeros((3, 2))
    tm = np.full((3, 3), 1 / 3)
    tr = viterbi_init(np.zeros(2), E, prior=np.full(3, 1 / 3))
    viterbi_step(tr, np.zeros(2), E, tm)
    assert tr.backpointers[-1].tolist() == [0, 0, 0]
    assert viterbi_path(tr) == [0, 0]


def random_instance(rng, n, t_len, dim=4):
    mask = rng.random((n, n)) < 0.5
    np.fill_diagonal(mask, True)
    a = rng.random((n, n)) * mask
    a /= a.sum(axis=1, keepdims=True)
    E = (rng.random((n, dim)) < 0.5).astype(float)
    ys = rng.random((t_len, dim))
    sigma = float(rng.uniform(0.2, 1.0))
    prior = None if rng.random() < 0.5 else rng.dirichlet(np.ones(n))
    return a, E, ys, sigma, prior


def run_viterbi(a, E, ys, sigma, prior, norm="l2"):
    tr = viterbi_init(ys[0], E, sigma=sigma, prior=prior, norm=norm)
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
    for y in ys[1:]:
        viterbi_step(tr, y, E, a, norm=norm, log_transitions=log_a)
    return tr, log_a


@pytest.mark.parametrize("seed", range(20))
def test_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    n, t_len = int(rng.integers(1, 7)), int(rng.integers(1, 9))
    a, E, ys, sigma, prior = random_instance(rng, n, t_len)
    tr, log_a = run_viterbi(a, E, ys, sigma, prior)
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior) if prior is not None else np.where(np.arange(n) == 0, 0.0, -np.inf)
    ll = np.array([observation_likelihood(y, E, sigma) for y in ys]).reshape(t_len, n)
    best, seq = oracle_viterbi(ll, log_a, log_prior)
    path = viterbi_path(tr)
    assert abs(path_log_prob(path, ll, log_a, log_prior) - best) <= 1e-9
    assert abs(tr.last.max() - best) <= 1e-9
    assert tuple(path) == seq


@pytest.mark.parametrize("seed", range(20))
def test_exact_ties_match_oracle(seed):
    # L1 residuals of half-integer vectors with sigma 0.5 are integers, so
    # equal-score paths are exactly equal and tie-breaking is exercised.
    rng = np.random.default_rng(1000 + seed)
    n, t_len = int(rng.integers(2, 6)), int(rng.integers(2, 7))
    E = rng.integers(0, 2, (n, 3)).astype(float)
    ys = rng.integers(0, 3, (t_len, 3)) / 2.0
    a = np.ones((n, n)) / n
    tr, log_a = run_viterbi(a, E, ys, 0.5, np.ones(n) / n, norm="l1")
    log_prior = np.full(n, math.log(1 / n))
    ll = np.array([observation_likelihood(y, E, 0.5, "l1") for y in ys])
    _, seq = oracle_viterbi(ll, log_a, log_prior)
    assert tuple(viterbi_path(tr)) == seq


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_scale_invariance(seed, k):
    # scaling observations, templates and sigma together leaves every score alone
    rng = np.random.default_rng(seed)
    a, E, ys, sigma, prior = random_instance(rng, 4, 6)
    p1 = viterbi_path(run_viterbi(a, E, ys, sigma, prior)[0])
    p2 = viterbi_path(run_viterbi(a, E * k, ys * k, sigma * k, prior)[0])
    assert p1 == p2


def test_backpointers_reach_initial(lego, lego_graph):
    tm = transition_matrix(lego_graph)
    E = expected_matrix(lego_graph, lego)
    rng = np.random.default_rng(0)
    tr = viterbi_init(rng.random(E.shape[1]), E, tm)
    for _ in range(30):
        viterbi_step(tr, rng.random(E.shape[1]), E, tm)
    for k in np.flatnonzero(np.isfinite(tr.last)):
        s = int(k)
        for t in range(len(tr.columns) - 1, 0, -1):
            s = int(tr.backpointers[t][s])
            assert np.isfinite(tr.columns[t - 1][s])
        assert s == 0


def test_no_underflow_long_run(lego, lego_graph):
    tm = transition_matrix(lego_graph)
    E = expected_matrix(lego_graph, lego)
    rng = np.random.default_rng(1)
    tr = viterbi_init(E[0], E, tm)
    log_a = tm.log_probs
    for _ in range(10_000):
        viterbi_step(tr, rng.random(E.shape[1]), E, tm, log_transitions=log_a)
    finite = tr.last[np.isfinite(tr.last)]
    assert finite.size > 0 and np.all(np.abs(finite) < 1e300)
    assert len(viterbi_path(tr)) == 10_001


def test_compaction_bounds_memory():
    rng = np.random.default_rng(4)
    a, E, ys, sigma, prior = random_instance(rng, 4, 60)
    full, log_a = run_viterbi(a, E, ys, sigma, prior)
    small = viterbi_init(ys[0], E, sigma=sigma, prior=prior, window=8)
    for y in ys[1:]:
        viterbi_step(small, y, E, a, log_transitions=log_a)
        assert len(small.columns) <= 8
    path = viterbi_path(small)
    assert len(path) == len(ys)
    assert path[-4:] == viterbi_path(full)[-4:]
    np.testing.assert_allclose(small.last, full.last)


def test_belief_examples():
    tr = Trellis(sigma=0.5, columns=[np.array([-np.inf, -3.0, -np.inf])])
    b = current_belief(tr)
    assert b.probs.tolist() == [0.0, 1.0, 0.0] and b.map_state == 1
    b = current_belief(Trellis(0.5, [np.array([-2.0, -2.0])]))
    assert b.probs.tolist() == [0.5, 0.5] and b.map_state == 0
    b = current_belief(Trellis(0.5, [np.array([0.0, -1.0])]))
    assert b.probs == pytest.approx([0.7311, 0.2689], abs=1e-4)


@given(st.lists(st.floats(-50, 0), min_size=1, max_size=10), st.floats(-100, 100))
def test_belief_normalized_and_shift_invariant(col, c):
    col = np.array(col)
    b1 = current_belief(Trellis(0.5, [col]))
    b2 = current_belief(Trellis(0.5, [col + c]))
    assert b1.probs.sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(b1.probs, b2.probs, atol=1e-9)


def belief(max_p, n=10):
    p = np.full(n, (1 - max_p) / (n - 1))
    p[3] = max_p
    return BeliefState(p, 3)


def test_deviation_peaked_no_warning():
    m = DeviationMonitor(0.3, 15)
    assert all(m.update(belief(0.95)) is None for _ in range(50))


def test_deviation_uniform_warns():
    m = DeviationMonitor(0.3, 15)
    uniform = BeliefState(np.full(10, 0.1), 0)
    out = [m.update(uniform) for _ in range(15)]
    assert out[:14] == [None] * 14
    w = out[14]
    assert w is not None and w.low_frames == 15 and len(w.candidates) == 3


def test_deviation_resets():
    m = DeviationMonitor(0.3, 15)
    for _ in range(14):
        assert m.update(belief(0.2)) is None
    assert m.update(belief(0.9)) is None
    for _ in range(14):
        assert m.update(belief(0.2)) is None


def test_deviation_check_one_shot():
    assert deviation_check(belief(0.2), 0.3) is not None
    assert deviation_check(belief(0.5), 0.3) is None
    with pytest.raises(ValueError):
        deviation_check(belief(0.5), 1.5)


def test_estimator_follows_noise_free_plan(lego, lego_graph):
    from assembly_monitor.planner import enumerate_plans, plan_states
    tm = transition_matrix(lego_graph)
    est = StateEstimator(lego_graph, lego, tm)
    E = est.expected
    plan = enumerate_plans(lego_graph, 1)[0]
    truth = [s for s in plan_states(lego_graph, plan) for _ in range(20)]
    for s in truth:
        est.update(E[s])
    assert est.path() == truth
    assert est.results[-1].belief.map_state == lego_graph.final_index


def test_timeline_csv_roundtrip(tmp_path, lego, lego_graph):
    est = StateEstimator(lego_graph, lego, transition_matrix(lego_graph))
    for t in range(5):
        est.update(est.expected[0], timestamp=1000 + t)
    rows = est.timeline_rows()
    write_timeline(rows, tmp_path / "tl.csv")
    back = read_timeline(tmp_path / "tl.csv")
    assert [r["state_index"] for r in back] == [0] * 5
    assert [r["timestamp"] for r in back] == [1000, 1001, 1002, 1003, 1004]
    header = (tmp_path / "tl.csv").read_text().splitlines()[0]
    assert header == "frame,timestamp,state_index,belief,map_state,warning_flag"
