"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Lines are also collected into an "acceptance criteria" section at the end of
the pytest run.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

from assembly_monitor.cli import bundled
from assembly_monitor.fusion import Detection2D, cloud_intersection_count, cloud_iou, smooth
from assembly_monitor.ingest import DetectionMessage, decode_message, encode_message
from assembly_monitor.pipeline import Monitor, run_replay
from assembly_monitor.planner import build_state_graph, enumerate_plans
from assembly_monitor.reasoner import observation_likelihood, path_log_prob, viterbi_path
from assembly_monitor.task import apply_step, load_task
import conftest
import oracles
from test_fusion import planted_recovery
from test_pipeline import live_timeline, record
from test_reasoner import run_viterbi

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
import run_benchmark  # noqa: E402
import run_closure  # noqa: E402


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    conftest.ACCEPTANCE[str(n)] = line
    print(line)
    assert ok, line


def viterbi_instance(i, rng):
    n, t_len = 1 + i % 6, 1 + (i // 6) % 8
    if i % 4 == 3:
        # half-integer observations under L1 and sigma 0.5 give exactly tied paths
        E = rng.integers(0, 2, (n, 3)).astype(float)
        ys = rng.integers(0, 3, (t_len, 3)) / 2.0
        return np.full((n, n), 1.0 / n), E, ys, 0.5, np.full(n, 1.0 / n), "l1"
    mask = rng.random((n, n)) < 0.6
    np.fill_diagonal(mask, True)
    a = rng.random((n, n)) * mask
    a /= a.sum(axis=1, keepdims=True)
    E = (rng.random((n, 4)) < 0.5).astype(float)
    prior = None if i % 2 else rng.dirichlet(np.ones(n))
    return a, E, rng.random((t_len, 4)), float(rng.uniform(0.2, 1.0)), prior, "l2"


def test_criterion_1_viterbi_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, mismatches = 0.0, 0
    for i in range(100):
        a, E, ys, sigma, prior, norm = viterbi_instance(i, rng)
        n = len(a)
        tr, log_a = run_viterbi(a, E, ys, sigma, prior, norm)
        path = viterbi_path(tr)
        with np.errstate(divide="ignore"):
            log_prior = np.log(prior) if prior is not None else np.where(np.arange(n) == 0, 0.0, -np.inf)
        ll = np.array([observation_likelihood(y, E, sigma, norm) for y in ys]).reshape(len(ys), n)
        best, seq = oracles.viterbi(ll, log_a, log_prior)
        worst = max(worst, abs(path_log_prob(path, ll, log_a, log_prior) - best))
        mismatches += tuple(path) != seq
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-9 and mismatches == 0 and elapsed < 10.0,
           f"100 instances, max |dlogp|={worst:.1e}, path mismatches={mismatches}, {elapsed:.2f}s")


def test_criterion_2_lego_fidelity():
    t0 = time.perf_counter()
    task = load_task(bundled("lego.task"))
    g = build_state_graph(task)
    plans = enumerate_plans(g)
    replay_ok = True
    for p in plans:
        c = task.initial
        for s in p:
            c = apply_step(c, task.steps[s])
        replay_ok &= c == task.final
    sinks = [i for i in range(g.n_states) if not g.successors(i)]
    elapsed = time.perf_counter() - t0
    counts = (len(task.objects), len(task.predicate_schemas), len(task.steps))
    ok = (counts == (13, 6, 10) and g.nodes[0] == task.initial and sinks == [g.final_index]
          and g.nodes[g.final_index] == task.final and len(plans) >= 2 and replay_ok
          and elapsed < 5.0)
    report(2, ok, f"objects/predicates/steps={counts}, states={g.n_states}, plans={len(plans)}, "
                  f"all replay to final={replay_ok}, {elapsed:.2f}s")


def test_criterion_3_fusion():
    rng = np.random.default_rng(7)
    worst, count_errors = 0.0, 0
    for _ in range(100):
        n1, n2 = rng.integers(1, 201, 2)
        p1 = rng.uniform(0, 0.1, (n1, 3))
        p2 = rng.uniform(0, 0.1, (n2, 3)) + rng.uniform(-0.02, 0.02, 3)
        r = float(rng.uniform(0.005, 0.02))
        count_errors += cloud_intersection_count(p1, p2, r) != oracles.intersection_count(p1, p2, r)
        worst = max(worst, abs(cloud_iou(p1, p2, r) - oracles.iou(p1, p2, r)))
    r = 0.01
    rates = [planted_recovery(seed, jitter=0.49 * r, r=r)[0] for seed in range(50)]
    recovery = float(np.mean(rates))
    report(3, count_errors == 0 and worst <= 1e-12 and recovery >= 0.95,
           f"100 pairs: count mismatches={count_errors}, max |dIoU|={worst:.1e}; "
           f"planted recovery at jitter 0.49r over 50 seeds={recovery:.3f}")


def test_criterion_4_noise_free_closure():
    res = run_closure.run(10_000, seed=0, tol=1)
    ok = res["precision"] == 1.0 and res["recall"] == 1.0 and res["total_s"] < 30.0
    report(4, ok, f"10,000 frames: precision={res['precision']:.4f} recall={res['recall']:.4f} "
                  f"at tol 1, {res['total_s']:.1f}s total, p95 frame latency "
                  f"{res['latency_p95_ms']:.2f}ms")


def test_criterion_5_noise_benchmark():
    results = run_benchmark.benchmark(range(20), tol=0, dropout=0.2, confidence_jitter=0.1,
                                      confusion=0.1)
    p = float(np.mean([r.precision for r in results]))
    r = float(np.mean([r.recall for r in results]))
    report(5, p >= 0.70 and r >= 0.70,
           f"20 seeds, dropout 0.2, jitter 0.1, confusion 0.1: mean precision={p:.3f} recall={r:.3f}")


def test_criterion_6_smoothing():
    rng = np.random.default_rng(6)
    bounded = asymmetric = True
    for _ in range(1000):
        dim = int(rng.integers(1, 120))
        prev, curr = rng.random(dim), rng.random(dim)
        if rng.random() < 0.2:  # exercise the ends of the range
            prev, curr = np.round(prev), np.round(curr)
        out = smooth(prev, curr, 0.7, 0.3)
        bounded &= bool(np.all(out >= np.minimum(prev, curr) - 1e-15)
                        and np.all(out <= np.maximum(prev, curr) + 1e-15)
                        and np.all((out >= 0) & (out <= 1)))
        up, down = curr > prev, curr < prev
        asymmetric &= bool(np.allclose(out[up] - prev[up], 0.7 * (curr - prev)[up], atol=1e-12, rtol=0)
                           and np.allclose(prev[down] - out[down], 0.3 * (prev - curr)[down],
                                           atol=1e-12, rtol=0)
                           and np.array_equal(out[~(up | down)], prev[~(up | down)]))
    report(6, bounded and asymmetric,
           f"1000 random vector pairs: bounded={bounded}, rise 0.7 / drop 0.3 response={asymmetric}")


def random_message(rng, i):
    dets = []
    for _ in range(int(rng.integers(0, 6))):
        k = int(rng.integers(0, 40))
        samples = rng.normal(scale=rng.choice([1e-300, 1.0, 1e300]), size=(k, 3))
        dets.append(Detection2D(int(rng.integers(0, 2**32)), tuple(rng.normal(size=4) * 1e3),
                                float(rng.random()), samples))
    cam = "".join(rng.choice(list("abcé0_"), int(rng.integers(0, 12))))
    return DetectionMessage(cam, int(rng.integers(0, 2**63)) * 2 + i % 2,
                            int(rng.integers(0, 2**63)), tuple(dets))


def test_criterion_7_protocol(tmp_path, lego, lego_graph, rig_files):
    rng = np.random.default_rng(77)
    roundtrip_failures = 0
    for i in range(1000):
        m = random_message(rng, i)
        out = decode_message(encode_message(m))
        roundtrip_failures += not (out == m and all(
            a.depth_samples.tobytes() == b.depth_samples.tobytes()
            for a, b in zip(out.detections, m.detections)))
    path = tmp_path / "session.detlog"
    record(lego, lego_graph, path, seed=21, frames=400, dropout=0.2, confidence_jitter=0.1,
           confusion=0.1)
    replayed = run_replay(Monitor(lego, *rig_files), path)
    live, _ = live_timeline(lego, rig_files, path)
    same = live == replayed
    report(7, roundtrip_failures == 0 and same and len(live) == 400,
           f"1000-message round-trip failures={roundtrip_failures}; live vs replay timelines "
           f"identical={same} over {len(live)} frames")


def test_criterion_8_out_of_scope():
    conftest.ACCEPTANCE["8"] = ("SKIP criterion 8: detector mAP tables and the industrial run "
                                "need real footage and a trained detector; criteria 4-5 stand in")
    pytest.skip("requires real annotated video and a trained detector")
