"""Acceptance criteria 1-12, one test each, at their pinned tolerances.

Every test records a PASS/FAIL line that is printed in the pytest summary.
Criteria 6-9 share one run of the bundled desk-scale benchmark (5 seeds).
"""

import itertools
import time

import numpy as np
import pytest

from bgsplit.data import (build_bg_manifest, generate_synthetic_longtail, read_manifest,
                          write_manifest)
from bgsplit.experiments import (bundled_spec, run_factor_analysis, run_pseudolabel_study,
                                 run_transfer_study, ExperimentSpec)
from bgsplit.losses import bg_thresholded_softmax, log_softmax_rows, loss_gradients
from bgsplit.metrics import (average_precision, average_precision_rows, evaluate, f1_per_class,
                             read_report, write_report)
from bgsplit.model import init_params, load_checkpoint, save_checkpoint
from bgsplit.pseudolabels import PseudoLabelSource, attach_pseudolabels, kmeans_cluster
from bgsplit.trainer import SGDState, TrainConfig, sgd_step

from conftest import oracle_setup, random_instance, record_criterion

SEEDS = [0, 1, 2, 3, 4]


# -- 1 -----------------------------------------------------------------------

def _batch_loss(params, X, y, t, lam):
    """Forward pass and joint loss written independently of the library."""
    h = X
    for W, b in params.trunk:
        h = np.maximum(h @ W.T + b, 0.0)
    z = h @ params.w.T + params.b
    if params.clamp_background:
        z[:, 0] = params.b0
    lp = log_softmax_rows(z)
    main = -np.maximum(lp[np.arange(len(y)), y], np.log(1e-30)).mean()
    u = h @ params.v.T + params.c
    lq = log_softmax_rows(u)
    aux = -np.maximum(lq[np.arange(len(t)), t - 1], np.log(1e-30)).mean()
    return main + lam * aux


def test_criterion_01_gradients():
    rng = np.random.default_rng(2024)
    step, rtol = 1e-5, 1e-4
    # absolute floor at round-off level of the central difference (~eps * loss / step)
    floor = 1e-9
    started = time.perf_counter()
    worst, failures = 0.0, 0
    for _ in range(100):
        params, X, y, t = random_instance(rng)
        cfg = TrainConfig(lambda_g=0.1, use_aux=True, use_thresholding=params.clamp_background,
                          b0=params.b0)
        _, grads = loss_gradients(params, (X, y, t), cfg)
        for (name, p), (_, g) in zip(params.named_arrays(), grads.named_arrays()):
            for idx in np.ndindex(p.shape):
                if params.clamp_background and name in ("w", "b") and idx[0] == 0:
                    assert g[idx] == 0.0
                    continue
                old = p[idx]
                p[idx] = old + step
                up = _batch_loss(params, X, y, t, 0.1)
                p[idx] = old - step
                down = _batch_loss(params, X, y, t, 0.1)
                p[idx] = old
                num = (up - down) / (2 * step)
                err = abs(g[idx] - num)
                scale = max(abs(g[idx]), abs(num))
                if scale > 1e-6:
                    worst = max(worst, err / scale)
                failures += err > rtol * scale and err > floor
    elapsed = time.perf_counter() - started
    ok = failures == 0 and elapsed < 10
    record_criterion(1, ok, f"100 instances, worst rel err {worst:.2e} (tol 1e-4), "
                            f"{failures} failures, {elapsed:.1f}s (< 10s)")
    assert ok


# -- 2 -----------------------------------------------------------------------

def test_criterion_02_thresholded_softmax():
    rng = np.random.default_rng(7)
    started = time.perf_counter()
    worst_sum, worst_shift, mono_bad = 0.0, 0.0, 0
    for _ in range(10_000):
        n = int(rng.integers(1, 9))
        z = rng.uniform(-10, 10, n)
        b0 = float(rng.uniform(-10, 10))
        c = float(rng.uniform(0.1, 3))
        k = int(rng.integers(n))
        p = bg_thresholded_softmax(z, b0)
        worst_sum = max(worst_sum, abs(p.foreground.sum() + p.background - 1))
        shifted = bg_thresholded_softmax(z + c, b0 + c)
        worst_shift = max(worst_shift, float(np.max(np.abs(shifted.slots() - p.slots())
                                                    / p.slots())))
        bumped = z.copy()
        bumped[k] += c
        q = bg_thresholded_softmax(bumped, b0)
        raised = bg_thresholded_softmax(z + c, b0)
        mono_bad += not (q.foreground[k] > p.foreground[k] and q.background < p.background)
        mono_bad += not np.all(raised.foreground > p.foreground)
    elapsed = time.perf_counter() - started
    # shifting z and b0 by c rounds the inputs themselves, so "unchanged" is
    # checked at 1e-12 relative
    ok = worst_sum <= 1e-12 and worst_shift <= 1e-12 and mono_bad == 0 and elapsed < 1.0
    record_criterion(2, ok, f"sum err {worst_sum:.1e}, shift rel err {worst_shift:.1e}, "
                            f"{mono_bad} monotonicity violations, {elapsed:.2f}s (< 1s)")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_criterion_03_clamp():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((64, 6))
    y = rng.integers(0, 4, 64)
    t = rng.integers(1, 6, 64)
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=1e-3, batch_size=8, b0=0.37)
    params = init_params(6, (8,), 3, 5, seed=1, clamp_background=True, b0=0.37)
    state = SGDState()
    zero_row = np.zeros(params.w.shape[1]).tobytes()
    b0_bytes = np.float64(0.37).tobytes()
    started = time.perf_counter()
    held = True
    for step in range(1000):
        idx = rng.choice(64, 8, replace=False)
        _, grads = loss_gradients(params, (X[idx], y[idx], t[idx]), cfg)
        sgd_step(params, grads, cfg, state)
        held &= params.w[0].tobytes() == zero_row and params.b[0:1].tobytes() == b0_bytes
    elapsed = time.perf_counter() - started
    moved = not np.array_equal(params.w[1:], init_params(6, (8,), 3, 5, seed=1,
                                                          clamp_background=True, b0=0.37).w[1:])
    ok = held and moved and state.steps == 1000 and elapsed < 30
    record_criterion(3, ok, f"(w[0], b[0]) bitwise (0, b0) after every one of {state.steps} "
                            f"steps: {held}, {elapsed:.1f}s (< 30s)")
    assert ok


# -- 4 -----------------------------------------------------------------------

def _brute_ap(ranked):
    hits, total = 0, 0.0
    for r, lab in enumerate(ranked, 1):
        if lab:
            hits += 1
            total += hits / r
    return total / hits


def test_criterion_04_ap_exhaustive():
    started = time.perf_counter()
    checked, mismatches = 0, 0
    for n in range(1, 9):
        orders = np.array(list(itertools.permutations(range(n))), dtype=float)
        rank_of = np.argsort(-orders, axis=1, kind="stable")
        oracle = {}
        for labels in itertools.product([0, 1], repeat=n):
            if not any(labels):
                continue
            lab = np.array(labels, dtype=bool)
            pos = np.broadcast_to(lab, orders.shape)
            got = average_precision_rows(orders, pos)
            ranked = lab[rank_of]
            keys = np.packbits(ranked, axis=1, bitorder="little")[:, 0]
            for key in np.unique(keys):
                if key not in oracle:
                    seq = ranked[np.flatnonzero(keys == key)[0]]
                    oracle[key] = _brute_ap(seq.tolist())
            want = np.array([oracle[k] for k in keys])
            mismatches += int(np.count_nonzero(got != want))
            checked += len(orders)
    # the scalar entry point is the same kernel
    assert average_precision([3.0, 1.0, 2.0, 0.0], [1, 0, 1, 0]) == 1.0
    elapsed = time.perf_counter() - started
    ok = mismatches == 0 and elapsed < 60
    record_criterion(4, ok, f"{checked} (labeling, ordering) pairs for n <= 8, {mismatches} "
                            f"inexact, {elapsed:.1f}s (< 60s)")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_criterion_05_hand_checks():
    _, _, f1 = f1_per_class([1, 1, 0, 0, 1, 0], [1, 1, 1, 1, 0, 0], 1)
    ap = average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    m, params = oracle_setup(N=4)
    rep = evaluate(params, m, TrainConfig())
    ok = (abs(f1[0] - 4 / 7) <= 1e-15 and abs(ap - 5 / 6) <= 1e-15
          and rep.mAP == 1.0 and rep.meanF1 == 1.0)
    record_criterion(5, ok, f"F1 {f1[0]:.15f} (4/7), AP {ap:.15f} (5/6), oracle mAP {rep.mAP} "
                            f"meanF1 {rep.meanF1}")
    assert ok


# -- 6-9: bundled benchmark ---------------------------------------------------

@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    times = {}
    started = time.perf_counter()
    factor = run_factor_analysis(bundled_spec("factor"), out)
    times["factor"] = time.perf_counter() - started
    started = time.perf_counter()
    pseudo = run_pseudolabel_study(bundled_spec("pseudolabel"), out)
    times["pseudolabel"] = time.perf_counter() - started
    started = time.perf_counter()
    transfer = run_transfer_study(bundled_spec("transfer"), out)
    times["transfer"] = time.perf_counter() - started
    src = generate_synthetic_longtail(**bundled_spec().dataset["synthetic"])
    bg = build_bg_manifest(src, bundled_spec().foreground).background_fraction
    return {"factor": factor, "pseudo": pseudo, "transfer": transfer, "times": times, "bg": bg}


def test_criterion_06_bgsplit_beats_ft(benchmark):
    f = benchmark["factor"]
    both, ft = f.mean_map("Both"), f.mean_map("FT")
    seconds = benchmark["times"]["factor"]
    ok = benchmark["bg"] >= 0.99 and both - ft >= 0.05 and seconds < 600
    record_criterion(6, ok, f"background {benchmark['bg']:.4f} (>= 0.99), BG Splitting "
                            f"{both:.3f} vs FT {ft:.3f}: +{100 * (both - ft):.1f} points (>= 5), "
                            f"{seconds:.0f}s (< 600s)")
    assert ok


def test_criterion_07_factor_ordering(benchmark):
    f = benchmark["factor"]
    m = {k: f.mean_map(k) for k in ("FT", "+Aux", "+Thresh", "Both")}
    ok = m["Both"] > m["+Aux"] > m["FT"] and m["Both"] > m["+Thresh"] > m["FT"]
    record_criterion(7, ok, "seed-mean mAP " + ", ".join(f"{k} {v:.3f}" for k, v in m.items()))
    assert ok


def test_criterion_08_pseudolabel_ordering(benchmark):
    p = benchmark["pseudo"]
    m = {k: p.mean_map("BG", k) for k in ("cluster", "none", "random")}
    ok = m["cluster"] > m["none"] >= m["random"]
    record_criterion(8, ok, "seed-mean mAP " + ", ".join(f"{k} {v:.3f}" for k, v in m.items()))
    assert ok


def test_criterion_09_transfer(benchmark):
    t = benchmark["transfer"]
    m = {k: t.mean_map(k) for k in ("head-on-FT", "head-on-BGSplit", "full-BGSplit")}
    ok = (m["head-on-BGSplit"] > m["head-on-FT"] and m["full-BGSplit"] > m["head-on-BGSplit"]
          and m["full-BGSplit"] > m["head-on-FT"])
    record_criterion(9, ok, "seed-mean mAP " + ", ".join(f"{k} {v:.3f}" for k, v in m.items()))
    assert ok


# -- 10 ----------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    spec = ExperimentSpec.from_dict({
        "dataset": {"synthetic": {"n_categories": 15, "zipf_s": 1.2, "examples_total": 3000,
                                  "d": 12, "center_distance": 3.0, "latent_dim": 4}},
        "foreground": ["c012", "c013", "c014"],
        "pseudolabels": {"variant": "cluster", "K": 8},
        "train": {"epochs": 4, "batch_size": 256, "trunk_shape": [32]},
        "seeds": [0, 1],
    })
    run_factor_analysis(spec, tmp_path / "a")
    run_factor_analysis(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.name in ("checkpoint.json", "report.csv", "summary.csv", "means.csv"))
    differ = [str(f) for f in files
              if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = len(files) == 8 * 2 + 2 and not differ
    record_criterion(10, ok, f"{len(files)} checkpoints and metric CSVs compared, "
                             f"{len(differ)} differ")
    assert ok


# -- 11 ----------------------------------------------------------------------

def _lloyd_oracle(X, C):
    C = C.copy()
    while True:
        a = np.array([min(range(len(C)), key=lambda k: float(((x - C[k]) ** 2).sum())) for x in X])
        new = np.array([X[a == k].mean(0) for k in range(len(C))])
        if np.array_equal(new, C):
            return a, C
        C = new


def test_criterion_11_kmeans():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((400, 5)) * 2 + 3
    single = kmeans_cluster(X, 1, seed=0, minibatch_size=64)
    mean_err = float(np.max(np.abs(single.centroids[0] - X.mean(0))))

    blobs = np.vstack([rng.normal(-5, 0.4, (30, 2)), rng.normal(5, 0.4, (45, 2))])
    two = kmeans_cluster(blobs, 2, seed=1, minibatch_size=16)
    ref_a, ref_C = _lloyd_oracle(blobs, blobs[[0, 30]])
    perm = np.argsort(two.centroids[:, 0])
    same_partition = np.array_equal(np.argsort(perm)[two.assignments - 1], ref_a)
    centroid_err = float(np.max(np.abs(two.centroids[perm] - ref_C)))

    Y = rng.standard_normal((1500, 6))
    hist = kmeans_cluster(Y, 12, seed=2, minibatch_size=100, max_iters=60).inertia_history
    monotone = all(b <= a for a, b in zip(hist, hist[1:]))
    ok = mean_err <= 1e-9 and same_partition and centroid_err <= 1e-9 and monotone
    record_criterion(11, ok, f"K=1 mean err {mean_err:.1e} (<= 1e-9), two-blob partition matches "
                             f"Lloyd: {same_partition} (centroid err {centroid_err:.1e}), inertia "
                             f"non-increasing over {len(hist)} passes: {monotone}")
    assert ok


# -- 12 ----------------------------------------------------------------------

def test_criterion_12_round_trips(tmp_path):
    src = generate_synthetic_longtail(8, 1.0, 400, 5, seed=2)
    m = attach_pseudolabels(build_bg_manifest(src, ["c006", "c007"]),
                            PseudoLabelSource("cluster", K=3, seed=0))
    write_manifest(m, tmp_path / "m1.jsonl")
    write_manifest(read_manifest(tmp_path / "m1.jsonl"), tmp_path / "m2.jsonl")

    params = init_params(5, (7, 4), 2, 3, seed=5, clamp_background=True, b0=0.1)
    params.w[1:] += np.random.default_rng(0).standard_normal(params.w[1:].shape) / 3
    save_checkpoint(params, tmp_path / "c1.json", {"note": "x"})
    p2, extra = load_checkpoint(tmp_path / "c1.json")
    save_checkpoint(p2, tmp_path / "c2.json", extra)

    rep = evaluate(params, m, TrainConfig())
    write_report(rep, tmp_path / "r1")
    write_report(read_report(tmp_path / "r1" / "report.json"), tmp_path / "r2")

    pairs = [("m1.jsonl", "m2.jsonl"), ("c1.json", "c2.json"),
             ("r1/report.json", "r2/report.json"), ("r1/report.csv", "r2/report.csv")]
    same = {a: (tmp_path / a).read_bytes() == (tmp_path / b).read_bytes() for a, b in pairs}
    ok = all(same.values())
    record_criterion(12, ok, "write -> read -> write identical bytes: " +
                             ", ".join(f"{k.split('/')[-1]} {v}" for k, v in same.items()))
    assert ok
