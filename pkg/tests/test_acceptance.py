"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as the tests run and repeated in the terminal summary.
"""

import dataclasses
import itertools
import math
import time

import numpy as np
import pytest

from georank.dataset import load_dataset, render_generation_prompt, render_prompt, write_dataset
from georank.geodesy import GeoCoordinate, geodesic_km
from georank.inference import CandidatePool, predict
from georank.losses import DistanceLabels, LossConfig, loss_first_order, loss_second_order, loss_total
from georank.losses import pair_count, second_order_count
from georank.pipeline import prepare_synthetic, run_synthetic
from georank.scorer import FeatureAssembler, FeatureLayout, ScorerState, load_checkpoint, save_checkpoint
from georank.synth import WorldSpec
from georank.vector_store import AdapterPair, QueryRecord

import oracles
from conftest import random_store
from test_dataset import GOLDEN, populated_triplet, synthetic_triplets

RESULTS = {}
SEEDS = range(5)


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


def instance(rng, k1=None):
    k1 = k1 or int(rng.integers(2, 9))
    K1 = int(rng.integers(1, k1 + 1))
    return k1, K1, rng.normal(0, 2, k1), rng.uniform(0, 2000, k1)


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300) if b else abs(a)


def test_1_loss_formula_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        k1, K1, s, d = instance(rng)
        lab, cfg = DistanceLabels.from_distances(d), LossConfig(k1=k1, top_k1=K1)
        worst = max(worst, rel_err(loss_first_order(s, lab, cfg)[0], oracles.first_order(list(s), list(d), K1)),
                    rel_err(loss_second_order(s, lab, cfg)[0], oracles.second_order(list(s), list(d), K1)))
    fixture = loss_second_order([3.0, 2.0, 0.0], DistanceLabels.from_distances([1, 5, 20]), LossConfig(k1=3))[0]
    chain = (-math.log(math.e ** 3 / (math.e ** 3 + math.e ** 2 + math.e))
             - math.log(math.e ** 2 / (math.e ** 2 + math.e))) / 2
    elapsed = time.perf_counter() - t0
    ok = (worst <= 1e-9 and rel_err(fixture, chain) <= 1e-12 and abs(fixture - 0.3605) < 1e-4
          and elapsed < 5)
    record(1, ok, f"max rel err {worst:.1e} over 1000 instances; fixture L2 = {fixture:.6f}; {elapsed:.2f}s")
    assert ok


def test_2_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = {"L1": 0.0, "L2": 0.0, "Ltotal": 0.0}
    for _ in range(100):
        k1, K1, s, d = instance(rng)
        lab = DistanceLabels.from_distances(d)
        for name, lam in (("L1", 1.0), ("L2", 0.0), ("Ltotal", 0.7)):
            cfg = LossConfig(k1=k1, top_k1=K1, lam=lam)
            g = loss_total(s, lab, cfg)[1]
            num = oracles.central_diff(lambda x: loss_total(x, lab, cfg)[0], s, h=1e-5)
            # elementwise; the floor keeps entries that vanish analytically from dividing by ~0
            err = float(np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-6)))
            worst[name] = max(worst[name], err)
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed < 30
    record(2, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + f" over 100 instances each; {elapsed:.2f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="unattainable as stated: at K1 = 1 the first-order loss depends "
                   "only on the nearest candidate's score, so (k1 - 1)! assignments tie for k1 >= 3")
def test_3_permutation_optimality():
    # checked as stated: the anti-monotone assignment must be the only minimizer
    rng = np.random.default_rng(3)
    unique, attains, total = 0, 0, 50
    ties = []
    for _ in range(total):
        k1 = int(rng.integers(2, 6))
        values = np.sort(rng.choice(np.linspace(-3, 3, 61), k1, replace=False))[::-1]
        d = rng.choice(np.arange(1, 200) * 7.0, k1, replace=False)
        lab, cfg = DistanceLabels.from_distances(d), LossConfig(k1=k1, top_k1=1)
        anti = tuple(int(i) for i in np.argsort(d, kind="stable"))
        losses = {}
        for perm in itertools.permutations(range(k1)):
            s = np.empty(k1)
            s[list(perm)] = values
            losses[perm] = loss_first_order(s, lab, cfg)[0]
        best = min(losses.values())
        # assignments whose losses agree to rounding are the same value
        minimizers = [p for p, v in losses.items() if v <= best + 1e-12]
        attains += losses[anti] <= best + 1e-12
        unique += minimizers == [anti]
        ties.append(len(minimizers))
    ok = unique == total
    record(3, ok, f"anti-monotone assignment attains the minimum in {attains}/{total}, is the unique "
                  f"minimizer in {unique}/{total}; minimizer counts {sorted(set(ties))} "
                  f"(with K1 = 1 the loss only sees which candidate holds the top score)")
    assert ok, "with K1 = 1 every assignment giving the nearest candidate the top score ties"


def test_3b_permutation_optimality_supporting_facts():
    # what does hold: at K1 = 1 the minimizers are exactly the (k1 - 1)! assignments
    # giving the nearest candidate the top score; at K1 = k1 the minimizer is unique
    rng = np.random.default_rng(3)
    for _ in range(50):
        k1 = int(rng.integers(2, 6))
        values = np.sort(rng.choice(np.linspace(-3, 3, 61), k1, replace=False))[::-1]
        d = rng.choice(np.arange(1, 200) * 7.0, k1, replace=False)
        lab = DistanceLabels.from_distances(d)
        anti = tuple(int(i) for i in np.argsort(d, kind="stable"))
        for K1 in (1, k1):
            cfg = LossConfig(k1=k1, top_k1=K1)
            losses = {}
            for perm in itertools.permutations(range(k1)):
                s = np.empty(k1)
                s[list(perm)] = values
                losses[perm] = loss_first_order(s, lab, cfg)[0]
            best = min(losses.values())
            mins = [p for p, v in losses.items() if v <= best + 1e-12]
            assert anti in mins
            if K1 == 1:
                assert len(mins) == math.factorial(k1 - 1) and all(p[0] == anti[0] for p in mins)
            else:
                assert mins == [anti]


def test_4_k2_identity():
    bad = [(k1, K1) for k1 in range(1, 21) for K1 in range(1, k1 + 1)
           if second_order_count(k1, K1) != sum(1 for i, j in itertools.combinations(range(k1), 2) if i < K1)
           or second_order_count(k1, K1) > pair_count(k1)]
    ok = not bad
    record(4, ok, f"formula equals enumerated pair count for all k1 <= 20, K1 <= k1 ({len(bad)} mismatches)")
    assert ok


def test_5_shift_invariance():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        k1, K1, s, d = instance(rng)
        lab, cfg = DistanceLabels.from_distances(d), LossConfig(k1=k1, top_k1=K1)
        for fn in (loss_first_order, loss_second_order):
            base = fn(s, lab, cfg)[0]
            for c in (-100.0, 3.7, 1e6):
                worst = max(worst, rel_err(fn(s + c, lab, cfg)[0], base) if base > 1e-12
                            else abs(fn(s + c, lab, cfg)[0] - base))
    ok = worst <= 1e-9
    record(5, ok, f"max rel change {worst:.1e} over 100 fixtures, c in (-100, 3.7, 1e6)")
    assert ok


def test_6_retrieval_exactness():
    mismatches = 0
    for k in range(50):
        rng = np.random.default_rng(600 + k)
        store = random_store(rng, m=1000)
        v = rng.standard_normal(store.dim)
        mismatches += store.retrieve(v, 20).ids != oracles.brute_force_ids(store, v, 20)
    ok = mismatches == 0
    record(6, ok, f"top-20 ids and order equal the full scan on {50 - mismatches}/50 stores of 1000")
    assert ok


def test_7_geodesy():
    worst = max(abs(geodesic_km(GeoCoordinate(*a), GeoCoordinate(*b))
                    / oracles.vector_angle_km(GeoCoordinate(*a), GeoCoordinate(*b)) - 1)
                for a, b in oracles.CITY_PAIRS)
    antipodal = abs(geodesic_km(GeoCoordinate(0, 0), GeoCoordinate(0, 180)) - math.pi * oracles.RADIUS_KM)
    antipodal = max(antipodal, abs(geodesic_km(GeoCoordinate(35, -20), GeoCoordinate(-35, 160))
                                   - math.pi * oracles.RADIUS_KM))
    identity = max(geodesic_km(GeoCoordinate(a, b), GeoCoordinate(a, b)) for a, b in ((0, 0), (89.9, 45), (-33, 151)))
    ok = worst <= 0.005 and antipodal <= 1e-6 and identity <= 1e-6
    record(7, ok, f"city pairs max rel dev {worst:.1e}; antipodal err {antipodal:.1e} km; identity {identity:.1e} km")
    assert ok


def test_8_oracle_dominance():
    violations = []
    for seed in range(20):
        run = prepare_synthetic(WorldSpec(seed=100 + seed, n_candidates=2000, n_queries=500, n_clusters=20))
        reps = run_synthetic(run)
        ours, best = reps["georanker"].accuracies(), reps["oracle"].accuracies()
        if any(a > b for a, b in zip(ours, best)):
            violations.append(seed)
    ok = not violations
    record(8, ok, f"GeoRanker <= oracle at all five thresholds on {20 - len(violations)}/20 synthetic runs")
    assert ok


@pytest.fixture(scope="module")
def synthetic_suite():
    """Five default worlds, each trained and evaluated at lambda 0.7 and 1.0."""
    out, t_main = [], 0.0
    for seed in SEEDS:
        t0 = time.perf_counter()
        run = prepare_synthetic(WorldSpec(seed=seed))
        full = run_synthetic(run)
        t_main += time.perf_counter() - t0
        cfg = dataclasses.replace(run.cfg, loss=dataclasses.replace(run.cfg.loss, lam=1.0))
        out.append((seed, run, full, run_synthetic(run, cfg)))
    return out, t_main


def fmt(acc):
    return "/".join(f"{a:.1f}" for a in acc)


def test_9_end_to_end_learning(synthetic_suite):
    runs, elapsed = synthetic_suite
    passed, lines = 0, []
    for seed, run, rep, _ in runs:
        g, r, t, o = (np.array(rep[k].accuracies()) for k in ("georanker", "random", "top1", "oracle"))
        beats = (g > r) & (g > t)
        ok = bool(beats.all()) and g[2] >= 0.9 * o[2]
        passed += ok
        lines.append(f"seed {seed}: {'pass' if ok else 'fail'} georanker {fmt(g)} random {fmt(r)} "
                     f"top1 {fmt(t)} oracle {fmt(o)}")
    t = runs[0][1].cfg
    ok = passed >= 3 and elapsed < 600
    record(9, ok, f"{passed}/5 seeds pass (majority needed); {elapsed:.0f}s; thresholds "
                  f"{', '.join(f'{x:g}' for x in np.array(t.eval.thresholds_km) * t.eval.threshold_scale)} km")
    for line in lines:
        print("   ", line)
    assert ok, "\n".join(lines)


def test_10_ablation_direction(synthetic_suite):
    runs, _ = synthetic_suite
    coarse = slice(2, 5)
    full = [np.mean(rep["georanker"].accuracies()[coarse]) for _, _, rep, _ in runs]
    first = [np.mean(rep["georanker"].accuracies()[coarse]) for _, _, _, rep in runs]
    ok = np.mean(full) >= np.mean(first)
    table = "  ".join(f"seed {s}: {a:.2f} vs {b:.2f}" for (s, *_), a, b in zip(runs, full, first))
    # soft criterion: logged, not asserted
    record(10, ok, f"mean coarse-threshold accuracy lambda 0.7 = {np.mean(full):.2f}, "
                   f"lambda 1.0 = {np.mean(first):.2f} (reported only) | {table}")


def test_11_determinism_and_formats(tmp_path):
    rng = np.random.default_rng(11)
    store, pairs = synthetic_triplets(rng, 50)
    triplets = [t for _, t in pairs]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(triplets, a)
    back = load_dataset(a, store, {q.id: q.emb for q, _ in pairs})
    write_dataset(back, b)
    dataset_ok = back == triplets and a.read_bytes() == b.read_bytes()

    lay = FeatureLayout.for_dims(8, 6, 10)
    st = ScorerState.init(lay, hidden=(16,), interaction=lay.query, head_scale=3.0, aligned_init=True)
    st.params["W0"] += 0.01
    save_checkpoint(st, tmp_path / "a.grsc", {"k": 1})
    st2, _ = load_checkpoint(tmp_path / "a.grsc")
    save_checkpoint(st2, tmp_path / "b.grsc", {"k": 1})
    x = rng.standard_normal((20, lay.dim)).astype(np.float32)
    ckpt_ok = ((tmp_path / "a.grsc").read_bytes() == (tmp_path / "b.grsc").read_bytes()
               and st.scores(x).tobytes() == st2.scores(x).tobytes())

    t = populated_triplet()
    golden_ok = ([render_prompt(t, i) for i in range(t.k1)]
                 == (GOLDEN / "ranking_prompts.txt").read_text(encoding="utf-8").splitlines()
                 and render_generation_prompt("im2gps3k_0042")
                 == (GOLDEN / "generation_prompt.txt").read_text(encoding="utf-8").rstrip("\n")
                 and "Suppose you are an expert in geolocalization" in render_generation_prompt("x"))

    from georank.vector_store import GpsEncoder
    enc = GpsEncoder((1.0, 2.0, 4.0, 8.0), 8, seed=3)
    cstore = random_store(rng, m=200, encoder=enc)
    asm = FeatureAssembler(enc, lay, adapters=AdapterPair.random(10, 8, 6, seed=1))
    agree = 0
    for _ in range(1000):
        idx = rng.choice(len(cstore), int(rng.integers(1, 15)), replace=False)
        pool = CandidatePool([cstore.records[i] for i in idx],
                             [GeoCoordinate(rng.uniform(-80, 80), rng.uniform(-180, 180))
                              for _ in range(int(rng.integers(0, 5)))])
        q = rng.standard_normal(10)
        p1, p2 = predict(st, asm, q, pool, workers=1), predict(st, asm, q, pool, workers=4)
        agree += (p1.chosen_source, p1.chosen_index) == (p2.chosen_source, p2.chosen_index)
    ok = dataset_ok and ckpt_ok and golden_ok and agree == 1000
    record(11, ok, f"dataset round trip {'ok' if dataset_ok else 'BROKEN'}; checkpoint "
                   f"{'ok' if ckpt_ok else 'BROKEN'}; golden prompts {'ok' if golden_ok else 'DIFFER'}; "
                   f"parallel = sequential on {agree}/1000 pools")
    assert ok
