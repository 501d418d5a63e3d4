"""One test per acceptance criterion. Each records a PASS/FAIL line that
the terminal summary prints at the end of the run.

Criteria 6 and 8 run the full command-line pipeline twice on the reference
corpus (several minutes each on one core). Criterion 7 is soft: it is
reported, never asserted. A faithful run takes over an hour, so by default
it is recomputed from the recorded run that demos/03_ablation.py writes;
``MLKD_FULL_ABLATION=1`` runs the 5-seed protocol live.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from mlkd import losses as L
from mlkd.autograd import Tensor
from mlkd.metrics import accuracy, token_micro_f1
from mlkd.triplets import generate_triplets
from oracles import brute_force_triplets, kl

N_RANDOM = 1000
RECORDED_ABLATION = Path(__file__).resolve().parents[1] / "demos" / "results" / "ablation.json"


def record(n, ok, detail):
    ACCEPTANCE[n] = ("PASS" if ok else "FAIL", detail)
    return ok


# ---------------------------------------------------------------- 1


def test_c1_gradient_fidelity():
    from mlkd.gradcheck import run_suite

    t0 = time.perf_counter()
    results = run_suite(n_coords=100, eps=1e-3)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in results)
    covered = {r.name.split("[")[0] for r in results}
    ok = all(r.ok for r in results) and covered >= set(L.LOSS_NAMES) and elapsed < 60
    ok &= all(r.n_coords >= 100 for r in results)
    record(1, ok, f"max rel err {worst:.2e} over {len(results)} checks, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def _teacher_batch(rng, n=8):
    widths = [16, 32, int(rng.choice([16, 32]))]
    rng.shuffle(widths)
    return [rng.normal(size=(n, w)) for w in widths]


def test_c2_algorithm_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for b in range(N_RANDOM):
        hiddens = _teacher_batch(rng)
        got = [tuple(t) for t in generate_triplets(hiddens, np.random.default_rng(b))]
        want = brute_force_triplets(hiddens, np.random.default_rng(b))
        mismatches += got != want
    record(2, mismatches == 0, f"{mismatches} mismatches over {N_RANDOM} batches")
    assert mismatches == 0


# ---------------------------------------------------------------- 3


def _probs(rng, shape):
    z = rng.normal(scale=2.0, size=shape)
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _property_checks(rng):
    failures = {}

    def fail(name):
        failures[name] = failures.get(name, 0) + 1

    for _ in range(N_RANDOM):
        n, k, n_t = int(rng.integers(1, 6)), int(rng.integers(2, 7)), int(rng.integers(1, 4))
        teachers = [_probs(rng, (n, k)) for _ in range(n_t)]
        s = rng.normal(size=(n, k))

        # KL: non-negative, matches an independent sum, zero iff equal
        kd = float(L.loss_kd(teachers, Tensor(s)).data)
        target = np.mean(teachers, axis=0)
        ps = np.exp(s - s.max(-1, keepdims=True))
        ps /= ps.sum(-1, keepdims=True)
        ref = np.mean([kl(target[i], ps[i]) for i in range(n)])
        if kd < -1e-9 or abs(kd - ref) > 1e-9:
            fail("kd_nonneg")
        if float(L.loss_kd(teachers, Tensor(np.log(target))).data) > 1e-9:
            fail("kd_zero_at_equal")
        if np.abs(target - ps).max() > 1e-3 and kd <= 1e-9:
            fail("kd_zero_only_at_equal")

        # cosine: bounded by the teacher count, invariant to positive scaling
        vt = [rng.normal(size=(n, k)) for _ in range(n_t)]
        sim = float(L.loss_sim(vt, Tensor(s)).data)
        if not -n_t - 1e-9 <= sim <= n_t + 1e-9:
            fail("sim_bounds")
        c1, c2 = float(rng.uniform(0.01, 100)), rng.uniform(0.01, 100, size=n_t)
        scaled = float(L.loss_sim([v * c for v, c in zip(vt, c2)], Tensor(s * c1)).data)
        if abs(scaled - sim) > 1e-9:
            fail("sim_scale")

        # triplet margin: zero when the negative is far enough, margin when pos == neg
        d = int(rng.integers(2, 8))
        margin = float(rng.uniform(0.05, 1.0))
        a, p = rng.normal(size=d), rng.normal(size=d)
        d_ap = np.linalg.norm(a - p)
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        neg = a + direction * (d_ap + margin + float(rng.uniform(0.01, 2.0)))
        pooled = Tensor(np.stack([a, p, neg]))
        if float(L.loss_rel(pooled, [(0, 1, 2)], margin).data) != 0.0:
            fail("rel_zero_region")
        same = Tensor(np.stack([a, p, p]))
        if abs(float(L.loss_rel(same, [(0, 1, 2)], margin).data) - margin) > 1e-9:
            fail("rel_pos_eq_neg")

        # tp: sum over teachers, so duplicates scale it linearly
        one = float(L.loss_tp(teachers[:1], Tensor(s)).data)
        m = int(rng.integers(2, 5))
        if abs(float(L.loss_tp(teachers[:1] * m, Tensor(s)).data) - m * one) > 1e-9:
            fail("tp_duplicate")
        split = sum(float(L.loss_tp([t], Tensor(s)).data) for t in teachers)
        if abs(float(L.loss_tp(teachers, Tensor(s)).data) - split) > 1e-9:
            fail("tp_additive")

        # total equals the sum of enabled components
        names = [x for x in L.LOSS_NAMES if rng.random() < 0.6] or ["kd"]
        cfg = L.LossConfig(frozenset(names))
        parts = {x: Tensor(np.array(rng.normal())) for x in names}
        bd = L.total_loss(parts, cfg)
        want = sum(float(parts[x].data) for x in cfg.ordered())
        if abs(bd.total - want) > 1e-9 or abs(float(bd.objective.data) - want) > 1e-9:
            fail("total_sum")
    return failures


def test_c3_loss_properties():
    failures = _property_checks(np.random.default_rng(3))
    record(3, not failures, f"{N_RANDOM} instances per property, failures: {failures or 'none'}")
    assert not failures


# ---------------------------------------------------------------- 4


def test_c4_vote_monotone_invariance():
    rng = np.random.default_rng(4)
    diff = 0
    for b in range(N_RANDOM):
        hiddens = _teacher_batch(rng, n=int(rng.integers(3, 17)))
        sq = generate_triplets(hiddens, np.random.default_rng(b), "squared_euclidean")
        eu = generate_triplets(hiddens, np.random.default_rng(b), "euclidean")
        diff += sq != eu
    record(4, diff == 0, f"{diff} differing batches over {N_RANDOM}")
    assert diff == 0


# ---------------------------------------------------------------- 5


def test_c5_metric_oracles():
    rng = np.random.default_rng(5)
    unequal = 0
    for _ in range(N_RANDOM):
        k = int(rng.integers(2, 8))
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 12)))
        gold = rng.integers(0, k, size=shape)
        pred = np.where(rng.random(shape) < 0.6, gold, rng.integers(0, k, size=shape))
        unequal += token_micro_f1(pred, gold, n_classes=k) != accuracy(pred.ravel(), gold.ravel())
    gold, pred = np.array([[0, 1, 2, 0, 3]]), np.array([[0, 1, 0, 0, 3]])
    example = token_micro_f1(pred, gold, mode="exclude-O")
    drift = 0
    for _ in range(N_RANDOM):
        extra = int(rng.integers(1, 20))
        g2 = np.concatenate([gold, np.zeros((1, extra), int)], axis=1)
        p2 = np.concatenate([pred, np.zeros((1, extra), int)], axis=1)
        perm = rng.permutation(g2.shape[1])
        g2, p2 = g2[:, perm], p2[:, perm]
        drift += token_micro_f1(p2, g2, mode="exclude-O") != example
    ok = unequal == 0 and math.isclose(example, 0.8) and drift == 0
    record(5, ok, f"all-mode != accuracy: {unequal}/{N_RANDOM}; exclude-O example {example:.4f}; "
                  f"O-O drift {drift}/{N_RANDOM}")
    assert ok


# ---------------------------------------------------------------- 6 and 8


def run_pipeline(root):
    """The documented pipeline: generate, three teachers, probes, three students.

    Runs with ``root`` as working directory and relative paths, so two runs
    in different roots write byte-comparable reports.
    """
    from mlkd.cli import main

    cwd = os.getcwd()
    os.makedirs(root, exist_ok=True)
    os.chdir(root)
    try:
        t0 = time.perf_counter()
        steps = [["gen-data", "--out", "data"]]
        steps += [["train-teacher", "--task", t, "--corpus", "data/corpus.json", "--out", f"t-{t}"] for t in ("id", "sf", "dc")]
        steps += [["train-probes", "--teacher", f"t-{t}/teacher-{t}", "--corpus", "data/corpus.json", "--out", f"p-{t}"]
                  for t in ("id", "sf", "dc")]
        teachers = ",".join(f"p-{t}/teacher" for t in ("id", "sf", "dc"))
        steps += [["distill", "--task", t, "--teachers", teachers, "--corpus", "data/corpus.json", "--out", f"s-{t}"]
                  for t in ("id", "sf", "dc")]
        for argv in steps:
            code = main(argv)
            assert code == 0, f"{argv[0]} exited with {code}"
        return time.perf_counter() - t0
    finally:
        os.chdir(cwd)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline-a")
    return root, run_pipeline(root)


def test_c6_end_to_end(pipeline):
    from mlkd.checkpoint import load_checkpoint
    from mlkd.corpus import load_corpus
    from mlkd.metrics import evaluate

    root, elapsed = pipeline
    corpus = load_corpus(root / "data" / "corpus.json")
    teacher_acc = {}
    for t in ("id", "sf", "dc"):
        ck = load_checkpoint(root / f"t-{t}" / f"teacher-{t}")
        teacher_acc[t] = evaluate(ck.model, corpus, "train", t, vocab=ck.vocab, catalog=ck.catalog).value
    student = {t: json.loads((root / f"s-{t}" / "report-test.json").read_text())["value"] for t in ("id", "sf", "dc")}
    ok = (min(teacher_acc.values()) >= 0.90 and min(student.values()) >= 0.85 and elapsed < 600
          and sorted(corpus.split_sizes().values()) == [20, 20, 160])
    fmt = lambda d: " ".join(f"{k.upper()}={v:.3f}" for k, v in d.items())
    record(6, ok, f"teachers(train) {fmt(teacher_acc)}; students(test) {fmt(student)}; {elapsed:.0f}s")
    assert ok


def test_c8_determinism(pipeline, tmp_path_factory):
    root_a, _ = pipeline
    root_b = tmp_path_factory.mktemp("pipeline-b")
    run_pipeline(root_b)
    files = ["data/corpus.json"]
    for t in ("id", "sf", "dc"):
        files += [f"s-{t}/history.jsonl", f"s-{t}/report-dev.json", f"s-{t}/report-test.json",
                  f"t-{t}/teacher-{t}/params.bin", f"s-{t}/student/params.bin"]
    differ = [f for f in files if (root_a / f).read_bytes() != (root_b / f).read_bytes()]
    record(8, not differ, f"{len(files) - len(differ)}/{len(files)} files byte-identical"
                          + (f"; differ: {differ}" if differ else ""))
    assert not differ


# ---------------------------------------------------------------- 7 (soft)


def test_c7_ablation_trend(pipeline, tmp_path_factory):
    from mlkd.ablation import AblationResult, run_ablation

    root, _ = pipeline
    if os.environ.get("MLKD_FULL_ABLATION") == "1":
        teachers = {t.upper(): root / f"p-{t}" / "teacher" for t in ("id", "sf", "dc")}
        res = run_ablation(root / "data" / "corpus.json", teachers, tmp_path_factory.mktemp("ablation"),
                           [0, 100, 200, 300, 400])
        source = "full protocol, run now"
    else:
        # most cells reach their best epoch between 60 and 100, so no
        # shorter live run is a faithful stand-in; recompute from the record
        recorded = RECORDED_ABLATION
        if not recorded.exists():
            ACCEPTANCE[7] = ("NOT RUN (soft)", f"no recorded run at {recorded.name}; set MLKD_FULL_ABLATION=1")
            pytest.skip("no recorded ablation run")
        raw = json.loads(recorded.read_text())
        res = AblationResult(scores=raw["scores"])
        assert all(len(v) == len(raw["seeds"]) for by in res.scores.values() for v in by.values())
        source = f"recorded full run ({len(raw['seeds'])} seeds, demos/results/ablation.json), not re-run"
    margins = " ".join(f"{t}={m:+.3f}" for t, m in res.margins().items())
    status = "PASS" if res.passed() else "FAIL"
    ACCEPTANCE[7] = (f"{status} (soft)", f"{source}; three-teacher minus best single: {margins}")
    print("\n" + res.table())
    if not res.passed():
        import warnings

        warnings.warn(f"ablation trend not met: {margins}")
