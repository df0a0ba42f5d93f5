"""Acceptance criteria 1-7, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py`` to get one pass/fail line per
criterion in the terminal summary.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from predhash import nn
from predhash.cli import main as cli_main
from predhash.data import SyntheticSpec, generate_synthetic
from predhash.encoder import DecoderModel, EncoderModel, encode_sequence, save_model
from predhash.evaluation import ap_at_k, emit_report, map_at_k
from predhash.index import (bench_search, build_codebook, hamming, pack, purge_duplicates,
                            random_codebook, search, search_distinct, session_open, session_push)
from predhash.pipeline import ExperimentConfig, run_experiment
from predhash.training import (ALPHA_GRID, TrainingConfig, la_code_loss, la_code_loss_and_grads, la_reco_loss,
                               la_reco_loss_and_grads, observed_length, primary_loss, primary_loss_and_grads)

SEEDS = (0, 1, 2)


# ------------------------------------------------------------------ 1

@pytest.mark.criterion(1, "gradients match central differences in every regime (rel 1e-3, abs 1e-5, < 1 min)")
def test_gradient_correctness(acceptance_note):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    enc, dec = EncoderModel.init(6, 8, seed=1), DecoderModel.init(6, 8, seed=2)
    X = rng.normal(size=(5, 3, 6))
    Xp = X[:observed_length(5, 0.4)]
    targets = nn.sign(rng.normal(size=(3, 8)))
    checked = 0

    def check(f, params, grads):
        nonlocal checked
        rep = nn.check_gradients(f, params, grads, rtol=1e-3, atol=1e-5)
        assert rep.ok, rep.failures[:3]
        checked += rep.checked

    # primaries train with batch statistics: ssth-rt on full batches, ssth-rt+/++ also on truncated ones
    for batch in (X, Xp):
        _, ge, gd, _ = primary_loss_and_grads(enc, dec, batch, True, relaxed=True)
        f = lambda: primary_loss(enc, dec, batch, True, relaxed=True)
        check(f, enc.params, ge)
        check(f, dec.params, gd)
    # secondaries train against the primary's frozen running statistics
    _, g, _ = la_reco_loss_and_grads(enc, dec, Xp, X, False, relaxed=True)
    check(lambda: la_reco_loss(enc, dec, Xp, X, False, True), enc.params, g)
    _, g, _ = la_code_loss_and_grads(enc, Xp, targets, False, relaxed=True)
    check(lambda: la_code_loss(enc, Xp, targets, False, True), enc.params, g)
    elapsed = time.perf_counter() - t0
    acceptance_note(f"{checked} parameter checks in {elapsed:.1f}s")
    assert elapsed < 60


# ------------------------------------------------------------------ 2

@pytest.mark.criterion(2, "session encoding equals batch encoding bit-exactly on all prefixes (< 1 min)")
def test_incremental_equals_batch(acceptance_note):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    enc = EncoderModel.init(32, 32, seed=3)
    enc.bn = nn.BatchNormState(rng.normal(0, 0.05, 32), rng.uniform(0.01, 0.1, 32))
    prefixes = 0
    for _ in range(100):
        X = rng.normal(size=(int(rng.integers(1, 41)), 32))
        s = session_open(enc)
        for t in range(1, len(X) + 1):
            code = session_push(s, X[t - 1])
            assert np.array_equal(code, encode_sequence(enc, X[:t])[0])
            prefixes += 1
    elapsed = time.perf_counter() - t0
    acceptance_note(f"{prefixes} prefixes in {elapsed:.1f}s")
    assert elapsed < 60


# ------------------------------------------------------------------ 3

def _bit_loop(a, b):
    return sum(1 for x, y in zip(a, b) if x != y)


def _ap_enumerated(rel, K):
    total = 0.0
    for j in range(1, K + 1):
        total += sum(1 for r in rel[:j] if r) / j
    return total / K


@pytest.mark.criterion(3, "hamming, search and AP/mAP equal their oracles exactly")
def test_oracles():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 257))
        a, b = rng.integers(0, 2, (2, n)) * 2 - 1
        assert hamming(pack(a), pack(b)) == _bit_loop(a, b)

    for _ in range(20):
        cb = random_codebook(500, 64, seed=int(rng.integers(1 << 30)))
        q = pack(rng.integers(0, 2, 64) * 2 - 1)
        d = [hamming(w, q) for w in cb.words]
        order = sorted(range(500), key=lambda i: (d[i], int(cb.entry_ids[i])))[:20]
        r = search(cb, q, 20)
        assert r.entry_ids.tolist() == [int(cb.entry_ids[i]) for i in order]
        assert r.distances.tolist() == [d[i] for i in order]

    lists = [list(rng.random(int(rng.integers(0, 40))) < 0.3) for _ in range(50)]
    for K in (1, 10, 20):
        aps = [_ap_enumerated(r + [False] * K, K) for r in lists]
        assert [ap_at_k(r, K) for r in lists] == aps
        assert map_at_k(lists, K) == sum(aps) / len(aps)


# ------------------------------------------------------------------ 4

@pytest.mark.criterion(4, "duplicated codebook has N_alpha x plain entries; purge is one-per-video and idempotent")
def test_codebook_arithmetic(acceptance_note):
    ds = generate_synthetic(SyntheticSpec(n_classes=5, videos_per_class=20, seed=4))
    enc = EncoderModel.init(32, 32, seed=4)
    plain = build_codebook(enc, ds.sequences)
    dup = build_codebook(enc, ds.sequences, ALPHA_GRID)
    assert len(plain) == 100 and len(dup) == len(ALPHA_GRID) * len(plain)
    assert dup.nbytes >= len(ALPHA_GRID) * plain.nbytes
    acceptance_note(f"{len(plain)} -> {len(dup)} entries")
    rng = np.random.default_rng(4)
    for seq in ds.sequences[::7]:
        q = pack(encode_sequence(enc, seq.clips[:int(rng.integers(1, len(seq) + 1))])[0])
        for K in (1, 20, 1000):
            raw = search(dup, q, K)
            once = purge_duplicates(raw)
            assert len(set(once.video_ids.tolist())) == len(once)
            assert purge_duplicates(once).rows() == once.rows()
            assert np.all(np.diff(once.distances) >= 0)
        assert len(search_distinct(dup, q, 20)) == 20


# ------------------------------------------------------------------ 5

@pytest.fixture(scope="module")
def experiments():
    return {seed: run_experiment(ExperimentConfig(seed=seed)) for seed in SEEDS}


@pytest.mark.criterion(5, "synthetic retrieval: (a) >= 3x chance, (b) alpha 0.1 < 1.0, (c) LA-CODE VE > SSTH-RT VE, "
                          "(d) LA-CODE VE >= SSTH-RT+ VE in 2 of 3 seeds")
def test_end_to_end_retrieval(experiments, acceptance_note):
    bits = ExperimentConfig().primary.n_bits
    n_classes = ExperimentConfig().data.n_classes
    chance = 1.0 / n_classes
    full = np.mean([r.report.get("ssth-rt", bits, 1.0) for r in experiments.values()])
    early = np.mean([r.report.get("ssth-rt", bits, 0.1) for r in experiments.values()])
    ve = {m: [r.summary[(m, bits)]["VE"] for r in experiments.values()] for m in ("ssth-rt", "ssth-rt+", "la-code")}
    wins = sum(c >= p for c, p in zip(ve["la-code"], ve["ssth-rt+"]))
    minutes = sum(r.seconds for r in experiments.values()) / 60
    acceptance_note(f"a: {full:.3f} vs {3 * chance:.2f}; b: {early:.3f} < {full:.3f}; "
                    f"c: {np.mean(ve['la-code']):.3f} > {np.mean(ve['ssth-rt']):.3f}; d: {wins}/3; "
                    f"{minutes:.1f} min")
    for seed, r in experiments.items():
        print(f"seed {seed}: " + ", ".join(f"{m} VE={v['VE']:.3f} O={v['O']:.3f}"
                                           for (m, _), v in sorted(r.summary.items())))
    assert full >= 3 * chance
    assert early < full
    assert np.mean(ve["la-code"]) > np.mean(ve["ssth-rt"])
    assert wins >= 2
    assert minutes < 30


# ------------------------------------------------------------------ 6

@pytest.mark.criterion(6, "ranking time linear in codebook size, independent of K; 256 bits x 42,500 << 100 ms")
def test_search_scalability(acceptance_note):
    # best of three medians damps scheduler noise on a shared machine
    def median_ms(size):
        cb = random_codebook(size, 256, seed=6)
        return min(bench_search(cb, n_queries=100, K=20, seed=i).median_ms for i in range(3))

    ratio = median_ms(85_000) / median_ms(42_500)
    cb = random_codebook(42_500, 256, seed=6)
    by_k = {K: bench_search(cb, n_queries=60, K=K) for K in (1, 20, 1000)}
    k_spread = max(r.median_ms for r in by_k.values()) / min(r.median_ms for r in by_k.values())
    acceptance_note(f"2x size -> {ratio:.2f}x; K spread {k_spread:.2f}x; "
                    f"42.5k median {by_k[20].median_ms:.2f} ms, p99 {by_k[20].p99_ms:.2f} ms")
    assert 1.3 <= ratio <= 2.7
    assert len({r.distance_computations for r in by_k.values()}) == 1
    assert k_spread < 1.5
    # "well under" read as an order of magnitude
    assert by_k[20].p99_ms < 10.0


# ------------------------------------------------------------------ 7

def _snapshot(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _small_experiment(seed):
    return ExperimentConfig(data=SyntheticSpec(n_classes=4, videos_per_class=10, n_features=8, max_length=20),
                            primary=TrainingConfig(n_bits=16, epochs=3, lr=5e-2, batch_size=8),
                            secondary=TrainingConfig.secondary(n_bits=16, epochs=2, lr=5e-3, batch_size=8),
                            seed=seed)


@pytest.mark.criterion(7, "same config and seed give bit-identical models, codebooks and reports")
def test_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    # library path: every method's models and the merged report
    for run in ("a", "b"):
        res = run_experiment(_small_experiment(5))
        out = tmp_path / "lib" / run
        out.mkdir(parents=True)
        for method, models in res.models.items():
            for i, m in enumerate(models):
                save_model(m, out / f"{method}.{i}.msh")
        emit_report(res.report, out / "report.csv")
        emit_report(res.report, out / "report.json")
    lib_a, lib_b = _snapshot(tmp_path / "lib" / "a"), _snapshot(tmp_path / "lib" / "b")
    assert len(lib_a) == 8 and lib_a == lib_b

    # operator path: every artifact the command line writes
    cfg = tmp_path / "data.cfg"
    cfg.write_text("n_classes = 3\nvideos_per_class = 8\nn_features = 8\nmax_length = 16\n")
    for run in ("a", "b"):
        root = tmp_path / "cli" / run
        steps = [
            ["gen-data", "--seed", "9", "--config", cfg, "--out", root / "data"],
            ["train", "--data", root / "data", "--regime", "ssth-rt+", "--bits", "16", "--epochs", "3",
             "--lr", "0.05", "--seed", "9", "--out", root / "primary"],
            ["distill", "--data", root / "data", "--primary", root / "primary", "--regime", "la-reco",
             "--epochs", "2", "--seed", "9", "--out", root / "la-reco"],
            ["build-codebook", "--data", root / "data", "--model", root / "primary", "--regime", "ssth-rt++",
             "--out", root / "dup.mshc"],
            ["eval", "--data", root / "data", "--model", root / "la-reco", "--codebook", root / "dup.mshc",
             "--seed", "9", "--out", root / "report.json"],
        ]
        for step in steps:
            assert cli_main([str(s) for s in step]) == 0
    snap_a, snap_b = _snapshot(tmp_path / "cli" / "a"), _snapshot(tmp_path / "cli" / "b")
    assert snap_a.keys() == snap_b.keys()
    assert [k for k in snap_a if snap_a[k] != snap_b[k] and k.name != "report.json"] == []
    # the report records its dataset path, which differs between the two run directories
    strip = lambda b: b.replace(str(tmp_path / "cli" / "a").encode(), b"").replace(
        str(tmp_path / "cli" / "b").encode(), b"")
    assert strip(snap_a[Path("report.json")]) == strip(snap_b[Path("report.json")])
