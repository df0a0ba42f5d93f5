import json
import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from predhash.data import FeatureSequence
from predhash.encoder import EncoderModel, encode_sequence
from predhash.evaluation import (CSV_COLUMNS, EvalReport, MethodBundle, ReportRow, aggregate, ap_at_k,
                                 emit_report, map_at_k, merge, read_report, sweep)
from predhash.index import build_codebook, pack, search_distinct
from predhash.training import ALPHA_GRID


def ap_oracle(rel, K):
    """Direct enumeration with exact fractions."""
    rel = list(rel[:K]) + [False] * (K - len(rel[:K]))
    total = Fraction(0)
    for j in range(1, K + 1):
        total += Fraction(sum(rel[:j]), j)
    return total / K


def test_ap_examples():
    assert ap_at_k([True] * 5, 5) == 1.0
    assert ap_at_k([False] * 5, 5) == 0.0
    assert ap_at_k([1, 0, 1], 3) == pytest.approx((1 + 1 / 2 + 2 / 3) / 3, abs=1e-15)
    assert ap_at_k([1, 0, 1], 3) == pytest.approx(0.72222222, abs=1e-8)
    # short lists count missing positions as misses
    assert ap_at_k([True], 2) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        ap_at_k([True], 0)


def test_map_examples_and_oracle():
    assert map_at_k([[1, 0, 1]], 3) == ap_at_k([1, 0, 1], 3)
    assert map_at_k([[1, 1], [0, 0]], 2) == 0.5
    with pytest.raises(ValueError):
        map_at_k([], 3)
    rng = np.random.default_rng(0)
    lists = [rng.random(int(rng.integers(0, 30))) < 0.4 for _ in range(50)]
    for K in (1, 5, 20):
        want = sum(ap_oracle(list(r), K) for r in lists) / 50
        assert map_at_k(lists, K) == pytest.approx(float(want), rel=1e-12, abs=1e-15)
        for r in lists:
            assert ap_at_k(r, K) == pytest.approx(float(ap_oracle(list(r), K)), rel=1e-12, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(1, 30), st.data())
def test_ap_bounds_and_monotone(rel, K, data):
    ap = ap_at_k(rel, K)
    assert 0.0 <= ap <= 1.0
    misses = [i for i, r in enumerate(rel) if not r]
    if misses:
        i = data.draw(st.sampled_from(misses))
        flipped = rel[:i] + [True] + rel[i + 1:]
        assert ap_at_k(flipped, K) >= ap


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.booleans(), max_size=10), min_size=1, max_size=8), st.randoms())
def test_map_is_permutation_invariant(lists, rnd):
    shuffled = list(lists)
    rnd.shuffle(shuffled)
    assert map_at_k(shuffled, 10) == pytest.approx(map_at_k(lists, 10), abs=1e-15)


def _report(values, method="m", n_bits=32):
    return EvalReport([ReportRow(method, n_bits, a, 20, v) for a, v in zip(ALPHA_GRID, values)])


def test_aggregate_constant_and_oracle():
    agg = aggregate(_report([0.4] * 10))[("m", 32)]
    assert agg == pytest.approx({"VE": 0.4, "E": 0.4, "O": 0.4})
    vals = np.random.default_rng(1).random(10)
    agg = aggregate(_report(vals))[("m", 32)]
    assert agg["VE"] == pytest.approx((vals[0] + vals[1]) / 2)
    assert agg["E"] == pytest.approx(sum(vals[:5]) / 5)
    assert agg["O"] == pytest.approx(sum(vals) / 10)


def test_aggregate_missing_row():
    rep = _report([0.1] * 10)
    rep.rows.pop(3)
    with pytest.raises(ValueError):
        aggregate(rep)


def test_emit_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    rep = merge(_report(rng.random(10)), _report(rng.random(10), "other", 64), seed=3, dataset="synthetic")
    emit_report(rep, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert read_report(tmp_path / "r.csv") == rep
    emit_report(rep, tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back == rep
    assert back.metadata["seed"] == 3 and back.metadata["dataset"] == "synthetic"
    assert "timestamp" in json.loads((tmp_path / "r.json").read_text())["metadata"]
    with pytest.raises(ValueError):
        emit_report(EvalReport(), tmp_path / "empty.csv")
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path / "r.xml")
    with pytest.raises(OSError):
        emit_report(rep, tmp_path / "missing" / "r.csv")


def test_json_timestamp_can_be_pinned(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    rep = _report([0.5] * 10)
    emit_report(rep, tmp_path / "a.json")
    emit_report(rep, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text())["metadata"]["timestamp"].startswith("1970-01-01")


@pytest.fixture(scope="module")
def world():
    rng = np.random.default_rng(3)
    protos = rng.normal(size=(4, 5))
    vids = [FeatureSequence(i, i % 4, protos[i % 4] + rng.normal(0, 0.3, (int(rng.integers(5, 20)), 5)))
            for i in range(60)]
    enc = EncoderModel.init(5, 16, seed=5)
    labels = {v.video_id: v.label for v in vids}
    return vids[:50], vids[50:], enc, labels


def test_sweep_has_one_row_per_alpha(world):
    db, queries, enc, labels = world
    rep = sweep(MethodBundle("ssth-rt", enc, build_codebook(enc, db), labels), queries)
    assert [r.alpha for r in rep.rows] == list(ALPHA_GRID)
    assert all(r.k == 20 and r.n_bits == 16 and 0 <= r.map <= 1 for r in rep.rows)


def test_duplicates_at_full_observation_against_plain(world):
    db, queries, enc, labels = world
    plain = build_codebook(enc, db)
    single = build_codebook(enc, db, (1.0,))
    dup = build_codebook(enc, db, ALPHA_GRID)
    for q in queries:
        code = pack(encode_sequence(enc, q.clips)[0])
        want = search_distinct(plain, code, 20)
        assert search_distinct(single, code, 20).rows() == want.rows()
        # every video keeps its full-video entry, so purged distances never exceed plain ones
        got = search_distinct(dup, code, 20)
        assert np.all(got.distances <= want.distances)
    a = sweep(MethodBundle("ssth-rt+", enc, plain, labels), queries, (1.0,))
    b = sweep(MethodBundle("ssth-rt++", enc, single, labels), queries, (1.0,))
    assert a.rows[0].map == b.rows[0].map


def test_sweep_skips_queries_of_unknown_classes(world, caplog):
    db, queries, enc, labels = world
    db3 = [v for v in db if v.label != 3]
    with caplog.at_level(logging.WARNING):
        rep = sweep(MethodBundle("m", enc, build_codebook(enc, db3), labels), queries, (1.0,))
    assert "not in codebook" in caplog.text
    kept = [q for q in queries if q.label != 3]
    ref = sweep(MethodBundle("m", enc, build_codebook(enc, db3), labels), kept, (1.0,))
    assert rep == ref
    with pytest.raises(ValueError):
        sweep(MethodBundle("m", enc, build_codebook(enc, db3), labels),
              [q for q in queries if q.label == 3], (1.0,))
