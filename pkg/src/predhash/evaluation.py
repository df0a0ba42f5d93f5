"""Retrieval scoring: AP@K, mAP@K, observation-level sweeps and reports."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FeatureSequence
from .encoder import EncoderModel, encode_sequence
from .index import Codebook, pack, search_distinct
from .training import ALPHA_GRID, observed_length

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "n_bits", "alpha", "k", "map")
VE_ALPHAS = (0.1, 0.2)
E_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5)


def ap_at_k(rel: Sequence[bool], K: int) -> float:
    """``(1/K) * sum_{j=1..K} N_correct(j) / j`` over the first ``K`` results.

    Lists shorter than ``K`` count the missing positions as misses.  The sum
    runs in rank order, so results are reproducible to the last bit.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    hits, total = 0, 0.0
    for j in range(1, K + 1):
        if j <= len(rel) and rel[j - 1]:
            hits += 1
        total += hits / j
    return total / K


def map_at_k(queries: Sequence[Sequence[bool]], K: int) -> float:
    if not len(queries):
        raise ValueError("mAP needs at least one query")
    return sum(ap_at_k(q, K) for q in queries) / len(queries)


@dataclass
class MethodBundle:
    """What a sweep needs to score one method: its query encoder and codebook."""

    name: str
    query_encoder: EncoderModel
    codebook: Codebook
    labels: dict[int, int]  # source video id -> class

    @property
    def n_bits(self) -> int:
        return self.codebook.n_bits


@dataclass
class ReportRow:
    method: str
    n_bits: int
    alpha: float
    k: int
    map: float

    def __post_init__(self):
        # plain Python scalars keep repr() round-trippable in CSV and JSON
        self.n_bits, self.alpha, self.k, self.map = int(self.n_bits), float(self.alpha), int(self.k), float(self.map)


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def get(self, method: str, n_bits: int, alpha: float, k: int | None = None) -> float:
        for r in self.rows:
            if r.method == method and r.n_bits == n_bits and abs(r.alpha - alpha) < 1e-9 \
                    and (k is None or r.k == k):
                return r.map
        raise KeyError((method, n_bits, alpha, k))

    def curve(self, method: str, n_bits: int) -> list[tuple[float, float]]:
        return sorted((r.alpha, r.map) for r in self.rows if r.method == method and r.n_bits == n_bits)

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.rows == other.rows


def relevance(result_video_ids: Sequence[int], labels: dict[int, int], query_label: int) -> list[bool]:
    return [labels[int(v)] == query_label for v in result_video_ids]


def sweep(bundle: MethodBundle, queries: Sequence[FeatureSequence],
          alphas: Sequence[float] = ALPHA_GRID, K: int = 20) -> EvalReport:
    """mAP@K of one method at every observation level.

    Each query is encoded once; the bitcode after ``floor(alpha * T)`` clips is
    the code of the ``alpha``-truncated query, since encoding is incremental.
    Duplicated codebooks are purged before cutting to ``K``.  Queries whose
    class is absent from the codebook are skipped with a warning.
    """
    known = {bundle.labels[int(v)] for v in bundle.codebook.video_ids}
    usable = []
    for q in queries:
        if q.label not in known:
            log.warning("query %d: class %d not in codebook, skipped", q.video_id, q.label)
            continue
        usable.append(q)
    if not usable:
        raise ValueError("no query has a class present in the codebook")
    per_step = [encode_sequence(bundle.query_encoder, q.clips)[1] for q in usable]
    report = EvalReport()
    for a in alphas:
        rels = []
        for q, steps in zip(usable, per_step):
            code = steps[observed_length(len(q), a) - 1]
            hits = search_distinct(bundle.codebook, pack(code), K, query_id=q.video_id)
            rels.append(relevance(hits.video_ids, bundle.labels, q.label))
        report.rows.append(ReportRow(bundle.name, bundle.n_bits, float(a), K, map_at_k(rels, K)))
    return report


def merge(*reports: EvalReport, **metadata) -> EvalReport:
    out = EvalReport(metadata=dict(metadata))
    for r in reports:
        out.rows += r.rows
        out.metadata = {**r.metadata, **out.metadata}
    return out


def _mean_over(report: EvalReport, method: str, n_bits: int, alphas: Sequence[float]) -> float:
    try:
        return float(np.mean([report.get(method, n_bits, a) for a in alphas]))
    except KeyError as exc:
        raise ValueError(f"report lacks row {exc.args[0]}") from None


def aggregate(report: EvalReport) -> dict[tuple[str, int], dict[str, float]]:
    """VE / E / O means per ``(method, n_bits)``.

    VE averages alpha 0.1-0.2, E alpha 0.1-0.5, O all ten levels 0.1-1.0.
    """
    out = {}
    for method, n_bits in sorted({(r.method, r.n_bits) for r in report.rows}):
        out[(method, n_bits)] = {
            "VE": _mean_over(report, method, n_bits, VE_ALPHAS),
            "E": _mean_over(report, method, n_bits, E_ALPHAS),
            "O": _mean_over(report, method, n_bits, ALPHA_GRID),
        }
    return out


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the stamp so repeated runs give identical files
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        return time.strftime("%Y-%m-%dT%H:%M:%S+0000", time.gmtime(int(epoch)))
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def emit_report(report: EvalReport, path: str | Path, fmt: str | None = None) -> Path:
    """Write ``report`` as CSV (``method,n_bits,alpha,k,map``) or JSON.

    Floats are written with ``repr`` so a round trip is exact.  The JSON form
    wraps the rows in ``{"metadata": ..., "rows": [...]}``; its metadata gets a
    ``timestamp`` unless the report already carries one.
    """
    if not report.rows:
        raise ValueError("refusing to write an empty report")
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "csv").lower()
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in report.rows:
                w.writerow([r.method, r.n_bits, repr(r.alpha), r.k, repr(r.map)])
    elif fmt == "json":
        meta = {"timestamp": _timestamp(), **report.metadata}
        doc = {"metadata": meta, "rows": [dict(zip(CSV_COLUMNS, (r.method, r.n_bits, r.alpha, r.k, r.map)))
                                          for r in report.rows]}
        path.write_text(json.dumps(doc, indent=2) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path: str | Path) -> EvalReport:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        rows = [ReportRow(d["method"], int(d["n_bits"]), float(d["alpha"]), int(d["k"]), float(d["map"]))
                for d in doc["rows"]]
        return EvalReport(rows, doc.get("metadata", {}))
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {rd.fieldnames}")
        rows = [ReportRow(d["method"], int(d["n_bits"]), float(d["alpha"]), int(d["k"]), float(d["map"]))
                for d in rd]
    return EvalReport(rows)
