"""Filtered link-prediction ranking, MRR/Hits@N and repeated-run statistics.

A scorer is any object with ``score_tails(heads, relations)`` and
``score_heads(relations, tails)`` returning ``(n, |E|)`` score matrices;
both :class:`~kgensemble.embedding.ModelParams` and
:class:`~kgensemble.ensemble.EnsembleModel` qualify.
"""

from __future__ import annotations

import csv
import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Dataset, FilterIndex

DEFAULT_NS = (1, 3, 10)
# test triples per scoring block; fixed so results do not depend on workers
BLOCK = 128


@dataclass(frozen=True)
class RankResult:
    triple: tuple[int, int, int]
    left: float
    right: float


def _side_ranks(scores: np.ndarray, target: np.ndarray, known: Sequence[np.ndarray]) -> np.ndarray:
    """Mean-tie rank of ``scores[i, target[i]]`` among unfiltered candidates."""
    rows = np.arange(len(target))
    true = scores[rows, target][:, None]
    keep = np.ones(scores.shape, dtype=bool)
    for i, ids in enumerate(known):
        keep[i, ids] = False
    keep[rows, target] = False
    better = ((scores > true) & keep).sum(axis=1)
    ties = ((scores == true) & keep).sum(axis=1)
    return 1.0 + better + ties / 2.0


def _rank_block(scorer, triples: np.ndarray, fi: FilterIndex) -> np.ndarray:
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    tail_scores = scorer.score_tails(h, r)
    head_scores = scorer.score_heads(r, t)
    right = _side_ranks(tail_scores, t, [fi.known_tails(a, b) for a, b in zip(h.tolist(), r.tolist())])
    left = _side_ranks(head_scores, h, [fi.known_heads(b, c) for b, c in zip(r.tolist(), t.tolist())])
    return np.stack([left, right], axis=1)


def rank_triples(scorer, triples: np.ndarray, filter_index: FilterIndex, workers: int = 1) -> np.ndarray:
    """``(n, 2)`` array of filtered (left, right) ranks, one row per triple.

    Ties are split evenly: rank = 1 + #better + #equal / 2. Candidates
    that form a known triple are removed, the ranked triple itself is kept.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        return np.zeros((0, 2))
    blocks = [triples[s:s + BLOCK] for s in range(0, len(triples), BLOCK)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _rank_block(scorer, b, filter_index), blocks))
    else:
        parts = [_rank_block(scorer, b, filter_index) for b in blocks]
    return np.concatenate(parts)


def filtered_ranks(scorer, triple, filter_index: FilterIndex, entities: Optional[int] = None) -> RankResult:
    row = np.asarray(triple, dtype=np.int64).reshape(1, 3)
    (left, right), = rank_triples(scorer, row, filter_index)
    return RankResult(tuple(row[0].tolist()), float(left), float(right))


@dataclass
class MetricsReport:
    mrr: float
    hits: dict[int, float]
    ranks: np.ndarray = field(repr=False, default=None)
    triples: Optional[np.ndarray] = field(repr=False, default=None)

    def metric(self, name: str) -> float:
        if name == "mrr":
            return self.mrr
        if name.startswith("hits@"):
            return self.hits[int(name[5:])]
        raise KeyError(name)

    def metric_names(self) -> list[str]:
        return ["mrr"] + [f"hits@{n}" for n in sorted(self.hits)]

    def to_dict(self, include_ranks: bool = False) -> dict:
        out = {"mrr": self.mrr, "hits": {str(n): v for n, v in sorted(self.hits.items())}}
        if self.ranks is not None:
            out["n_triples"] = int(len(self.ranks))
        if include_ranks and self.ranks is not None:
            out["ranks"] = [
                {"triple": None if self.triples is None else self.triples[i].tolist(),
                 "left": float(lr[0]), "right": float(lr[1])}
                for i, lr in enumerate(self.ranks)
            ]
        return out


def metrics_from_ranks(ranks, ns: Iterable[int] = DEFAULT_NS) -> MetricsReport:
    """MRR and Hits@N over both sides of every ranked triple.

    ``ranks`` is an ``(n, 2)`` array or a list of :class:`RankResult`.
    """
    triples = None
    if len(ranks) and isinstance(ranks[0], RankResult):
        triples = np.array([r.triple for r in ranks], dtype=np.int64)
        ranks = np.array([[r.left, r.right] for r in ranks], dtype=np.float64)
    ranks = np.asarray(ranks, dtype=np.float64).reshape(-1, 2)
    if len(ranks) == 0:
        raise ValueError("no ranks to summarize")
    flat = ranks.reshape(-1)
    mrr = float(np.mean(1.0 / flat))
    hits = {int(n): float(np.mean(flat <= n)) for n in sorted(set(ns))}
    return MetricsReport(mrr, hits, ranks, triples)


def evaluate_model(
    scorer,
    dataset: Dataset,
    filter_index: FilterIndex,
    split: str = "test",
    workers: int = 1,
    ns: Iterable[int] = DEFAULT_NS,
) -> MetricsReport:
    triples = dataset.split(split)
    report = metrics_from_ranks(rank_triples(scorer, triples, filter_index, workers), ns)
    report.triples = triples
    return report


@dataclass
class RepeatedRunReport:
    runs: list[MetricsReport]
    mean: dict[str, float]
    std: dict[str, float]
    single_run: bool = False

    def to_dict(self) -> dict:
        return {
            "runs": len(self.runs),
            "mean": self.mean,
            "std": self.std,
            "single_run": self.single_run,
            "per_run": [r.to_dict() for r in self.runs],
        }


def aggregate_runs(reports: Sequence[MetricsReport]) -> RepeatedRunReport:
    """Mean and sample (n - 1) standard deviation per metric.

    A single report gets std 0 and ``single_run=True``.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    names = reports[0].metric_names()
    mean, std = {}, {}
    for name in names:
        values = [float(r.metric(name)) for r in reports]
        # statistics works in exact arithmetic, so identical runs give std 0 exactly
        mean[name] = statistics.fmean(values)
        std[name] = statistics.stdev(values) if len(values) > 1 else 0.0
    return RepeatedRunReport(list(reports), mean, std, single_run=len(reports) == 1)


SUMMARY_COLUMNS = [
    "model", "kind", "d_l", "k", "seed_count",
    "mrr_mean", "mrr_std",
    "hits@1_mean", "hits@1_std",
    "hits@3_mean", "hits@3_std",
    "hits@10_mean", "hits@10_std",
]


def summary_row(model: str, kind: str, d_l: int, k: int, agg: RepeatedRunReport) -> dict:
    row = {"model": model, "kind": kind, "d_l": d_l, "k": k, "seed_count": len(agg.runs)}
    for name in ("mrr", "hits@1", "hits@3", "hits@10"):
        row[f"{name}_mean"] = agg.mean.get(name, float("nan"))
        row[f"{name}_std"] = agg.std.get(name, float("nan"))
    return row


def write_summary_csv(rows: Sequence[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def write_json(obj: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
