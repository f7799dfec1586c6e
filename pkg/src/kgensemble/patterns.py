"""Relation categories (1-1, 1-n, n-1, n-n) and symmetric-rule mining."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .evaluation import MetricsReport, RankResult, metrics_from_ranks

CATEGORIES = ("1-1", "1-n", "n-1", "n-n")


@dataclass(frozen=True)
class RelationCategory:
    relation: int
    category: str
    tails_per_head: float
    heads_per_tail: float


@dataclass(frozen=True)
class SymmetricRule:
    """r(x, y) => r(y, x).

    ``support`` counts pairs whose reverse also holds; ``pairs`` counts all
    distinct pairs of the relation, so ``confidence = support / pairs``.
    """

    relation: int
    support: int
    pairs: int
    confidence: float


def _pairs_by_relation(triples) -> dict[int, set[tuple[int, int]]]:
    out: dict[int, set[tuple[int, int]]] = defaultdict(set)
    for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
        out[r].add((h, t))
    return out


def categorize_relations(train, threshold: float = 1.5) -> list[RelationCategory]:
    """Categorize every relation occurring in ``train`` by its mean fan-out and fan-in."""
    out = []
    for rel, pairs in sorted(_pairs_by_relation(train).items()):
        tails = defaultdict(int)
        heads = defaultdict(int)
        for h, t in pairs:
            tails[h] += 1
            heads[t] += 1
        tph = len(pairs) / len(tails)
        hpt = len(pairs) / len(heads)
        many_tails, many_heads = tph >= threshold, hpt >= threshold
        if many_tails and many_heads:
            cat = "n-n"
        elif many_tails:
            cat = "1-n"
        elif many_heads:
            cat = "n-1"
        else:
            cat = "1-1"
        out.append(RelationCategory(rel, cat, tph, hpt))
    return out


def mine_symmetric(train, threshold: float = 0.8, min_support: int = 10) -> list[SymmetricRule]:
    """Relations whose pair confidence for r(x,y) => r(y,x) reaches ``threshold``.

    Sorted by confidence, highest first (ties by relation id).
    """
    if threshold <= 0:
        raise ValueError("confidence threshold must be positive")
    rules = []
    for rel, pairs in _pairs_by_relation(train).items():
        support = sum((t, h) in pairs for h, t in pairs)
        conf = support / len(pairs)
        if conf >= threshold and support >= min_support:
            rules.append(SymmetricRule(rel, support, len(pairs), conf))
    rules.sort(key=lambda r: (-r.confidence, r.relation))
    return rules


def category_shares(categories: Sequence[RelationCategory]) -> dict[str, float]:
    n = len(categories)
    return {c: (sum(x.category == c for x in categories) / n if n else 0.0) for c in CATEGORIES}


def per_category_report(
    ranks,
    categories: Sequence[RelationCategory],
    symmetric_rules: Sequence[SymmetricRule] = (),
    triples: Optional[np.ndarray] = None,
) -> dict[str, Optional[MetricsReport]]:
    """Metrics for test triples grouped by relation category.

    ``ranks`` is a list of :class:`RankResult`, a :class:`MetricsReport`
    carrying its triples, or an ``(n, 2)`` array aligned with ``triples``.
    A ``symmetric`` row covers relations with a mined symmetric rule, which
    also keep their regular category row. Rows with no test triples are None.
    """
    if isinstance(ranks, MetricsReport):
        ranks, triples = ranks.ranks, ranks.triples
    elif len(ranks) and isinstance(ranks[0], RankResult):
        triples = np.array([r.triple for r in ranks], dtype=np.int64)
        ranks = np.array([[r.left, r.right] for r in ranks])
    if triples is None:
        raise ValueError("triples are needed to group plain rank arrays")
    ranks = np.asarray(ranks, dtype=np.float64).reshape(-1, 2)
    rel = np.asarray(triples, dtype=np.int64).reshape(-1, 3)[:, 1]
    cat_of = {c.relation: c.category for c in categories}
    rows: dict[str, Optional[MetricsReport]] = {}
    labels = np.array([cat_of.get(r, "") for r in rel.tolist()], dtype=object)
    for cat in CATEGORIES:
        mask = labels == cat
        rows[cat] = metrics_from_ranks(ranks[mask]) if mask.any() else None
    sym = {r.relation for r in symmetric_rules}
    mask = np.isin(rel, list(sym)) if sym else np.zeros(len(rel), dtype=bool)
    rows["symmetric"] = metrics_from_ranks(ranks[mask]) if mask.any() else None
    return rows


def write_categories_csv(categories: Sequence[RelationCategory], relation_names: Sequence[str], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["relation", "category", "avg_tails_per_head", "avg_heads_per_tail"])
        for c in categories:
            w.writerow([relation_names[c.relation], c.category, f"{c.tails_per_head:.6f}", f"{c.heads_per_tail:.6f}"])


def write_rules_csv(rules: Sequence[SymmetricRule], relation_names: Sequence[str], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["relation", "support", "confidence"])
        for r in rules:
            w.writerow([relation_names[r.relation], r.support, f"{r.confidence:.6f}"])


def write_category_metrics_csv(rows: dict[str, Optional[MetricsReport]], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "n_triples", "mrr", "hits@1", "hits@3", "hits@10"])
        for cat, rep in rows.items():
            if rep is None:
                w.writerow([cat, 0, "", "", "", ""])
            else:
                w.writerow([cat, len(rep.ranks), f"{rep.mrr:.6f}",
                            *(f"{rep.hits[n]:.6f}" for n in (1, 3, 10))])
