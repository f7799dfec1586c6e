"""Triple datasets: TSV loading, vocabularies, filter index and synthetic graphs."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
PATTERNS = ("symmetric", "1-1", "1-n", "n-1", "n-n", "mixed")


class DataError(ValueError):
    """Raised for missing, malformed or inconsistent dataset input."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class Vocabulary:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    entity_ids: dict[str, int] = field(repr=False, compare=False, default_factory=dict)
    relation_ids: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if not self.entity_ids:
            object.__setattr__(self, "entity_ids", {n: i for i, n in enumerate(self.entities)})
        if not self.relation_ids:
            object.__setattr__(self, "relation_ids", {n: i for i, n in enumerate(self.relations)})
        if len(self.entity_ids) != len(self.entities) or len(self.relation_ids) != len(self.relations):
            raise DataError("vocabulary names must be unique")

    @classmethod
    def numeric(cls, n_entities: int, n_relations: int) -> "Vocabulary":
        return cls(
            tuple(f"e{i}" for i in range(n_entities)),
            tuple(f"r{i}" for i in range(n_relations)),
        )

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def digest(self) -> str:
        """Stable hash of both name lists, used to guard checkpoints."""
        h = hashlib.sha256()
        for name in self.entities:
            h.update(name.encode("utf-8") + b"\n")
        h.update(b"\x00relations\x00\n")
        for name in self.relations:
            h.update(name.encode("utf-8") + b"\n")
        return h.hexdigest()


def _as_triples(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"expected an (n, 3) triple array, got shape {arr.shape}")
    return arr


@dataclass
class Dataset:
    """Integer-encoded train/valid/test splits plus their vocabulary.

    Splits are ``(n, 3)`` int64 arrays of ``(head, relation, tail)`` rows.
    ``stats`` carries the loader's bookkeeping (duplicates dropped,
    cross-split overlaps, cold-start ids).
    """

    vocabulary: Vocabulary
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train = _as_triples(self.train)
        self.valid = _as_triples(self.valid)
        self.test = _as_triples(self.test)
        for name in SPLITS:
            arr = getattr(self, name)
            arr.setflags(write=False)
            if len(arr) == 0:
                continue
            if arr.min() < 0:
                raise DataError(f"{name}: negative id")
            if arr[:, [0, 2]].max() >= self.n_entities:
                raise DataError(f"{name}: entity id out of range")
            if arr[:, 1].max() >= self.n_relations:
                raise DataError(f"{name}: relation id out of range")

    @property
    def n_entities(self) -> int:
        return self.vocabulary.n_entities

    @property
    def n_relations(self) -> int:
        return self.vocabulary.n_relations

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def train_entity_mask(self) -> np.ndarray:
        """Boolean mask of entities that occur in the training split."""
        seen = np.zeros(self.n_entities, dtype=bool)
        seen[self.train[:, 0]] = True
        seen[self.train[:, 2]] = True
        return seen

    def summary(self) -> dict:
        return {
            "entities": self.n_entities,
            "relations": self.n_relations,
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }


def _read_tsv(path: str) -> list[tuple[str, str, str]]:
    if not os.path.isfile(path):
        raise DataError(f"missing file: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def _dedupe(arr: np.ndarray) -> tuple[np.ndarray, int]:
    if len(arr) == 0:
        return arr, 0
    _, first = np.unique(arr, axis=0, return_index=True)
    keep = np.sort(first)
    return arr[keep], len(arr) - len(keep)


def _row_set(arr: np.ndarray) -> set[tuple[int, int, int]]:
    return set(map(tuple, arr.tolist()))


def load_dataset(directory: str) -> Dataset:
    """Load ``train.txt``, ``valid.txt`` and ``test.txt`` from ``directory``.

    Ids are assigned in order of first appearance over train, then valid,
    then test. Duplicate rows inside a split are dropped and counted;
    overlaps between splits and ids that never occur in train are counted
    and logged but kept.
    """
    raw = {name: _read_tsv(os.path.join(directory, f"{name}.txt")) for name in SPLITS}

    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}
    encoded = {}
    for name in SPLITS:
        rows = []
        for h, r, t in raw[name]:
            hi = entity_ids.setdefault(h, len(entity_ids))
            ri = relation_ids.setdefault(r, len(relation_ids))
            ti = entity_ids.setdefault(t, len(entity_ids))
            rows.append((hi, ri, ti))
        encoded[name] = _as_triples(rows)
        if name == "train":
            n_train_entities = len(entity_ids)
            n_train_relations = len(relation_ids)

    stats: dict = {"duplicates": {}, "overlaps": {}}
    for name in SPLITS:
        encoded[name], dropped = _dedupe(encoded[name])
        stats["duplicates"][name] = dropped
        if dropped:
            logger.warning("%s: dropped %d duplicate triples", name, dropped)

    sets = {name: _row_set(encoded[name]) for name in SPLITS}
    for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
        n = len(sets[a] & sets[b])
        stats["overlaps"][f"{a}/{b}"] = n
        if n:
            logger.warning("%d triples shared between %s and %s", n, a, b)

    stats["cold_entities"] = len(entity_ids) - n_train_entities
    stats["cold_relations"] = len(relation_ids) - n_train_relations
    for name in ("valid", "test"):
        arr = encoded[name]
        cold = (
            (arr[:, 0] >= n_train_entities)
            | (arr[:, 2] >= n_train_entities)
            | (arr[:, 1] >= n_train_relations)
        )
        stats[f"cold_{name}_triples"] = int(cold.sum())
    if stats["cold_entities"] or stats["cold_relations"]:
        logger.warning(
            "%d entities and %d relations never occur in train (cold-start)",
            stats["cold_entities"],
            stats["cold_relations"],
        )

    vocab = Vocabulary(
        tuple(entity_ids), tuple(relation_ids), dict(entity_ids), dict(relation_ids)
    )
    dataset = Dataset(vocab, encoded["train"], encoded["valid"], encoded["test"], stats)
    logger.info("loaded %s: %s", directory, dataset.summary())
    return dataset


def write_dataset(dataset: Dataset, directory: str) -> None:
    """Write the three splits as name-based triple TSV files."""
    os.makedirs(directory, exist_ok=True)
    ent, rel = dataset.vocabulary.entities, dataset.vocabulary.relations
    for name in SPLITS:
        with open(os.path.join(directory, f"{name}.txt"), "w", encoding="utf-8", newline="\n") as fh:
            for h, r, t in dataset.split(name).tolist():
                fh.write(f"{ent[h]}\t{rel[r]}\t{ent[t]}\n")


class FilterIndex:
    """Known-triple lookup over train, valid and test.

    ``tails[(h, r)]`` and ``heads[(r, t)]`` hold sorted int64 arrays of the
    entities completing each query.
    """

    def __init__(self, triples: np.ndarray):
        triples = _as_triples(triples)
        self.tails = self._group(triples[:, 0], triples[:, 1], triples[:, 2])
        self.heads = self._group(triples[:, 1], triples[:, 2], triples[:, 0])

    @staticmethod
    def _group(a: np.ndarray, b: np.ndarray, values: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
        if len(values) == 0:
            return {}
        order = np.lexsort((values, b, a))
        a, b, values = a[order], b[order], values[order]
        keys = np.stack([a, b], axis=1)
        brk = np.flatnonzero(np.any(keys[1:] != keys[:-1], axis=1)) + 1
        starts = np.concatenate([[0], brk])
        ends = np.concatenate([brk, [len(values)]])
        out = {}
        for s, e in zip(starts.tolist(), ends.tolist()):
            out[(int(a[s]), int(b[s]))] = np.unique(values[s:e])
        return out

    def known_tails(self, head: int, relation: int) -> np.ndarray:
        return self.tails.get((head, relation), _EMPTY)

    def known_heads(self, relation: int, tail: int) -> np.ndarray:
        return self.heads.get((relation, tail), _EMPTY)

    def contains(self, triple) -> bool:
        h, r, t = (int(x) for x in triple)
        tails = self.known_tails(h, r)
        i = np.searchsorted(tails, t)
        return bool(i < len(tails) and tails[i] == t)


_EMPTY = np.zeros(0, dtype=np.int64)


def build_filter_index(dataset: Dataset) -> FilterIndex:
    return FilterIndex(dataset.all_triples())


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic graph.

    ``count`` is the number of generating units, whose meaning depends on
    the pattern: unordered pairs for ``symmetric``, head/tail pairs for
    ``1-1``, heads for ``1-n``, tails for ``n-1``, blocks of ``fan`` x
    ``fan`` for ``n-n``, and an approximate total triple count for
    ``mixed``.
    """

    pattern: str
    entities: int
    count: int
    fan: int = 2
    valid_fraction: float = 0.0
    test_fraction: float = 0.0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise DataError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.entities < 2 or self.count < 1 or self.fan < 1:
            raise DataError("entities must be >= 2, count and fan >= 1")
        if not (0 <= self.valid_fraction and 0 <= self.test_fraction
                and self.valid_fraction + self.test_fraction < 1):
            raise DataError("split fractions must be non-negative and sum below 1")


def _pairs_symmetric(rng, n_ent, count):
    if count > n_ent * (n_ent - 1) // 2:
        raise DataError(f"symmetric: {count} pairs exceed capacity for {n_ent} entities")
    seen: set[tuple[int, int]] = set()
    out = []
    while len(seen) < count:
        x, y = rng.choice(n_ent, size=2, replace=False).tolist()
        key = (min(x, y), max(x, y))
        if key in seen:
            continue
        seen.add(key)
        out.append((x, y))
        out.append((y, x))
    return out


def _pairs_one_one(rng, n_ent, count):
    if 2 * count > n_ent:
        raise DataError(f"1-1: {count} pairs need {2 * count} entities, have {n_ent}")
    ids = rng.permutation(n_ent)[: 2 * count].tolist()
    return list(zip(ids[:count], ids[count:]))


def _pairs_fan(rng, n_ent, count, fan):
    """``count`` hubs, each linked to ``fan`` private leaves: (hub, leaf)."""
    need = count * (fan + 1)
    if need > n_ent:
        raise DataError(f"fan pattern: {count} x (1 + {fan}) entities needed, have {n_ent}")
    ids = rng.permutation(n_ent)[:need].tolist()
    out = []
    for i in range(count):
        hub = ids[i]
        for leaf in ids[count + i * fan: count + (i + 1) * fan]:
            out.append((hub, leaf))
    return out


def _pairs_many_many(rng, n_ent, count, fan):
    need = 2 * fan
    if need > n_ent or count * fan * fan > n_ent * (n_ent - 1):
        raise DataError(f"n-n: blocks of {fan} x {fan} infeasible with {n_ent} entities")
    seen: set[tuple[int, int]] = set()
    out = []
    for _ in range(count):
        ids = rng.choice(n_ent, size=need, replace=False).tolist()
        for h in ids[:fan]:
            for t in ids[fan:]:
                if (h, t) not in seen:
                    seen.add((h, t))
                    out.append((h, t))
    return out


class _Latent:
    """Entities placed at Gaussian latent points; relations are latent offsets."""

    def __init__(self, rng, n_ent: int, dim: int = 8):
        self.rng = rng
        self.z = rng.normal(size=(n_ent, dim))

    def offset(self) -> np.ndarray:
        return self.rng.normal(size=self.z.shape[1])

    def nearest(self, point: np.ndarray, n: int, exclude) -> list[int]:
        order = np.argsort(((self.z - point) ** 2).sum(axis=1), kind="stable")
        out = []
        for e in order.tolist():
            if e not in exclude:
                out.append(e)
                if len(out) == n:
                    break
        return out


def _mixed(rng, n_ent, total, fan):
    """Four relation families over latent entity geometry.

    Each 1-1, 1-n and n-n relation maps heads to the entities nearest their
    latent point shifted by a relation offset, and comes with an inverse
    relation so held-out facts stay predictable from training facts. The
    fourth family is one symmetric relation over disjoint pairs of latent
    neighbours.
    """
    lat = _Latent(rng, n_ent)
    relations: list[str] = []
    rows: list[tuple[int, int, int]] = []

    def add(name, inv_name, pairs):
        fwd = len(relations)
        relations.extend([name, inv_name])
        for h, t in pairs:
            rows.append((h, fwd, t))
            rows.append((t, fwd + 1, h))
        return 2 * len(pairs)

    def one_one(units):
        v = lat.offset()
        used: set[int] = set()
        pairs = []
        for h in rng.permutation(n_ent)[: max(1, units // 2)].tolist():
            t, = lat.nearest(lat.z[h] + v, 1, used | {h})
            used.add(t)
            pairs.append((h, t))
        return pairs

    def one_many(units):
        v = lat.offset()
        hubs = max(1, min(units // (2 * fan), n_ent // (fan + 1)))
        used: set[int] = set()
        pairs = []
        for h in rng.permutation(n_ent)[:hubs].tolist():
            for t in lat.nearest(lat.z[h] + v, fan, used | {h}):
                used.add(t)
                pairs.append((h, t))
        return pairs

    def many_many(units):
        v = lat.offset()
        blocks = max(1, units // (2 * fan * fan))
        pairs: list[tuple[int, int]] = []
        seen: set[tuple[int, int]] = set()
        for c in rng.choice(n_ent, size=min(blocks, n_ent), replace=False).tolist():
            heads = lat.nearest(lat.z[c], fan, set())
            tails = lat.nearest(lat.z[c] + v, fan, set(heads))
            for h in heads:
                for t in tails:
                    if (h, t) not in seen:
                        seen.add((h, t))
                        pairs.append((h, t))
        return pairs

    # symmetric: disjoint pairs of latent neighbours, both directions stored
    relations.append("symmetric")
    sym = len(relations) - 1
    pairs_left = max(1, min(total // 8, n_ent // 2))
    free = set(range(n_ent))
    for x in rng.permutation(n_ent).tolist():
        if pairs_left == 0 or len(free) < 2:
            break
        if x not in free:
            continue
        y, = lat.nearest(lat.z[x], 1, (set(range(n_ent)) - free) | {x})
        free -= {x, y}
        pairs_left -= 1
        rows.extend([(x, sym, y), (y, sym, x)])

    # the other three families share what the symmetric relation left over
    budget = max(2, (total - len(rows)) // 3)
    for name, inv, make, cap in (
        ("one_to_one", "one_to_one_inv", one_one, n_ent),
        ("one_to_many", "many_to_one", one_many, 2 * fan * (n_ent // (fan + 1))),
        ("many_to_many", "many_to_many_inv", many_many, n_ent * fan),
    ):
        made, i = 0, 0
        while made < budget:
            if made and budget - made < cap // 4:
                break
            made += add(f"{name}_{i}", f"{inv}_{i}", make(min(cap, budget - made)))
            i += 1

    return relations, rows


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Generate a dataset for ``spec``; identical output for identical (spec, seed)."""
    rng = np.random.default_rng(seed)
    n_ent = spec.entities
    if spec.pattern == "mixed":
        relations, rows = _mixed(rng, n_ent, spec.count, spec.fan)
    else:
        relations = [spec.pattern.replace("-", "_")]
        if spec.pattern == "symmetric":
            pairs = _pairs_symmetric(rng, n_ent, spec.count)
        elif spec.pattern == "1-1":
            pairs = _pairs_one_one(rng, n_ent, spec.count)
        elif spec.pattern == "1-n":
            pairs = _pairs_fan(rng, n_ent, spec.count, spec.fan)
        elif spec.pattern == "n-1":
            pairs = [(leaf, hub) for hub, leaf in _pairs_fan(rng, n_ent, spec.count, spec.fan)]
        else:
            pairs = _pairs_many_many(rng, n_ent, spec.count, spec.fan)
        rows = [(h, 0, t) for h, t in pairs]

    triples = _as_triples(rows)
    order = rng.permutation(len(triples))
    triples = triples[order]
    n_valid = int(round(spec.valid_fraction * len(triples)))
    n_test = int(round(spec.test_fraction * len(triples)))
    n_train = len(triples) - n_valid - n_test
    vocab = Vocabulary(tuple(f"e{i}" for i in range(n_ent)), tuple(relations))
    return Dataset(
        vocab,
        triples[:n_train],
        triples[n_train:n_train + n_valid],
        triples[n_train + n_valid:],
        {"synthetic": {"pattern": spec.pattern, "seed": seed}},
    )
