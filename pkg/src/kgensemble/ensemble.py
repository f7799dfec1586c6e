"""k independently trained replicas of one model kind, averaged at query time."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, FilterIndex, Vocabulary, build_filter_index
from .embedding import ModelKind, ModelParams, init_model
from .scoring import score_all_heads, score_all_tails, score_triples
from .training import CurveRow, TrainConfig, train_with_early_stop

logger = logging.getLogger(__name__)

MAGIC = b"KGEE"
FORMAT_VERSION = 1


class EnsembleError(RuntimeError):
    def __init__(self, replica: int, cause: BaseException):
        super().__init__(f"replica {replica} failed: {cause}")
        self.replica = replica


class CheckpointError(ValueError):
    pass


class VocabularyMismatch(CheckpointError):
    pass


@dataclass
class EnsembleModel:
    """Replicas share kind and size; scores are the plain mean over replicas."""

    replicas: list[ModelParams]
    base_seed: int = 0
    config: Optional[TrainConfig] = None
    vocabulary_hash: str = ""
    curves: list[list[CurveRow]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.replicas:
            raise ValueError("an ensemble needs at least one replica")
        first = self.replicas[0]
        for rep in self.replicas[1:]:
            if rep.kind is not first.kind or rep.d != first.d or rep.norm != first.norm \
                    or rep.entity.shape != first.entity.shape or rep.relation.shape != first.relation.shape:
                raise ValueError("all replicas must share kind, size and table shapes")

    @property
    def k(self) -> int:
        return len(self.replicas)

    @property
    def kind(self) -> ModelKind:
        return self.replicas[0].kind

    @property
    def d_l(self) -> int:
        return self.replicas[0].d

    @property
    def d(self) -> int:
        """Overall embedding size k * d_l."""
        return self.k * self.d_l

    @property
    def seeds(self) -> list[int]:
        return [rep.seed for rep in self.replicas]

    @property
    def n_entities(self) -> int:
        return self.replicas[0].n_entities

    def _mean(self, fn, *args) -> np.ndarray:
        total = fn(self.replicas[0], *args)
        for rep in self.replicas[1:]:
            total = total + fn(rep, *args)
        return total / self.k

    def score_triples(self, triples: np.ndarray) -> np.ndarray:
        return self._mean(score_triples, triples)

    def score_tails(self, heads: np.ndarray, relations: np.ndarray) -> np.ndarray:
        return self._mean(score_all_tails, heads, relations)

    def score_heads(self, relations: np.ndarray, tails: np.ndarray) -> np.ndarray:
        return self._mean(score_all_heads, relations, tails)

    def check_vocabulary(self, vocabulary: Vocabulary) -> None:
        if self.vocabulary_hash and self.vocabulary_hash != vocabulary.digest():
            raise VocabularyMismatch("checkpoint was trained on a different vocabulary")
        if self.n_entities != vocabulary.n_entities or self.replicas[0].n_relations != vocabulary.n_relations:
            raise VocabularyMismatch(
                f"checkpoint has {self.n_entities} entities / {self.replicas[0].n_relations} relations, "
                f"dataset has {vocabulary.n_entities} / {vocabulary.n_relations}"
            )


def ensemble_score(model: EnsembleModel, triple) -> float:
    return float(model.score_triples(np.asarray(triple).reshape(1, 3))[0])


def train_replica(kind, d_l: int, dataset: Dataset, config: TrainConfig, seed: int,
                  filter_index: Optional[FilterIndex] = None):
    params = init_model(kind, dataset.n_entities, dataset.n_relations, d_l, seed,
                        norm=config.norm, n3_scale=config.n3_scale)
    return train_with_early_stop(params, dataset, config, filter_index)


def _replica_task(args):
    kind, d_l, dataset, config, seed = args
    return train_replica(kind, d_l, dataset, config, seed)


def max_workers(requested: int) -> int:
    """``requested`` capped by the KGE_THREADS environment variable."""
    cap = os.environ.get("KGE_THREADS")
    if cap:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            logger.warning("ignoring non-integer KGE_THREADS=%r", cap)
    return max(1, requested)


def train_ensemble(
    kind,
    k: int,
    d_l: int,
    dataset: Dataset,
    config: TrainConfig,
    workers: int = 1,
    base_seed: Optional[int] = None,
) -> EnsembleModel:
    """Train ``k`` replicas with seeds ``base_seed + j``, up to ``workers`` at once.

    Each replica depends only on its seed and the shared config, so the
    result is the same for any worker count.
    """
    kind = ModelKind.parse(kind)
    if k < 1 or workers < 1:
        raise ValueError("k and workers must be >= 1")
    config.check_kind(kind)
    base = config.seed if base_seed is None else base_seed
    seeds = [base + j for j in range(k)]
    workers = min(max_workers(workers), k)

    results = []
    if workers == 1:
        fi = build_filter_index(dataset)
        for j, seed in enumerate(seeds):
            try:
                results.append(train_replica(kind, d_l, dataset, config, seed, fi))
            except Exception as exc:
                raise EnsembleError(j, exc) from exc
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_replica_task, (kind, d_l, dataset, config, s)) for s in seeds]
            for j, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    for other in futures:
                        other.cancel()
                    raise EnsembleError(j, exc) from exc

    return EnsembleModel(
        [r.params for r in results],
        base_seed=base,
        config=config,
        vocabulary_hash=dataset.vocabulary.digest(),
        curves=[r.curve for r in results],
    )


# checkpoint file: "KGEE" | u16 version | u32 metadata length | canonical JSON |
# per replica: u64 nbytes + entity table, u64 nbytes + relation table (little-endian f8, row-major)

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _payloads(model: EnsembleModel) -> list[bytes]:
    out = []
    for rep in model.replicas:
        out.append(np.ascontiguousarray(rep.entity, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(rep.relation, dtype="<f8").tobytes())
    return out


def save_checkpoint(model: EnsembleModel, path: str) -> None:
    payloads = _payloads(model)
    digest = hashlib.sha256()
    for p in payloads:
        digest.update(p)
    first = model.replicas[0]
    meta = {
        "format": FORMAT_VERSION,
        "kind": model.kind.value,
        "d_l": model.d_l,
        "d": model.d,
        "d_rel": first.d_rel,
        "k": model.k,
        "norm": first.norm,
        "entities": first.n_entities,
        "relations": first.n_relations,
        "seeds": model.seeds,
        "base_seed": model.base_seed,
        "config": model.config.to_dict() if model.config else None,
        "config_digest": model.config.digest() if model.config else "",
        "vocabulary_hash": model.vocabulary_hash,
        "payload_sha256": digest.hexdigest(),
    }
    blob = _canonical(meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(struct.pack("<Q", len(p)))
            fh.write(p)
    os.replace(tmp, path)


def read_checkpoint_metadata(path: str) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"corrupt checkpoint: expected {n} bytes, got {len(buf)}")
    return buf


def _read_header(fh) -> dict:
    if _read_exact(fh, 4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, = struct.unpack("<H", _read_exact(fh, 2))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    size, = struct.unpack("<I", _read_exact(fh, 4))
    try:
        return json.loads(_read_exact(fh, size))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc


def load_checkpoint(path: str, vocabulary: Optional[Vocabulary] = None) -> EnsembleModel:
    """Read a checkpoint, verifying sizes and payload hash.

    If ``vocabulary`` is given it must match the one the model was trained on.
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"missing checkpoint: {path}")
    with open(path, "rb") as fh:
        meta = _read_header(fh)
        kind = ModelKind.parse(meta["kind"])
        n_ent, n_rel, d, d_rel = meta["entities"], meta["relations"], meta["d_l"], meta["d_rel"]
        digest = hashlib.sha256()
        replicas = []
        for seed in meta["seeds"]:
            tables = []
            for rows, width in ((n_ent, d), (n_rel, d_rel)):
                nbytes, = struct.unpack("<Q", _read_exact(fh, 8))
                if nbytes != rows * width * 8:
                    raise CheckpointError(
                        f"corrupt checkpoint: payload of {nbytes} bytes, expected {rows * width * 8}"
                    )
                raw = _read_exact(fh, nbytes)
                digest.update(raw)
                tables.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, width))
            replicas.append(ModelParams(kind, tables[0], tables[1], d, seed, meta["norm"]))
        if fh.read(1):
            raise CheckpointError("corrupt checkpoint: trailing bytes")
    if digest.hexdigest() != meta["payload_sha256"]:
        raise CheckpointError("corrupt checkpoint: payload hash mismatch")
    config = TrainConfig.from_dict(meta["config"]) if meta.get("config") else None
    model = EnsembleModel(replicas, meta["base_seed"], config, meta["vocabulary_hash"])
    if vocabulary is not None:
        model.check_vocabulary(vocabulary)
    return model
