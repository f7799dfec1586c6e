"""Embedding tables, model kinds and Xavier initialization."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np


class ModelKind(str, enum.Enum):
    TRANSE = "TransE"
    ROTATE = "RotatE"
    DISTMULT = "DistMult"
    COMPLEX = "ComplEx"
    DISTMULT_N3 = "DistMultN3"
    COMPLEX_N3 = "ComplExN3"

    @classmethod
    def parse(cls, name: "str | ModelKind") -> "ModelKind":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("_", "").replace("-", "")
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise ValueError(f"unknown model kind {name!r}; expected one of {[k.value for k in cls]}")

    @property
    def is_complex(self) -> bool:
        return self in (ModelKind.ROTATE, ModelKind.COMPLEX, ModelKind.COMPLEX_N3)

    @property
    def is_distance(self) -> bool:
        return self in (ModelKind.TRANSE, ModelKind.ROTATE)

    @property
    def uses_n3(self) -> bool:
        return self in (ModelKind.DISTMULT_N3, ModelKind.COMPLEX_N3)

    def relation_width(self, d: int) -> int:
        # RotatE relations are d/2 phase angles
        return d // 2 if self is ModelKind.ROTATE else d


def xavier_init(rows: int, width: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Fill a ``rows x width`` table with Xavier values.

    For an embedding lookup the fan-in is the table width and the fan-out
    is zero, so ``uniform`` draws from U(-a, a) with ``a = sqrt(6 / width)``
    and ``normal`` draws from N(0, sigma^2) with ``sigma = sqrt(2 / width)``.
    """
    if rows < 1 or width < 1:
        raise ValueError(f"table must have at least one row and column, got {rows}x{width}")
    if mode == "uniform":
        a = np.sqrt(6.0 / width)
        return rng.uniform(-a, a, size=(rows, width))
    if mode == "normal":
        sigma = np.sqrt(2.0 / width)
        return rng.normal(0.0, sigma, size=(rows, width))
    raise ValueError(f"unknown init mode {mode!r}")


@dataclass
class ModelParams:
    """One replica: entity table ``|E| x d`` and relation table ``|R| x d_rel``.

    Complex kinds store each row as ``d/2`` real parts followed by ``d/2``
    imaginary parts. ``norm`` is the TransE distance order.
    """

    kind: ModelKind
    entity: np.ndarray
    relation: np.ndarray
    d: int
    seed: int
    norm: int = 2

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind)
        check_geometry(self.kind, self.d)
        rw = self.kind.relation_width(self.d)
        if self.entity.ndim != 2 or self.entity.shape[1] != self.d:
            raise ValueError(f"entity table must have width {self.d}, got {self.entity.shape}")
        if self.relation.ndim != 2 or self.relation.shape[1] != rw:
            raise ValueError(f"relation table must have width {rw}, got {self.relation.shape}")
        if self.norm not in (1, 2):
            raise ValueError(f"norm order must be 1 or 2, got {self.norm}")

    @property
    def n_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation.shape[0]

    @property
    def d_rel(self) -> int:
        return self.relation.shape[1]

    def copy(self) -> "ModelParams":
        return replace(self, entity=self.entity.copy(), relation=self.relation.copy())

    # scorer protocol used by evaluation; see kgensemble.scoring

    def score_triples(self, triples: np.ndarray) -> np.ndarray:
        from .scoring import score_triples

        return score_triples(self, triples)

    def score_tails(self, heads: np.ndarray, relations: np.ndarray) -> np.ndarray:
        from .scoring import score_all_tails

        return score_all_tails(self, heads, relations)

    def score_heads(self, relations: np.ndarray, tails: np.ndarray) -> np.ndarray:
        from .scoring import score_all_heads

        return score_all_heads(self, relations, tails)


def check_geometry(kind: ModelKind, d: int) -> None:
    if d < 1:
        raise ValueError(f"embedding size must be positive, got {d}")
    if kind.is_complex and d % 2:
        raise ValueError(f"odd size for complex geometry: {kind.value} needs an even d, got {d}")


INIT_MODE = {
    ModelKind.TRANSE: "normal",
    ModelKind.ROTATE: "normal",
    ModelKind.DISTMULT: "uniform",
    ModelKind.COMPLEX: "uniform",
    ModelKind.DISTMULT_N3: "uniform",
    ModelKind.COMPLEX_N3: "uniform",
}


def init_model(
    kind,
    entities: int,
    relations: int,
    d: int,
    seed: int,
    norm: int = 2,
    n3_scale: float = 0.1,
) -> ModelParams:
    """Allocate and initialize one replica, deterministically in ``seed``.

    The N3 kinds start from Xavier-uniform values shrunk by ``n3_scale``.
    """
    kind = ModelKind.parse(kind)
    check_geometry(kind, d)
    rng = np.random.default_rng(seed)
    mode = INIT_MODE[kind]
    ent = xavier_init(entities, d, mode, rng)
    rel = xavier_init(relations, kind.relation_width(d), mode, rng)
    if kind.uses_n3:
        ent *= n3_scale
        rel *= n3_scale
    return ModelParams(kind, ent, rel, d, seed, norm)
