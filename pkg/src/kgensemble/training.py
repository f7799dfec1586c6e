"""Single-replica training: negative sampling, losses, optimizers, early stop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .data import Dataset, FilterIndex, build_filter_index
from .embedding import ModelKind, ModelParams
from .scoring import (
    backward,
    forward,
    head_query,
    head_query_vjp,
    tail_query,
    tail_query_vjp,
)

logger = logging.getLogger(__name__)

LOSSES = ("binary-logistic", "multiclass-n3")
OPTIMIZERS = ("adam", "adagrad")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters shared by every replica of an ensemble.

    ``lam`` is the regularization coefficient (L2 for the binary loss,
    N3 for the multiclass loss). ``batches`` is the number of mini-batches
    per epoch for the binary loss; the multiclass loss uses fixed batches
    of ``batch_size`` positives instead.
    """

    loss: str = "binary-logistic"
    gamma: float = 0.0
    eta: int = 1
    lam: float = 0.0
    optimizer: str = "adam"
    lr: float = 0.0003
    batches: int = 100
    batch_size: int = 1000
    max_epochs: int = 5000
    valid_every: int = 50
    patience: int = 3
    norm: int = 2
    seed: int = 0
    self_adversarial: bool = True
    n3_scale: float = 0.1

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")
        if self.eta < 1 or self.batches < 1 or self.batch_size < 1:
            raise ValueError("eta, batches and batch_size must be >= 1")
        if self.patience < 1 or self.valid_every < 1 or self.max_epochs < 0:
            raise ValueError("patience and valid_every must be >= 1, max_epochs >= 0")
        if self.norm not in (1, 2):
            raise ValueError("norm must be 1 or 2")

    @classmethod
    def for_kind(cls, kind, **overrides) -> "TrainConfig":
        """Defaults for ``kind``: Adam/binary loss, or Adagrad/multiclass for N3 kinds."""
        if ModelKind.parse(kind).uses_n3:
            base = {"loss": "multiclass-n3", "optimizer": "adagrad", "lr": 0.1}
        else:
            base = {}
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def check_kind(self, kind: ModelKind) -> None:
        if self.loss == "multiclass-n3" and not kind.uses_n3:
            raise ValueError(f"multiclass-n3 loss needs DistMultN3 or ComplExN3, got {kind.value}")


# negative sampling

@dataclass
class NegativeBatch:
    triples: np.ndarray
    side: str


def corrupt(positives: np.ndarray, eta: int, side: str, entities: int, rng: np.random.Generator) -> np.ndarray:
    """``(B, eta, 3)`` corruptions of ``positives`` on one side.

    Replacement ids are uniform over the ``entities - 1`` ids different
    from the original; known positives are not filtered out.
    """
    if entities < 2:
        raise ValueError("need at least two entities to corrupt a triple")
    if side not in ("head", "tail"):
        raise ValueError(f"side must be 'head' or 'tail', got {side!r}")
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    col = 0 if side == "head" else 2
    orig = positives[:, col][:, None]
    draw = rng.integers(0, entities - 1, size=(len(positives), eta))
    draw += draw >= orig
    out = np.repeat(positives[:, None, :], eta, axis=1)
    out[:, :, col] = draw
    return out


def sample_negatives(positive, eta: int, side: str, entities: int, rng: np.random.Generator) -> NegativeBatch:
    return NegativeBatch(corrupt(np.asarray(positive)[None, :], eta, side, entities, rng)[0], side)


def adversarial_weights(neg_scores) -> np.ndarray:
    """Softmax over the last axis, shifted by the max for stability."""
    s = np.asarray(neg_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("need at least one negative score")
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# losses

@dataclass
class Gradients:
    """Sparse gradient: unique row ids and summed rows per table."""

    entity_ids: np.ndarray
    entity_rows: np.ndarray
    relation_ids: np.ndarray
    relation_rows: np.ndarray

    @classmethod
    def collect(cls, ent_ids, ent_rows, rel_ids, rel_rows) -> "Gradients":
        e_ids, e_rows = _reduce_rows(np.concatenate(ent_ids), np.concatenate(ent_rows))
        r_ids, r_rows = _reduce_rows(np.concatenate(rel_ids), np.concatenate(rel_rows))
        return cls(e_ids, e_rows, r_ids, r_rows)

    def scaled(self, factor: float) -> "Gradients":
        return Gradients(self.entity_ids, self.entity_rows * factor,
                         self.relation_ids, self.relation_rows * factor)

    def merge(self, other: "Gradients") -> "Gradients":
        e_ids, e_rows = _reduce_rows(np.concatenate([self.entity_ids, other.entity_ids]),
                                     np.concatenate([self.entity_rows, other.entity_rows]))
        r_ids, r_rows = _reduce_rows(np.concatenate([self.relation_ids, other.relation_ids]),
                                     np.concatenate([self.relation_rows, other.relation_rows]))
        return Gradients(e_ids, e_rows, r_ids, r_rows)

    def dense(self, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
        ge = np.zeros_like(params.entity)
        gr = np.zeros_like(params.relation)
        ge[self.entity_ids] = self.entity_rows
        gr[self.relation_ids] = self.relation_rows
        return ge, gr


def _reduce_rows(ids: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum ``rows`` sharing an id; returns sorted unique ids and their sums."""
    if len(ids) == 0:
        return ids, rows
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    starts = np.flatnonzero(np.concatenate([[True], ids[1:] != ids[:-1]]))
    return ids[starts], np.add.reduceat(rows[order], starts, axis=0)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def _check_finite(values: np.ndarray, triples: np.ndarray) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise TrainingError(f"non-finite loss at triple {tuple(triples[i].tolist())}")


def _infer_side(positives: np.ndarray, negatives: np.ndarray) -> str:
    if np.array_equal(negatives[:, :, 0], np.broadcast_to(positives[:, :1], negatives.shape[:2])):
        return "tail"
    return "head"


def _binary_terms(params, positives, negatives, config, side, weights=None):
    """Per-positive losses plus unscaled gradient pieces for one corruption side."""
    kind, norm = params.kind, params.norm
    E, R = params.entity, params.relation
    gamma, lam = config.gamma, config.lam
    eta = negatives.shape[1]

    hp, rp, tp = E[positives[:, 0]], R[positives[:, 1]], E[positives[:, 2]]
    fp = forward(kind, hp, rp, tp, norm)
    col = 2 if side == "tail" else 0
    corrupted = negatives[:, :, col]
    if side == "tail":
        hn, tn = hp[:, None, :], E[corrupted]
    else:
        hn, tn = E[corrupted], tp[:, None, :]
    rn = rp[:, None, :]
    fn = forward(kind, hn, rn, tn, norm)

    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).reshape(fn.shape)
    elif config.self_adversarial:
        w = adversarial_weights(fn)
    else:
        w = np.full_like(fn, 1.0 / eta)

    reg = (hp * hp).sum(1) + (rp * rp).sum(1) + (tp * tp).sum(1)
    per_triple = -_log_sigmoid(gamma + fp) - (w * _log_sigmoid(-gamma - fn)).sum(1) + lam * reg
    _check_finite(per_triple, positives)

    d_fp = -_sigmoid(-gamma - fp)[:, None]
    d_fn = (w * _sigmoid(gamma + fn))[:, :, None]
    dh, dr, dt = backward(kind, hp, rp, tp, norm)
    g_h = d_fp * dh + 2 * lam * hp
    g_r = d_fp * dr + 2 * lam * rp
    g_t = d_fp * dt + 2 * lam * tp
    dh, dr, dt = backward(kind, hn, rn, tn, norm)
    g_r = g_r + (d_fn * dr).sum(1)
    if side == "tail":
        g_h = g_h + (d_fn * dh).sum(1)
        g_c = d_fn * dt
    else:
        g_t = g_t + (d_fn * dt).sum(1)
        g_c = d_fn * dh
    g_c = np.broadcast_to(g_c, corrupted.shape + (E.shape[1],)).reshape(-1, E.shape[1])
    ent = ([positives[:, 0], positives[:, 2], corrupted.reshape(-1)], [g_h, g_t, g_c])
    rel = ([positives[:, 1]], [g_r])
    return per_triple, ent, rel


def binary_logistic_batch(
    params: ModelParams,
    positives: np.ndarray,
    negatives: np.ndarray,
    config: TrainConfig,
    side: Optional[str] = None,
    weights: Optional[np.ndarray] = None,
) -> tuple[float, Gradients]:
    """Mean margin-based logistic loss over a batch, with its gradient.

    ``negatives`` has shape ``(B, eta, 3)`` and corrupts one side of each
    positive. Negative weights come from the softmax of the negative scores
    (or ``1/eta`` when self-adversarial weighting is off, or ``weights``
    when given) and are held constant when differentiating.
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    side = side or _infer_side(positives, negatives)
    per_triple, ent, rel = _binary_terms(params, positives, negatives, config, side, weights)
    scale = 1.0 / len(positives)
    grads = Gradients.collect(ent[0], [g * scale for g in ent[1]], rel[0], [g * scale for g in rel[1]])
    return float(per_triple.mean()), grads


def binary_two_sided(params, positives, neg_heads, neg_tails, config) -> tuple[float, Gradients]:
    """Average of the head-corrupted and tail-corrupted batch losses."""
    lh, ent_h, rel_h = _binary_terms(params, positives, neg_heads, config, "head")
    lt, ent_t, rel_t = _binary_terms(params, positives, neg_tails, config, "tail")
    scale = 0.5 / len(positives)
    grads = Gradients.collect(
        ent_h[0] + ent_t[0], [g * scale for g in ent_h[1] + ent_t[1]],
        rel_h[0] + rel_t[0], [g * scale for g in rel_h[1] + rel_t[1]],
    )
    return float(0.5 * (lh.mean() + lt.mean())), grads


def binary_logistic_loss(
    params: ModelParams, positive, negatives: NegativeBatch, config: TrainConfig
) -> tuple[float, Gradients]:
    pos = np.asarray(positive, dtype=np.int64).reshape(1, 3)
    return binary_logistic_batch(params, pos, negatives.triples[None, :, :], config, negatives.side)


def _n3(x: np.ndarray, complex_rows: bool) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise sum of cubed moduli and its gradient."""
    if complex_rows:
        half = x.shape[-1] // 2
        re, im = x[:, :half], x[:, half:]
        m = np.sqrt(re * re + im * im)
        return (m ** 3).sum(1), 3 * np.concatenate([m * re, m * im], axis=1)
    a = np.abs(x)
    return (a ** 3).sum(1), 3 * a * x


def _log_softmax_grad(scores: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Negative log-softmax at ``target`` per row, and its gradient w.r.t. scores."""
    rows = np.arange(len(target))
    shift = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - shift)
    z = e.sum(axis=1, keepdims=True)
    loss = (np.log(z[:, 0]) + shift[:, 0]) - scores[rows, target]
    g = e / z
    g[rows, target] -= 1.0
    return loss, g


def multiclass_n3_batch(params: ModelParams, positives: np.ndarray, config: TrainConfig) -> tuple[float, Gradients]:
    """Mean full-softmax loss over head and tail replacements plus N3 penalty."""
    kind = params.kind
    if not kind.uses_n3:
        raise ValueError(f"multiclass-n3 loss needs DistMultN3 or ComplExN3, got {kind.value}")
    E, R = params.entity, params.relation
    B = len(positives)
    h_ids, r_ids, t_ids = positives[:, 0], positives[:, 1], positives[:, 2]
    h, r, t = E[h_ids], R[r_ids], E[t_ids]

    q = tail_query(kind, h, r)
    p = head_query(kind, r, t)
    loss_t, g_t = _log_softmax_grad(q @ E.T, t_ids)
    loss_h, g_h = _log_softmax_grad(p @ E.T, h_ids)

    cplx = kind.is_complex
    n3_h, dn3_h = _n3(h, cplx)
    n3_r, dn3_r = _n3(r, cplx)
    n3_t, dn3_t = _n3(t, cplx)
    per_triple = loss_t + loss_h + config.lam * (n3_h + n3_r + n3_t)
    _check_finite(per_triple, positives)

    scale = 1.0 / B
    g_t *= scale
    g_h *= scale
    g_ent = g_t.T @ q + g_h.T @ p
    gh, gr1 = tail_query_vjp(kind, h, r, g_t @ E)
    gr2, gt = head_query_vjp(kind, r, t, g_h @ E)
    lam = config.lam * scale
    gh += lam * dn3_h
    gt += lam * dn3_t
    gr = gr1 + gr2 + lam * dn3_r

    np.add.at(g_ent, h_ids, gh)
    np.add.at(g_ent, t_ids, gt)
    rel_ids, rel_rows = _reduce_rows(r_ids, gr)
    return float(per_triple.mean()), Gradients(np.arange(E.shape[0]), g_ent, rel_ids, rel_rows)


def multiclass_n3_loss(params: ModelParams, positive, config: TrainConfig) -> tuple[float, Gradients]:
    return multiclass_n3_batch(params, np.asarray(positive, dtype=np.int64).reshape(1, 3), config)


# optimizers

class Adam:
    """Lazy sparse Adam: only rows present in a gradient decay and move."""

    def __init__(self, params: ModelParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {"entity": np.zeros_like(params.entity), "relation": np.zeros_like(params.relation)}
        self.v = {"entity": np.zeros_like(params.entity), "relation": np.zeros_like(params.relation)}

    def _update(self, table, name, ids, g):
        m, v = self.m[name], self.v[name]
        m[ids] = self.beta1 * m[ids] + (1 - self.beta1) * g
        v[ids] = self.beta2 * v[ids] + (1 - self.beta2) * g * g
        m_hat = m[ids] / (1 - self.beta1 ** self.step_count)
        v_hat = v[ids] / (1 - self.beta2 ** self.step_count)
        table[ids] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, params: ModelParams, grads: Gradients) -> None:
        _check_dims(params, grads)
        self.step_count += 1
        self._update(params.entity, "entity", grads.entity_ids, grads.entity_rows)
        self._update(params.relation, "relation", grads.relation_ids, grads.relation_rows)


class Adagrad:
    def __init__(self, params: ModelParams, lr: float, eps: float = 1e-10):
        self.lr = lr
        self.eps = eps
        self.step_count = 0
        self.acc = {"entity": np.zeros_like(params.entity), "relation": np.zeros_like(params.relation)}

    def _update(self, table, name, ids, g):
        acc = self.acc[name]
        acc[ids] += g * g
        table[ids] -= self.lr * g / np.sqrt(acc[ids] + self.eps)

    def step(self, params: ModelParams, grads: Gradients) -> None:
        _check_dims(params, grads)
        self.step_count += 1
        self._update(params.entity, "entity", grads.entity_ids, grads.entity_rows)
        self._update(params.relation, "relation", grads.relation_ids, grads.relation_rows)


def _check_dims(params: ModelParams, grads: Gradients) -> None:
    if grads.entity_rows.shape[1:] != params.entity.shape[1:] or \
            grads.relation_rows.shape[1:] != params.relation.shape[1:]:
        raise ValueError(
            f"gradient widths {grads.entity_rows.shape[1:]}/{grads.relation_rows.shape[1:]} "
            f"do not match parameter widths {params.entity.shape[1:]}/{params.relation.shape[1:]}"
        )


def make_optimizer(params: ModelParams, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, config.lr)
    return Adagrad(params, config.lr)


def optimizer_step(state, params: ModelParams, grads: Gradients, config: Optional[TrainConfig] = None) -> None:
    state.step(params, grads)


# epoch driver

@dataclass
class EpochStats:
    mean_loss: float
    triples: int
    seconds: float


def _drop_frozen(grads: Gradients, trainable: Optional[np.ndarray]) -> Gradients:
    if trainable is None:
        return grads
    keep = trainable[grads.entity_ids]
    if keep.all():
        return grads
    return Gradients(grads.entity_ids[keep], grads.entity_rows[keep],
                     grads.relation_ids, grads.relation_rows)


def train_epoch(
    params: ModelParams,
    optimizer,
    dataset: Dataset,
    config: TrainConfig,
    rng: np.random.Generator,
    trainable: Optional[np.ndarray] = None,
) -> EpochStats:
    """One pass over the shuffled training split.

    ``trainable`` masks entity rows allowed to move; rows outside it (ids
    never seen in training) keep their initial values.
    """
    start = time.perf_counter()
    train = dataset.train
    shuffled = train[rng.permutation(len(train))]
    n_ent = params.n_entities
    total, seen = 0.0, 0

    if config.loss == "binary-logistic":
        batches = np.array_split(shuffled, config.batches)
    else:
        batches = [shuffled[s:s + config.batch_size] for s in range(0, len(shuffled), config.batch_size)]

    for batch in batches:
        if len(batch) == 0:
            continue
        if config.loss == "binary-logistic":
            neg_h = corrupt(batch, config.eta, "head", n_ent, rng)
            neg_t = corrupt(batch, config.eta, "tail", n_ent, rng)
            loss, grads = binary_two_sided(params, batch, neg_h, neg_t, config)
        else:
            loss, grads = multiclass_n3_batch(params, batch, config)
        optimizer.step(params, _drop_frozen(grads, trainable))
        total += loss * len(batch)
        seen += len(batch)

    return EpochStats(total / seen if seen else float("nan"), seen, time.perf_counter() - start)


@dataclass
class CurveRow:
    epoch: int
    mean_loss: float
    valid_mrr: Optional[float]
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[CurveRow] = field(default_factory=list)
    best_mrr: Optional[float] = None
    best_epoch: int = 0
    epochs_run: int = 0


def write_curve(curve: list[CurveRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "valid_mrr", "wall_seconds"])
        for row in curve:
            w.writerow([
                row.epoch,
                repr(row.mean_loss),
                "" if row.valid_mrr is None else repr(row.valid_mrr),
                f"{row.seconds:.6f}",
            ])


def training_rng(seed: int) -> np.random.Generator:
    # separate stream from the one init_model draws from
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


def train_with_early_stop(
    params: ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    filter_index: Optional[FilterIndex] = None,
    evaluate: Optional[Callable[[ModelParams], float]] = None,
    rng: Optional[np.random.Generator] = None,
) -> TrainResult:
    """Train ``params`` in place, validating every ``valid_every`` epochs.

    Returns the snapshot with the best validation MRR. Training stops
    after ``patience`` consecutive validations without improvement or at
    ``max_epochs``. An empty validation split disables early stopping.
    ``evaluate`` overrides the validation metric (defaults to filtered MRR
    on the valid split).
    """
    config.check_kind(params.kind)
    rng = training_rng(params.seed) if rng is None else rng
    optimizer = make_optimizer(params, config)
    trainable = dataset.train_entity_mask()
    if trainable.all():
        trainable = None

    if evaluate is None and len(dataset.valid):
        from .evaluation import evaluate_model

        fi = filter_index or build_filter_index(dataset)
        evaluate = lambda p: evaluate_model(p, dataset, fi, split="valid").mrr  # noqa: E731
    validate = evaluate is not None
    if not validate:
        logger.warning("empty validation split: early stopping disabled")

    result = TrainResult(params.copy())
    best = -math.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        try:
            stats = train_epoch(params, optimizer, dataset, config, rng, trainable)
        except TrainingError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from exc
        if not np.isfinite(stats.mean_loss):
            raise TrainingError(f"non-finite mean loss at epoch {epoch}")
        row = CurveRow(epoch, stats.mean_loss, None, stats.seconds)
        result.curve.append(row)
        result.epochs_run = epoch
        last = epoch == config.max_epochs
        if not validate:
            if last:
                result.params = params.copy()
                result.best_epoch = epoch
            continue
        if epoch % config.valid_every and not last:
            continue
        mrr = float(evaluate(params))
        row.valid_mrr = mrr
        logger.info("epoch %d loss %.5f valid MRR %.4f", epoch, stats.mean_loss, mrr)
        if mrr > best:
            best, stale = mrr, 0
            result.params = params.copy()
            result.best_mrr = mrr
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    return result
