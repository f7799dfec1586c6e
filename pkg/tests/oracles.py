"""Independent reference computations used by the tests."""

import numpy as np

from kgensemble.embedding import ModelKind, ModelParams
from kgensemble.scoring import _split, _rotate

FD_STEP = 1e-6
SINGULAR_TOL = 1e-4


def central_diff(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = fn()
        flat[i] = old - step
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def distance_terms(kind: ModelKind, h, r, t, norm: int) -> np.ndarray:
    """The quantities whose zero makes a distance score non-differentiable."""
    if kind is ModelKind.TRANSE:
        v = h + r - t
        return np.abs(v) if norm == 1 else np.array([np.linalg.norm(v)])
    if kind is ModelKind.ROTATE:
        re, im = _split(_rotate(h, r) - t)
        return np.hypot(re, im)
    return np.array([np.inf])


def near_singular(kind, h, r, t, norm, tol=SINGULAR_TOL) -> bool:
    return bool(distance_terms(kind, h, r, t, norm).min() < tol)


def naive_score(kind: ModelKind, h, r, t, norm: int = 2) -> float:
    """Direct complex-arithmetic score of one triple."""
    if kind is ModelKind.TRANSE:
        return -float(np.linalg.norm(h + r - t, ord=norm))
    half = len(h) // 2
    if kind is ModelKind.ROTATE:
        hc = h[:half] + 1j * h[half:]
        tc = t[:half] + 1j * t[half:]
        return -float(np.abs(hc * np.exp(1j * r) - tc).sum())
    if kind in (ModelKind.DISTMULT, ModelKind.DISTMULT_N3):
        return float(np.sum(h * r * t))
    hc, rc, tc = (x[:half] + 1j * x[half:] for x in (h, r, t))
    return float(np.real(np.sum(hc * rc * np.conj(tc))))


def brute_force_rank(score_one, triple, known: set, n_entities: int, side: str) -> float:
    """Mean-tie filtered rank by scoring every candidate triple one at a time."""
    h, r, t = triple
    true = score_one((h, r, t))
    better = ties = 0
    for e in range(n_entities):
        cand = (h, r, e) if side == "tail" else (e, r, t)
        if cand == (h, r, t) or cand in known:
            continue
        s = score_one(cand)
        if s > true:
            better += 1
        elif s == true:
            ties += 1
    return 1.0 + better + ties / 2.0


class TableScorer:
    """Scores looked up in a random table: score(h, r, t) = T[r, h, t]."""

    def __init__(self, table: np.ndarray):
        self.table = table

    def one(self, triple) -> float:
        h, r, t = triple
        return float(self.table[r, h, t])

    def score_tails(self, heads, relations):
        return self.table[np.asarray(relations), np.asarray(heads), :]

    def score_heads(self, relations, tails):
        return self.table[np.asarray(relations), :, np.asarray(tails)]


def random_params(kind, n_ent, n_rel, d, rng, scale=1.0, norm=2) -> ModelParams:
    kind = ModelKind.parse(kind)
    ent = rng.normal(0, scale, size=(n_ent, d))
    rel = rng.normal(0, scale, size=(n_rel, kind.relation_width(d)))
    return ModelParams(kind, ent, rel, d, 0, norm)
