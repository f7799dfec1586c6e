"""Score functions f(h, r, t) and their analytic gradients.

Every routine works on gathered embedding rows, so the same code scores a
single triple, a batch of triples or a block of corrupted candidates.
Complex rows hold real parts in the first half and imaginary parts in the
second half. The derivative of a norm at zero is taken as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import ModelKind, ModelParams

# candidate scoring works on blocks of at most this many float64 temporaries
_BLOCK_ELEMENTS = 1 << 22


@dataclass
class ScoreGradient:
    d_head: np.ndarray
    d_relation: np.ndarray
    d_tail: np.ndarray


def _split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = x.shape[-1] // 2
    return x[..., :half], x[..., half:]


def _join(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    return np.concatenate([re, im], axis=-1)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape))
    np.divide(num, den, out=out, where=den > 0)
    return out


def _rotate(x: np.ndarray, phase: np.ndarray) -> np.ndarray:
    re, im = _split(x)
    c, s = np.cos(phase), np.sin(phase)
    return _join(re * c - im * s, re * s + im * c)


def forward(kind: ModelKind, h: np.ndarray, r: np.ndarray, t: np.ndarray, norm: int = 2) -> np.ndarray:
    """Scores for aligned rows of head, relation and tail embeddings."""
    if kind is ModelKind.TRANSE:
        v = h + r - t
        if norm == 1:
            return -np.abs(v).sum(axis=-1)
        return -np.sqrt((v * v).sum(axis=-1))
    if kind is ModelKind.ROTATE:
        u_re, u_im = _split(_rotate(h, r) - t)
        return -np.sqrt(u_re * u_re + u_im * u_im).sum(axis=-1)
    if kind in (ModelKind.DISTMULT, ModelKind.DISTMULT_N3):
        return (h * r * t).sum(axis=-1)
    h_re, h_im = _split(h)
    r_re, r_im = _split(r)
    t_re, t_im = _split(t)
    return ((h_re * r_re - h_im * r_im) * t_re + (h_re * r_im + h_im * r_re) * t_im).sum(axis=-1)


def backward(kind: ModelKind, h: np.ndarray, r: np.ndarray, t: np.ndarray, norm: int = 2):
    """Partial derivatives of each row's score w.r.t. ``h``, ``r`` and ``t``."""
    if kind is ModelKind.TRANSE:
        v = h + r - t
        if norm == 1:
            g = -np.sign(v)
        else:
            g = -_safe_div(v, np.sqrt((v * v).sum(axis=-1, keepdims=True)))
        return g, g.copy(), -g
    if kind is ModelKind.ROTATE:
        hr = _rotate(h, r)
        u_re, u_im = _split(hr - t)
        m = np.sqrt(u_re * u_re + u_im * u_im)
        g_re, g_im = -_safe_div(u_re, m), -_safe_div(u_im, m)
        c, s = np.cos(r), np.sin(r)
        hr_re, hr_im = _split(hr)
        dh = _join(g_re * c + g_im * s, -g_re * s + g_im * c)
        dr = -g_re * hr_im + g_im * hr_re
        return dh, dr, _join(-g_re, -g_im)
    if kind in (ModelKind.DISTMULT, ModelKind.DISTMULT_N3):
        return r * t, h * t, h * r
    h_re, h_im = _split(h)
    r_re, r_im = _split(r)
    t_re, t_im = _split(t)
    dh = _join(r_re * t_re + r_im * t_im, r_re * t_im - r_im * t_re)
    dr = _join(h_re * t_re + h_im * t_im, h_re * t_im - h_im * t_re)
    dt = _join(h_re * r_re - h_im * r_im, h_re * r_im + h_im * r_re)
    return dh, dr, dt


def _check_ids(params: ModelParams, triples: np.ndarray) -> np.ndarray:
    triples = np.asarray(triples, dtype=np.int64)
    if triples.ndim == 1:
        triples = triples[None, :]
    if len(triples) and (
        triples.min() < 0
        or triples[:, [0, 2]].max() >= params.n_entities
        or triples[:, 1].max() >= params.n_relations
    ):
        raise IndexError("triple id out of bounds for this model")
    return triples


def score_triples(params: ModelParams, triples: np.ndarray) -> np.ndarray:
    triples = _check_ids(params, triples)
    h = params.entity[triples[:, 0]]
    r = params.relation[triples[:, 1]]
    t = params.entity[triples[:, 2]]
    return forward(params.kind, h, r, t, params.norm)


def score(params: ModelParams, triple) -> float:
    return float(score_triples(params, triple)[0])


def score_gradient(params: ModelParams, triple) -> ScoreGradient:
    (hi, ri, ti), = _check_ids(params, triple)
    h, r, t = params.entity[hi], params.relation[ri], params.entity[ti]
    return ScoreGradient(*backward(params.kind, h, r, t, params.norm))


# bilinear kinds: f(h, r, t') = <tail_query(h, r), t'> and f(h', r, t) = <h', head_query(r, t)>

def tail_query(kind: ModelKind, h: np.ndarray, r: np.ndarray) -> np.ndarray:
    if kind in (ModelKind.DISTMULT, ModelKind.DISTMULT_N3):
        return h * r
    h_re, h_im = _split(h)
    r_re, r_im = _split(r)
    return _join(h_re * r_re - h_im * r_im, h_re * r_im + h_im * r_re)


def tail_query_vjp(kind: ModelKind, h, r, gq):
    if kind in (ModelKind.DISTMULT, ModelKind.DISTMULT_N3):
        return gq * r, gq * h
    h_re, h_im = _split(h)
    r_re, r_im = _split(r)
    g_re, g_im = _split(gq)
    gh = _join(g_re * r_re + g_im * r_im, -g_re * r_im + g_im * r_re)
    gr = _join(g_re * h_re + g_im * h_im, -g_re * h_im + g_im * h_re)
    return gh, gr


def head_query(kind: ModelKind, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    if kind in (ModelKind.DISTMULT, ModelKind.DISTMULT_N3):
        return r * t
    r_re, r_im = _split(r)
    t_re, t_im = _split(t)
    return _join(r_re * t_re + r_im * t_im, r_re * t_im - r_im * t_re)


def head_query_vjp(kind: ModelKind, r, t, gp):
    if kind in (ModelKind.DISTMULT, ModelKind.DISTMULT_N3):
        return gp * t, gp * r
    r_re, r_im = _split(r)
    t_re, t_im = _split(t)
    g_re, g_im = _split(gp)
    gr = _join(g_re * t_re + g_im * t_im, g_re * t_im - g_im * t_re)
    gt = _join(g_re * r_re - g_im * r_im, g_re * r_im + g_im * r_re)
    return gr, gt


def _distance_to_all(q: np.ndarray, table: np.ndarray, kind: ModelKind, norm: int) -> np.ndarray:
    n, (m, d) = len(q), table.shape
    out = np.empty((n, m))
    step = max(1, _BLOCK_ELEMENTS // max(1, m * d))
    for s in range(0, n, step):
        diff = q[s:s + step, None, :] - table[None, :, :]
        if kind is ModelKind.ROTATE:
            re, im = _split(diff)
            out[s:s + step] = -np.sqrt(re * re + im * im).sum(axis=-1)
        elif norm == 1:
            out[s:s + step] = -np.abs(diff).sum(axis=-1)
        else:
            out[s:s + step] = -np.sqrt((diff * diff).sum(axis=-1))
    return out


def score_all_tails(params: ModelParams, heads: np.ndarray, relations: np.ndarray) -> np.ndarray:
    """``(n, |E|)`` scores of ``(heads[i], relations[i], t')`` for every entity t'."""
    kind = params.kind
    h = params.entity[np.asarray(heads)]
    r = params.relation[np.asarray(relations)]
    if kind is ModelKind.TRANSE:
        return _distance_to_all(h + r, params.entity, kind, params.norm)
    if kind is ModelKind.ROTATE:
        return _distance_to_all(_rotate(h, r), params.entity, kind, params.norm)
    return tail_query(kind, h, r) @ params.entity.T


def score_all_heads(params: ModelParams, relations: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """``(n, |E|)`` scores of ``(h', relations[i], tails[i])`` for every entity h'."""
    kind = params.kind
    r = params.relation[np.asarray(relations)]
    t = params.entity[np.asarray(tails)]
    if kind is ModelKind.TRANSE:
        # -||h' + r - t|| = -||h' - (t - r)||
        return _distance_to_all(t - r, params.entity, kind, params.norm)
    if kind is ModelKind.ROTATE:
        # unit-modulus rotation: |h' r - t| = |h' - t conj(r)|
        return _distance_to_all(_rotate(t, -r), params.entity, kind, params.norm)
    return head_query(kind, r, t) @ params.entity.T
