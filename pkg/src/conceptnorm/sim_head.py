"""Cosine-similarity classification head over a trainable concept matrix.

A mention vector ``m`` is scored against every row ``c_i`` of the concept
matrix by cosine similarity; softmax over those scores gives a distribution
over concepts and training minimizes its cross-entropy against the gold
concept. Prediction is the argmax of the raw similarities.

All forward reductions go through ``einsum`` so that a score does not depend
on which batch it was computed in (BLAS ``matmul`` changes summation order
with the operand shapes).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateNorm, DimMismatch, InvalidDims, InvalidLabel

EPS = 1e-12
PROB_FLOOR = 1e-12


def init_concepts(n: int, d: int, seed: int = 0, dtype=np.float64) -> np.ndarray:
    """``n x d`` matrix with entries i.i.d. uniform on ``[-1/sqrt(d), 1/sqrt(d)]``."""
    if n < 1 or d < 1:
        raise InvalidDims(f"concept matrix needs N >= 1 and d >= 1, got N={n}, d={d}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    C = rng.uniform(-bound, bound, size=(n, d)).astype(dtype)
    while True:
        _, first = np.unique(C, axis=0, return_index=True)
        if len(first) == n:
            return C
        dup = np.setdiff1d(np.arange(n), first)
        C[dup] = rng.uniform(-bound, bound, size=(len(dup), d)).astype(dtype)


def _as_2d(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim != 2:
        raise DimMismatch(f"{name} must be a vector or a matrix, got shape {x.shape}")
    return x


def row_norms(X: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("nd,nd->n", X, X))


def similarity_matrix(M: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Cosine similarities ``Q[b, i] = CS(M[b], C[i])``, clamped to ``[-1, 1]``.

    Norms are floored at ``EPS`` so zero vectors score 0 instead of NaN.
    """
    M = _as_2d(M, "mention vectors")
    C = _as_2d(C, "concept matrix")
    if M.shape[1] != C.shape[1]:
        raise DimMismatch(f"mention dim {M.shape[1]} != concept dim {C.shape[1]}")
    dots = np.einsum("bd,nd->bn", M, C)
    m2 = np.einsum("bd,bd->b", M, M)[:, None]
    c2 = np.einsum("nd,nd->n", C, C)[None, :]
    # one square root of the product keeps CS(v, v) and CS(v, a*v) exactly 1
    floored = np.maximum(np.sqrt(m2), EPS) * np.maximum(np.sqrt(c2), EPS)
    denom = np.where((m2 >= EPS * EPS) & (c2 >= EPS * EPS), np.sqrt(m2 * c2), floored)
    return np.clip(dots / denom, -1.0, 1.0)


def cosine(m: np.ndarray, c: np.ndarray) -> float:
    m, c = np.asarray(m), np.asarray(c)
    if m.ndim != 1 or c.ndim != 1:
        raise DimMismatch("cosine takes two vectors")
    return float(similarity_matrix(m, c)[0, 0])


def similarity_vector(m: np.ndarray, C: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 1:
        raise DimMismatch(f"mention vector must be 1-D, got shape {m.shape}")
    return similarity_matrix(m, C)[0]


def softmax(q: np.ndarray) -> np.ndarray:
    """Row-wise softmax with the max subtracted first."""
    q = np.asarray(q)
    z = np.exp(q - q.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _gold_index(p: np.ndarray | int, n: int) -> int:
    if isinstance(p, (int, np.integer)):
        if not 0 <= p < n:
            raise InvalidLabel(f"gold index {p} outside [0, {n})")
        return int(p)
    p = np.asarray(p)
    if p.shape != (n,):
        raise InvalidLabel(f"label shape {p.shape} does not match {n} concepts")
    nz = np.flatnonzero(p)
    if len(nz) != 1 or p[nz[0]] != 1:
        raise InvalidLabel("label must be one-hot")
    return int(nz[0])


def one_hot(index: int, n: int, dtype=np.float64) -> np.ndarray:
    p = np.zeros(n, dtype=dtype)
    p[_gold_index(index, n)] = 1
    return p


def cross_entropy(q_hat: np.ndarray, p: np.ndarray | int) -> float:
    """``-log q_hat[gold]`` with the probability floored at ``PROB_FLOOR``.

    ``p`` is a one-hot vector or the gold index.
    """
    q_hat = np.asarray(q_hat)
    gold = _gold_index(p, len(q_hat))
    return float(-np.log(max(float(q_hat[gold]), PROB_FLOOR)))


def batch_cross_entropy(Q: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy of ``softmax(Q)`` against integer labels, via log-sum-exp."""
    shifted = Q - Q.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(len(gold)), gold] - logz
    return -np.maximum(logp, np.log(PROB_FLOOR))


def predict_batch(M: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Q = similarity_matrix(M, C)
    # np.argmax returns the first maximal index: lowest-index tie-break
    return Q.argmax(axis=1), Q


def predict(m: np.ndarray, C: np.ndarray) -> tuple[int, np.ndarray]:
    q = similarity_vector(m, C)
    return int(np.argmax(q)), q


def head_backward(
    M: np.ndarray, C: np.ndarray, Q: np.ndarray, G: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate ``G = dL/dQ`` through the cosine similarities.

    Uses the floored norms of the forward pass: where a norm sits on the floor
    it is a constant and the radial term vanishes. The clamp is treated as the
    identity (it only trims rounding excess).
    """
    mn, cn = row_norms(M), row_norms(C)
    mf, cf = np.maximum(mn, EPS), np.maximum(cn, EPS)
    S = G / (mf[:, None] * cf[None, :])
    GQ = G * Q
    m_radial = np.where(mn >= EPS, GQ.sum(axis=1) / mf**2, 0.0)
    c_radial = np.where(cn >= EPS, GQ.sum(axis=0) / cf**2, 0.0)
    dM = S @ C - m_radial[:, None] * M
    dC = S.T @ M - c_radial[:, None] * C
    return dM, dC


def head_gradients(
    m: np.ndarray, C: np.ndarray, p: np.ndarray | int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``cross_entropy(softmax(similarity_vector(m, C)), p)``.

    Returns ``(dL/dm, dL/dC)``. Raises :class:`DegenerateNorm` when ``m`` or a
    concept row is (numerically) zero, where cosine has no gradient.
    """
    m = np.asarray(m)
    C = np.asarray(C)
    q = similarity_vector(m, C)
    gold = _gold_index(p, C.shape[0])
    if np.linalg.norm(m) < EPS:
        raise DegenerateNorm("mention vector has zero norm")
    if np.any(row_norms(C) < EPS):
        raise DegenerateNorm("a concept embedding has zero norm")
    G = softmax(q)
    G[gold] -= 1.0
    dM, dC = head_backward(m[None, :], C, q[None, :], G[None, :])
    return dM[0], dC
