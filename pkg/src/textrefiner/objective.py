"""Classification, semantic and regularization losses plus the prediction rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.01
    lambda1: float = 0.02
    lambda2: float = 20.0
    k: int = 5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self.lambda1}, {self.lambda2}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    sem: float
    reg: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"cls": self.cls, "sem": self.sem, "reg": self.reg, "total": self.total}


def _labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape != (n_rows,):
        raise LabelError(f"expected {n_rows} labels, got shape {lab.shape}")
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= n_classes:
        raise LabelError(f"labels must lie in [0, {n_classes}), got {lab.tolist()}")
    return lab


def contrastive_nll(queries, refined, labels, tau: float) -> nk.DiffValue:
    """Mean over query rows of -log softmax(cos(q, E_hat) / tau)[label]."""
    q = nk.const(queries)
    lab = _labels(labels, q.shape[0], nk.value_of(refined).shape[0])
    logits = nk.scale(nk.cosine_sim(q, refined), 1.0 / tau)
    return nk.scale(nk.mean_all(nk.pick(nk.row_log_softmax(logits), lab)), -1.0)


def cls_loss(features, refined, labels, tau: float) -> nk.DiffValue:
    """Contrastive classification loss of global image features (batch mean)."""
    return contrastive_nll(features, refined, labels, tau)


def top_k_indices(attn, k: int) -> np.ndarray:
    """Indices of the k highest attention scores, descending, lowest index on ties."""
    a = np.asarray(attn, dtype=np.float64).reshape(-1)
    if k > a.size:
        raise ValueError(f"k={k} exceeds the number of tokens {a.size}")
    return np.argsort(-a, kind="stable")[:k]


def semantic_pool(attn, k: int) -> np.ndarray:
    """Constant (B*(k+1)) x (B*N) selection matrix for a batch of attention rows.

    Multiplying it by the stacked aligned tokens of the batch yields, per
    sample, its top-k tokens followed by the mean of all its tokens.
    """
    attn = np.atleast_2d(np.asarray(attn, dtype=np.float64))
    b, n = attn.shape
    pool = np.zeros((b * (k + 1), b * n))
    for s in range(b):
        r0, c0 = s * (k + 1), s * n
        for r, i in enumerate(top_k_indices(attn[s], k)):
            pool[r0 + r, c0 + i] = 1.0
        pool[r0 + k, c0 : c0 + n] = 1.0 / n
    return pool


def semantic_token_set(aligned, attn, k: int) -> nk.DiffValue:
    """(k+1) x d set of the top-k aligned tokens and the mean aligned token."""
    return nk.mat_mul(semantic_pool(attn, k), aligned)


def sem_loss(token_set, refined, labels, tau: float) -> nk.DiffValue:
    """Semantic loss as a negative log-likelihood averaged over the token-set rows.

    ``labels`` is either one label for the whole set or one per row.
    """
    s = nk.const(token_set)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.size == 1:
        lab = np.repeat(lab, s.shape[0])
    return contrastive_nll(s, refined, lab, tau)


def reg_loss(effective, refined) -> nk.DiffValue:
    """Mean absolute elementwise difference."""
    e, r = nk.const(effective), nk.const(refined)
    if e.shape != r.shape:
        raise nk.DimensionError(f"reg_loss: shapes differ, {e.shape} vs {r.shape}")
    return nk.mean_all(nk.abs_(nk.sub(e, r)))


def combine(cls, sem, reg, lambda1: float, lambda2: float) -> nk.DiffValue:
    return nk.add(nk.add(cls, nk.scale(sem, lambda1)), nk.scale(reg, lambda2))


def total_loss(cls: float, sem: float, reg: float, lambda1: float, lambda2: float) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"loss weights must be nonnegative, got {lambda1}, {lambda2}")
    return LossBreakdown(cls, sem, reg, cls + lambda1 * sem + lambda2 * reg)


def predict(features, refined, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Labels (argmax, lowest index on ties) and class probabilities per row."""
    logits = nk.cosine_sim(features, refined).value / tau
    probs = nk.row_softmax(logits).value
    return np.argmax(logits, axis=1), probs
