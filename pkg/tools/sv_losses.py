# =========================================
# file: tools/sv_losses.py
# =========================================
"""
Training objectives over embedding nodes.

Embeddings arrive speaker-major: rows of speaker 0, then speaker 1, ...
with group sizes given alongside. Log-probabilities are always taken as
log-sum-exp differences, never log of a stored probability.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np

from tools import sv_grad as G
from tools.sv_grad import Node, Operand


class Metric(str, Enum):
    SQUARED_EUCLIDEAN = "sqeuclidean"
    COSINE = "cosine"


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    metric: Metric = Metric.SQUARED_EUCLIDEAN
    normalize_embeddings: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        object.__setattr__(self, "metric", Metric(self.metric))


MetricLike = Union[Metric, str]


def distance(a: Operand, b: Operand, metric: MetricLike) -> Node:
    """Pairwise d(a_i, b_j), shape (len(a), len(b))."""
    if Metric(metric) is Metric.COSINE:
        return G.sub(1.0, G.cosine_similarity(a, b))
    return G.sq_euclidean(a, b)


def _sizes(sizes: Sequence[int], rows: int, what: str) -> np.ndarray:
    sizes = np.asarray(list(sizes), dtype=np.int64)
    if sizes.size == 0:
        raise ValueError(f"{what}: no speaker groups")
    if np.any(sizes < 1):
        raise ValueError(f"{what}: every speaker group must be nonempty, got sizes {sizes.tolist()}")
    if int(sizes.sum()) != rows:
        raise G.ShapeError(f"{what}: group sizes {sizes.tolist()} do not cover {rows} rows")
    return sizes


def _group_weights(sizes: np.ndarray) -> np.ndarray:
    """1 / (N * |group|) per row: mean over speakers of the mean within each."""
    return np.repeat(1.0 / (len(sizes) * sizes), sizes)


def normalize(embeddings: Operand) -> Node:
    return G.normalize_rows(embeddings)


# -------------------------
# Prototypical networks
# -------------------------
def prototypes(support: Operand, sizes: Sequence[int]) -> Node:
    """Per-speaker centroid of the support embeddings, (N, D)."""
    support = G.lift(support)
    sizes = _sizes(sizes, support.shape[0], "prototypes")
    avg = np.zeros((len(sizes), support.shape[0]))
    start = 0
    for n, k in enumerate(sizes):
        avg[n, start:start + k] = 1.0 / k
        start += k
    return G.matmul(avg, support)


def query_posterior(queries: Operand, centroids: Operand, metric: MetricLike = Metric.SQUARED_EUCLIDEAN) -> Node:
    """softmax over -d(q, c_n); one row per query, a plain vector for a single query."""
    queries = G.lift(queries)
    if queries.value.ndim == 1:
        probs = G.softmax(G.neg(distance(G.reshape(queries, (1, -1)), centroids, metric)))
        return G.reshape(probs, (-1,))
    return G.softmax(G.neg(distance(queries, centroids, metric)))


def pn_loss(
    support: Operand,
    support_sizes: Sequence[int],
    queries: Operand,
    query_sizes: Sequence[int],
    metric: MetricLike = Metric.SQUARED_EUCLIDEAN,
) -> Node:
    """Mean over speakers of the mean over their queries of -log p(correct speaker)."""
    support, queries = G.lift(support), G.lift(queries)
    if len(list(support_sizes)) < 2:
        raise ValueError(f"PN loss needs at least 2 speakers, got {len(list(support_sizes))}")
    s_sizes = _sizes(support_sizes, support.shape[0], "pn_loss support")
    q_sizes = _sizes(query_sizes, queries.shape[0], "pn_loss query")
    if len(s_sizes) != len(q_sizes):
        raise ValueError(f"pn_loss: {len(s_sizes)} support groups but {len(q_sizes)} query groups")

    logp = G.log_softmax(G.neg(distance(queries, prototypes(support, s_sizes), metric)))
    correct = G.pick(logp, np.repeat(np.arange(len(q_sizes)), q_sizes))
    return G.neg(G.sum_all(G.mul(correct, _group_weights(q_sizes))))


# -------------------------
# Global classification
# -------------------------
def ce_loss(logits: Operand, labels: Sequence[int]) -> Node:
    """Mean over samples of -log p(y | x) from classifier logits (B, N_total)."""
    logits = G.lift(logits)
    labels = np.asarray(list(labels), dtype=np.int64)
    n_total = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise G.ShapeError(f"ce_loss: {labels.shape[0]} labels for logits of shape {logits.shape}")
    bad = labels[(labels < 0) | (labels >= n_total)]
    if bad.size:
        raise ValueError(f"ce_loss: label {int(bad[0])} outside [0, {n_total})")
    return G.neg(G.mean_all(G.pick(G.log_softmax(logits), labels)))


# -------------------------
# Contrastive
# -------------------------
def contrastive_loss(
    originals: Operand,
    augmented: Operand,
    sizes: Sequence[int],
    metric: MetricLike = Metric.SQUARED_EUCLIDEAN,
) -> Node:
    """
    Each original z_i against every augmented embedding in the episode; its
    own augmented view is the positive, all others are negatives.
    """
    originals, augmented = G.lift(originals), G.lift(augmented)
    if originals.shape != augmented.shape:
        raise ValueError(
            f"contrastive_loss: originals {originals.shape} and augmented {augmented.shape} are not aligned"
        )
    sizes = _sizes(sizes, originals.shape[0], "contrastive_loss")
    logp = G.log_softmax(G.neg(distance(originals, augmented, metric)))
    positive = G.pick(logp, np.arange(originals.shape[0]))
    return G.neg(G.sum_all(G.mul(positive, _group_weights(sizes))))


# -------------------------
# Combinations
# -------------------------
def _check_lam(lam: float) -> float:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return float(lam)


def combined_cp(ce: Operand, pn: Operand, lam: float) -> Node:
    """L_CE + lambda * L_PN."""
    return G.add(ce, G.scale(pn, _check_lam(lam)))


def combined_cpc(ce: Operand, pn: Operand, contra: Operand, lam: float) -> Node:
    """L_CE + lambda * (L_PN + L_Contra)."""
    return G.add(ce, G.scale(G.add(pn, contra), _check_lam(lam)))
