"""Losses with analytic gradients: batch-hard triplet, identity
cross-entropy, their supervised sum, and the group contrastive loss."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadIndex, DegenerateBatch, LabelOutOfRange, NonPositiveTemperature
from .numerics import as_matrix, as_vector, log_softmax, pairwise_distances, softmax


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.5


def _composition(labels):
    uniq, counts = np.unique(labels, return_counts=True)
    return ", ".join(f"{u}x{c}" for u, c in zip(uniq.tolist(), counts.tolist()))


def hardest_pairs(dist, labels):
    """Index of the hardest positive and hardest negative for every anchor.

    The anchor itself is not a positive.  Ties resolve to the lowest index.
    """
    labels = np.asarray(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    lacking = ~pos_mask.any(axis=1) | ~neg_mask.any(axis=1)
    if lacking.any():
        raise DegenerateBatch(
            f"anchor {int(np.flatnonzero(lacking)[0])} has no positive or no negative; "
            f"batch composition (label x count): {_composition(labels)}"
        )
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    return pos, neg


def batch_hard_triplet(features, labels, cfg=TripletConfig()):
    """Mean over anchors of ``max(0, margin + d(a, p*) - d(a, n*))``.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``features``.  Where a
    mined distance is exactly zero its (undefined) direction contributes zero.
    """
    x = as_matrix(features)
    labels = np.asarray(labels)
    n = x.shape[0]
    dist = pairwise_distances(x, x)
    pos, neg = hardest_pairs(dist, labels)
    rows = np.arange(n)
    d_ap = dist[rows, pos]
    d_an = dist[rows, neg]
    terms = cfg.margin + d_ap - d_an
    active = terms > 0
    # correctly rounded sum: independent of batch order
    loss = math.fsum(np.where(active, terms, 0.0).tolist()) / n

    grad = np.zeros_like(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        u_ap = np.where((d_ap > 0)[:, None], (x - x[pos]) / d_ap[:, None], 0.0)
        u_an = np.where((d_an > 0)[:, None], (x - x[neg]) / d_an[:, None], 0.0)
    w = active[:, None] / n
    u_ap, u_an = u_ap * w, u_an * w
    grad += u_ap - u_an
    np.add.at(grad, pos, -u_ap)
    np.add.at(grad, neg, u_an)
    return loss, grad


def identity_cross_entropy(logits, labels):
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise LabelOutOfRange(f"expected {n} labels, got {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    rows = np.arange(n)
    loss = float(-np.sum(log_softmax(logits)[rows, labels]) / n)
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


@dataclass
class SupervisedLoss:
    total: float
    triplet: float
    identity: float
    grad_globals: list
    grad_logits: list


def supervised_loss(desc, labels, cfg=TripletConfig()):
    """Triplet averaged over the three global features plus identity loss
    averaged over the part heads.  ``desc`` is a ``BatchDescriptors``."""
    labels = np.asarray(labels)
    n_g = len(desc.globals)
    trip, grad_globals = 0.0, []
    for g in desc.globals:
        val, grad = batch_hard_triplet(g, labels, cfg)
        trip += val / n_g
        grad_globals.append(grad / n_g)
    ident, grad_logits = 0.0, []
    n_heads = len(desc.logits)
    for lg in desc.logits:
        val, grad = identity_cross_entropy(lg, labels)
        ident += val / n_heads
        grad_logits.append(grad / n_heads)
    return SupervisedLoss(trip + ident, trip, ident, grad_globals, grad_logits)


def _check_temperature(tau):
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau!r}")


def group_contrastive(query, memory, positive_index):
    """``-log softmax((query . c_i) / tau)[positive_index]`` over all entries.

    Returns ``(loss, grad)`` where ``grad`` is with respect to ``query``.
    """
    q = as_vector(query)
    entries = np.asarray(memory.entries, dtype=np.float64)
    tau = memory.temperature
    _check_temperature(tau)
    k = int(positive_index)
    if not 0 <= k < entries.shape[0]:
        raise BadIndex(f"positive index {k} outside [0, {entries.shape[0]})")
    logits = entries @ q / tau
    loss = float(-log_softmax(logits)[k])
    p = softmax(logits)
    p[k] -= 1.0
    return loss, (p @ entries) / tau


def group_contrastive_batch(queries, memory, positive_indices):
    """Mean of :func:`group_contrastive` over a batch of queries."""
    q = as_matrix(queries)
    entries = np.asarray(memory.entries, dtype=np.float64)
    tau = memory.temperature
    _check_temperature(tau)
    ks = np.asarray(positive_indices, dtype=np.int64)
    if ks.size and (ks.min() < 0 or ks.max() >= entries.shape[0]):
        raise BadIndex(f"positive indices must lie in [0, {entries.shape[0]})")
    n = q.shape[0]
    rows = np.arange(n)
    logits = q @ entries.T / tau
    loss = float(-np.sum(log_softmax(logits)[rows, ks]) / n)
    p = softmax(logits)
    p[rows, ks] -= 1.0
    return loss, (p @ entries) / (tau * n)
