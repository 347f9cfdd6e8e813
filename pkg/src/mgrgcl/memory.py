"""Group memory: one unit-norm representative per pseudo-label group."""

from dataclasses import dataclass

import numpy as np

from .errors import BadIndex, EmptyGroup, LengthMismatch, NonPositiveTemperature, ValidationError
from .numerics import as_matrix, l2_normalize, l2_normalize_rows


@dataclass
class GroupMemory:
    entries: np.ndarray  # (N_c, d), rows unit-norm
    momentum: float = 0.2
    temperature: float = 0.2

    @property
    def num_groups(self):
        return self.entries.shape[0]


def _check_hyper(momentum, temperature):
    if not 0.0 <= momentum <= 1.0:
        raise ValidationError(f"memory.momentum must lie in [0, 1], got {momentum!r}")
    if not temperature > 0:
        raise NonPositiveTemperature(f"memory.temperature must be > 0, got {temperature!r}")


def init_memory(features, assignment, momentum=0.2, temperature=0.2):
    """Row k is the normalised mean of the features labelled k; noise is ignored."""
    _check_hyper(momentum, temperature)
    x = as_matrix(features)
    labels = np.asarray(assignment.labels)
    if len(labels) != x.shape[0]:
        raise LengthMismatch(f"{len(labels)} labels for {x.shape[0]} features")
    rows = []
    for k in range(assignment.num_groups):
        members = x[labels == k]
        if len(members) == 0:
            raise EmptyGroup(f"group {k} has no members")
        rows.append(l2_normalize(members.mean(axis=0)))
    return GroupMemory(np.array(rows).reshape(len(rows), x.shape[1]), momentum, temperature)


def update_memory(memory, queries, group_ids):
    """Momentum update of every group that appears in the batch.

    ``c_k <- normalize(m * c_k + (1 - m) * q_k)`` where ``q_k`` is the mean of
    the batch queries in group ``k``.  Updates in place and returns ``memory``.
    """
    q = as_matrix(queries)
    ids = np.asarray(group_ids, dtype=np.int64)
    if len(ids) != q.shape[0]:
        raise LengthMismatch(f"{len(ids)} group ids for {q.shape[0]} queries")
    if ids.size and (ids.min() < 0 or ids.max() >= memory.num_groups):
        raise BadIndex(f"group ids must lie in [0, {memory.num_groups})")
    m = memory.momentum
    if m == 1.0:
        return memory
    present = np.unique(ids)
    means = np.stack([q[ids == k].mean(axis=0) for k in present]) if present.size else q[:0]
    mixed = m * memory.entries[present] + (1.0 - m) * means
    memory.entries[present] = l2_normalize_rows(mixed)
    return memory
