"""DBSCAN and pseudo-label assignment for the unlabelled target domain."""

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyInput, InvalidConfig, LengthMismatch
from .numerics import as_matrix, distance_matrix

NOISE = -1


@dataclass(frozen=True)
class ClusteringConfig:
    eps: float = 0.27
    min_pts: int = 4
    metric: str = "cosine_distance"

    def validate(self):
        if not (np.isfinite(self.eps) and self.eps > 0):
            raise InvalidConfig("clustering.eps", "must be finite and > 0")
        if self.min_pts < 1:
            raise InvalidConfig("clustering.min_pts", "must be >= 1")
        if self.metric not in ("euclidean", "cosine_distance"):
            raise InvalidConfig("clustering.metric", "must be 'euclidean' or 'cosine_distance'")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    num_groups: int

    @property
    def noise(self):
        return int(np.sum(self.labels == NOISE))

    def group_sizes(self):
        return np.bincount(self.labels[self.labels >= 0], minlength=self.num_groups).tolist()


def canonical_labels(labels):
    """Renumber non-noise ids to 0..N-1 in order of first appearance."""
    labels = np.asarray(labels)
    mapping = {}
    out = np.full(len(labels), NOISE, dtype=np.int64)
    for i, lab in enumerate(labels.tolist()):
        if lab == NOISE:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out, len(mapping)


def dbscan(features, cfg=ClusteringConfig()):
    """Exact DBSCAN over the rows of ``features``.

    ``min_pts`` counts the point itself and the ``eps`` ball is closed.  Seeds
    are tried in ascending index order and each cluster is expanded breadth
    first, neighbours in ascending index order, so a border point joins the
    first cluster that reaches it.
    """
    cfg.validate()
    x = as_matrix(features)
    n = x.shape[0]
    if n == 0:
        raise EmptyInput("dbscan needs at least one sample")
    neighbours = distance_matrix(x, x, cfg.metric) <= cfg.eps
    core = neighbours.sum(axis=1) >= cfg.min_pts
    labels = np.full(n, NOISE, dtype=np.int64)
    cid = 0
    for seed in range(n):
        if labels[seed] != NOISE or not core[seed]:
            continue
        labels[seed] = cid
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for q in np.flatnonzero(neighbours[p]):
                if labels[q] == NOISE:
                    labels[q] = cid
                    if core[q]:
                        queue.append(q)
        cid += 1
    labels, num = canonical_labels(labels)
    return ClusterAssignment(labels, num)


@dataclass
class PseudoLabeledDataset:
    records: list
    indices: np.ndarray  # positions of the surviving records in the source manifest
    labels: np.ndarray
    num_groups: int
    round: int = 0

    def __len__(self):
        return len(self.records)


def assign_pseudo_labels(manifest, assignment, round_index=0):
    """Drop noise samples and relabel the rest with their group id."""
    if len(assignment.labels) != manifest.num_samples:
        raise LengthMismatch(
            f"assignment has {len(assignment.labels)} labels for {manifest.num_samples} samples"
        )
    keep = np.flatnonzero(assignment.labels != NOISE)
    labels = assignment.labels[keep]
    records = [replace(manifest.records[i], identity=int(l)) for i, l in zip(keep, labels)]
    return PseudoLabeledDataset(records, keep, labels, assignment.num_groups, round_index)


def cluster_report(assignment):
    return {
        "num_groups": int(assignment.num_groups),
        "noise": assignment.noise,
        "group_sizes": [int(s) for s in assignment.group_sizes()],
    }
