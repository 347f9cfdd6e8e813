"""CMC and mAP under the camera-aware re-identification protocol."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, NoValidQueries
from .numerics import as_matrix, distance_matrix


@dataclass(frozen=True)
class EvalProtocol:
    exclude_same_camera_same_id: bool = True
    ranks: tuple = (1, 5, 10)
    metric: str = "cosine_distance"

    def validate(self):
        ranks = list(self.ranks)
        if not ranks or any(r < 1 for r in ranks) or any(b <= a for a, b in zip(ranks, ranks[1:])):
            raise InvalidConfig("eval.ranks", "must be positive and strictly ascending")
        if self.metric not in ("euclidean", "cosine_distance"):
            raise InvalidConfig("eval.metric", "must be 'euclidean' or 'cosine_distance'")


@dataclass
class RankingResult:
    mAP: float
    cmc: dict
    num_valid_queries: int

    def to_json(self):
        return {
            "mAP": self.mAP,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "num_valid_queries": self.num_valid_queries,
        }


def evaluate_retrieval(query_feats, query_ids, query_cams, gallery_feats, gallery_ids, gallery_cams,
                       protocol=EvalProtocol()):
    """Rank the gallery for every query and score it.

    Ties in distance keep gallery order.  Queries without a single valid
    match after exclusion are skipped.
    """
    protocol.validate()
    qf, gf = as_matrix(query_feats), as_matrix(gallery_feats)
    q_ids, q_cams = np.asarray(query_ids), np.asarray(query_cams)
    g_ids, g_cams = np.asarray(gallery_ids), np.asarray(gallery_cams)
    if qf.shape[1] != gf.shape[1]:
        raise DimensionMismatch(f"feature dims differ: {qf.shape[1]} vs {gf.shape[1]}")
    if not (len(q_ids) == len(q_cams) == qf.shape[0]) or not (len(g_ids) == len(g_cams) == gf.shape[0]):
        raise DimensionMismatch("ids/cams must align with feature rows")

    dist = distance_matrix(qf, gf, protocol.metric)
    order = np.argsort(dist, axis=1, kind="stable")
    hits_at = np.zeros(len(protocol.ranks))
    ap_sum, valid = 0.0, 0
    for i in range(qf.shape[0]):
        idx = order[i]
        if protocol.exclude_same_camera_same_id:
            idx = idx[~((g_ids[idx] == q_ids[i]) & (g_cams[idx] == q_cams[i]))]
        matches = g_ids[idx] == q_ids[i]
        if not matches.any():
            continue
        valid += 1
        hit_ranks = np.flatnonzero(matches) + 1
        precisions = np.arange(1, len(hit_ranks) + 1) / hit_ranks
        ap_sum += precisions.mean()
        first = hit_ranks[0]
        hits_at += np.array([first <= r for r in protocol.ranks], dtype=float)
    if valid == 0:
        raise NoValidQueries("no query has a valid match in the gallery")
    cmc = {r: float(h / valid) for r, h in zip(protocol.ranks, hits_at)}
    return RankingResult(float(ap_sum / valid), cmc, valid)


def split_query_gallery(identities, cameras):
    """First sample of every (identity, camera) pair is a query; the rest is gallery."""
    seen = set()
    query, gallery = [], []
    for i, key in enumerate(zip(np.asarray(identities).tolist(), np.asarray(cameras).tolist())):
        if key in seen:
            gallery.append(i)
        else:
            seen.add(key)
            query.append(i)
    return np.array(query, dtype=np.int64), np.array(gallery, dtype=np.int64)
