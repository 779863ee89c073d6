"""Query/gallery distances, CMC/mAP under the cross-camera protocol, re-ranking."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import Reader, write_atomic
from .tensor import ContractError

FEATURE_MAGIC = b"AGFT"
FEATURE_VERSION = 1


@dataclass
class RankingResult:
    dist: np.ndarray
    cmc: np.ndarray
    map: float
    valid_query_count: int
    dropped_query_count: int = 0

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self) -> dict[str, float]:
        return {"mAP": self.map, "R1": self.rank(1), "R5": self.rank(5), "R10": self.rank(10)}


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def pairwise_distance(q_feats, g_feats) -> np.ndarray:
    """Euclidean distance between L2-normalised rows, ``[Q, G]``."""
    q = np.asarray(q_feats, dtype=np.float64)
    g = np.asarray(g_feats, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature widths differ: {q.shape} vs {g.shape}")
    qn, gn = _normalize_rows(q), _normalize_rows(g)
    d2 = (qn * qn).sum(1)[:, None] + (gn * gn).sum(1)[None, :] - 2.0 * qn @ gn.T
    return np.sqrt(np.maximum(d2, 0.0))


def cmc_and_map(dist, q_pids, g_pids, q_camids, g_camids) -> RankingResult:
    """Rank-k accuracy and mAP.

    Gallery entries sharing both pid and camera with the query are ignored.
    Queries left without any true match are dropped and counted.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_camids, g_camids = np.asarray(q_camids), np.asarray(g_camids)
    Q, G = dist.shape
    order = np.argsort(dist, axis=1, kind="stable")
    cmc_sum = np.zeros(G)
    aps = []
    for i in range(Q):
        ranked = order[i]
        same_pid = g_pids[ranked] == q_pids[i]
        keep = ~(same_pid & (g_camids[ranked] == q_camids[i]))
        hits = same_pid[keep]
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        cmc_sum[first:] += 1.0
        cum = np.cumsum(hits)
        ranks = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(cum[hits] / ranks)))
    if not aps:
        raise ContractError("no query has a valid gallery match")
    n = len(aps)
    return RankingResult(dist, cmc_sum / n, float(np.mean(aps)), n, Q - n)


def query_gallery_split(pids, camids, per_id: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Pick up to ``per_id`` queries per identity from its first camera.

    Identities seen by a single camera contribute no query, so every query
    identity also appears in the gallery under another camera.
    """
    pids, camids = np.asarray(pids), np.asarray(camids)
    query = []
    for pid in dict.fromkeys(pids.tolist()):
        idx = np.flatnonzero(pids == pid)
        cams = camids[idx]
        if len(np.unique(cams)) < 2:
            continue
        query.extend(idx[cams == cams.min()][:per_id].tolist())
    q = np.array(sorted(query), dtype=np.int64)
    g = np.setdiff1d(np.arange(len(pids)), q)
    return q, g


# --------------------------------------------------------------------------
# k-reciprocal re-ranking
# --------------------------------------------------------------------------

def _k_reciprocal(rank: np.ndarray, i: int, k: int) -> np.ndarray:
    fwd = rank[i, :k + 1]
    back = rank[fwd, :k + 1]
    return fwd[np.any(back == i, axis=1)]


def k_reciprocal_rerank(q_feats, g_feats, k1: int = 20, k2: int = 6,
                        lambda_value: float = 0.3) -> np.ndarray:
    """k-reciprocal re-ranking over the joint query+gallery set.

    Neighbour search and encoding weights use squared distances scaled by
    each row's maximum. The output blends Jaccard distance with the plain
    query-gallery distance from :func:`pairwise_distance`, so
    ``lambda_value=1`` returns that matrix unchanged. ``k1`` is clamped to
    ``N - 1`` for small sets.
    """
    if not 0.0 <= lambda_value <= 1.0:
        raise ValueError(f"lambda_value must be in [0, 1], got {lambda_value}")
    if not (k2 >= 1 and k1 > k2):
        raise ValueError(f"need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    q = np.asarray(q_feats, dtype=np.float64)
    g = np.asarray(g_feats, dtype=np.float64)
    original = pairwise_distance(q, g)
    if lambda_value == 1.0:
        return original
    Q = q.shape[0]
    allf = np.concatenate([q, g], axis=0)
    N = allf.shape[0]
    k1 = min(k1, N - 1)
    k2 = min(k2, k1)
    d = pairwise_distance(allf, allf) ** 2
    d = d / np.maximum(d.max(axis=1, keepdims=True), 1e-12)
    rank = np.argsort(d, axis=1, kind="stable")
    half = int(np.around(k1 / 2.0))

    V = np.zeros((N, N))
    for i in range(N):
        base = _k_reciprocal(rank, i, k1)
        expanded = base
        for cand in base:
            cand_set = _k_reciprocal(rank, cand, half)
            if len(np.intersect1d(cand_set, base)) > 2.0 / 3.0 * len(cand_set):
                expanded = np.append(expanded, cand_set)
        expanded = np.unique(expanded)
        w = np.exp(-d[i, expanded])
        V[i, expanded] = w / w.sum()
    if k2 != 1:
        V = V[rank[:, :k2]].mean(axis=1)

    jaccard = np.empty((Q, N - Q))
    Vg = V[Q:]
    for i in range(Q):
        inter = np.minimum(V[i][None, :], Vg).sum(axis=1)
        jaccard[i] = 1.0 - inter / (2.0 - inter)
    return jaccard * (1.0 - lambda_value) + original * lambda_value


# --------------------------------------------------------------------------
# feature dumps and end-to-end evaluation
# --------------------------------------------------------------------------

def write_features(path, feats, pids, camids) -> None:
    feats = np.asarray(feats, dtype=np.float64)
    n, dim = feats.shape
    parts = [FEATURE_MAGIC, np.array([FEATURE_VERSION, n, dim], "<u4").tobytes()]
    for row, pid, cam in zip(feats, pids, camids):
        parts.append(row.astype("<f8").tobytes())
        parts.append(np.array([pid, cam], "<u4").tobytes())
    write_atomic(path, b"".join(parts))


def read_features(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rd = Reader(Path(path).read_bytes(), f"features {path}")
    rd.header(FEATURE_MAGIC, FEATURE_VERSION)
    n, dim = rd.unpack("2I")
    feats = np.empty((n, dim))
    pids = np.empty(n, dtype=np.int64)
    camids = np.empty(n, dtype=np.int64)
    for i in range(n):
        feats[i] = rd.array("f8", dim)
        pids[i], camids[i] = rd.unpack("2I")
    rd.finish()
    return feats, pids, camids


def evaluate(feats, pids, camids, rerank: bool = False, per_id: int = 2,
             k1: int = 20, k2: int = 6, lambda_value: float = 0.3) -> dict[str, float]:
    """Split into query/gallery, rank, and report mAP / Rank-k (with ``rr_`` keys when re-ranking)."""
    feats = np.asarray(feats, dtype=np.float64)
    pids, camids = np.asarray(pids), np.asarray(camids)
    qi, gi = query_gallery_split(pids, camids, per_id)
    args = (pids[qi], pids[gi], camids[qi], camids[gi])
    out = cmc_and_map(pairwise_distance(feats[qi], feats[gi]), *args).summary()
    if rerank:
        rr = k_reciprocal_rerank(feats[qi], feats[gi], k1, k2, lambda_value)
        out.update({f"rr_{k}": v for k, v in cmc_and_map(rr, *args).summary().items()})
    return out
