import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agreid.binio import FormatError
from agreid.retrieval import (cmc_and_map, evaluate, k_reciprocal_rerank, pairwise_distance,
                              read_features, write_features)
from agreid.tensor import ContractError

# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------


def ranking_oracle(dist, qp, gp, qc, gc):
    """Re-sort each row by (distance, gallery index), drop junk, recount."""
    G = len(gp)
    cmc = [0.0] * G
    aps = []
    for i in range(len(qp)):
        order = sorted(range(G), key=lambda j: (dist[i][j], j))
        rel = [gp[j] == qp[i] for j in order if not (gp[j] == qp[i] and gc[j] == qc[i])]
        if not any(rel):
            continue
        hits, precisions = 0, []
        for k, r in enumerate(rel, start=1):
            if r:
                hits += 1
                precisions.append(hits / k)
        aps.append(sum(precisions) / hits)
        first = rel.index(True)
        for k in range(first, G):
            cmc[k] += 1
    n = len(aps)
    return [c / n for c in cmc], sum(aps) / n, n


def _unit(rows):
    out = []
    for r in rows:
        n = max(math.sqrt(sum(v * v for v in r)), 1e-12)
        out.append([v / n for v in r])
    return out


def rerank_oracle(q, g, k1, k2, lam):
    """k-reciprocal re-ranking written with python sets, following the published recipe."""
    feats = _unit(q.tolist() + g.tolist())
    N, Q = len(feats), len(q)
    raw = [[math.sqrt(max(sum((a - b) ** 2 for a, b in zip(x, y)), 0.0)) for y in feats] for x in feats]
    sq = [[v * v for v in row] for row in raw]
    d = [[v / max(max(row), 1e-12) for v in row] for row in sq]
    ranked = [sorted(range(N), key=lambda j: (d[i][j], j)) for i in range(N)]
    k1 = min(k1, N - 1)
    k2 = min(k2, k1)

    def recip(i, k):
        return {j for j in ranked[i][:k + 1] if i in ranked[j][:k + 1]}

    enc = []
    for i in range(N):
        base = recip(i, k1)
        expanded = set(base)
        for c in base:
            cand = recip(c, int(np.around(k1 / 2)))
            if len(cand & base) > 2 / 3 * len(cand):
                expanded |= cand
        w = {j: math.exp(-d[i][j]) for j in expanded}
        s = sum(w.values())
        enc.append([w.get(j, 0.0) / s for j in range(N)])
    if k2 > 1:
        enc = [[sum(enc[n][j] for n in ranked[i][:k2]) / k2 for j in range(N)] for i in range(N)]
    out = []
    for i in range(Q):
        row = []
        for j in range(Q, N):
            inter = sum(min(a, b) for a, b in zip(enc[i], enc[j]))
            jac = 1 - inter / (2 - inter)
            row.append((1 - lam) * jac + lam * raw[i][j])
        out.append(row)
    return np.array(out)


# --------------------------------------------------------------------------
# distances
# --------------------------------------------------------------------------

def test_pairwise_distance_examples():
    x = np.array([[1.0, 2.0, 3.0]])
    assert pairwise_distance(x, x)[0, 0] == pytest.approx(0.0, abs=1e-7)
    assert pairwise_distance([[1.0, 0.0]], [[0.0, 1.0]])[0, 0] == pytest.approx(math.sqrt(2))
    with pytest.raises(ValueError):
        pairwise_distance(np.ones((2, 3)), np.ones((2, 4)))


@pytest.mark.parametrize("seed", range(20))
def test_pairwise_distance_matches_cosine_identity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(5, 6))
    cos = (a / np.linalg.norm(a, axis=1, keepdims=True)) @ (b / np.linalg.norm(b, axis=1, keepdims=True)).T
    np.testing.assert_allclose(pairwise_distance(a, b), np.sqrt(2 - 2 * cos), atol=1e-9)


# --------------------------------------------------------------------------
# CMC / mAP
# --------------------------------------------------------------------------

def test_ap_hand_example():
    dist = np.array([[0.1, 0.2, 0.3]])
    res = cmc_and_map(dist, [0], [0, 1, 0], [0], [1, 1, 1])
    assert res.map == pytest.approx(5 / 6)
    assert res.rank(1) == 1.0


def test_perfect_ranking():
    res = cmc_and_map(np.array([[0.0, 1.0], [1.0, 0.0]]), [0, 1], [0, 1], [0, 0], [1, 1])
    assert res.rank(1) == 1.0 and res.map == 1.0


def test_same_camera_matches_are_ignored_and_unmatched_queries_dropped():
    dist = np.array([[0.0, 0.5, 0.9], [0.0, 0.1, 0.2]])
    res = cmc_and_map(dist, [0, 7], [0, 1, 0], [0, 0], [0, 1, 1])
    assert res.valid_query_count == 1 and res.dropped_query_count == 1
    assert res.map == pytest.approx(0.5)
    with pytest.raises(ContractError):
        cmc_and_map(np.zeros((1, 2)), [0], [0, 1], [0], [0, 0])


@pytest.mark.parametrize("seed", range(200))
def test_cmc_and_map_match_oracle(seed):
    rng = np.random.default_rng(seed)
    Q, G = int(rng.integers(1, 6)), int(rng.integers(2, 15))
    n_ids = int(rng.integers(1, 5))
    qp, gp = rng.integers(0, n_ids, Q), rng.integers(0, n_ids, G)
    qc, gc = rng.integers(0, 2, Q), rng.integers(0, 2, G)
    gp[0], gc[0], qc[0] = qp[0], 1, 0  # at least one valid query
    dist = rng.random((Q, G))
    if seed % 4 == 0:
        dist = np.round(dist, 1)  # ties resolved by gallery index
    res = cmc_and_map(dist, qp, gp, qc, gc)
    cmc, mAP, n = ranking_oracle(dist.tolist(), qp.tolist(), gp.tolist(), qc.tolist(), gc.tolist())
    assert res.valid_query_count == n
    assert res.map == pytest.approx(mAP, abs=1e-9)
    np.testing.assert_allclose(res.cmc, cmc, atol=1e-9)
    assert np.all(np.diff(res.cmc) >= 0)
    assert res.cmc[-1] == 1.0
    assert np.all((res.cmc >= 0) & (res.cmc <= 1)) and 0 <= res.map <= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_invariant_under_gallery_permutation(seed):
    rng = np.random.default_rng(seed)
    Q, G = 3, 10
    qp, gp = np.array([0, 1, 2]), rng.integers(0, 3, G)
    gp[:3] = [0, 1, 2]
    qc, gc = np.zeros(Q, int), np.ones(G, int)
    dist = rng.random((Q, G))
    perm = rng.permutation(G)
    a = cmc_and_map(dist, qp, gp, qc, gc)
    b = cmc_and_map(dist[:, perm], qp, gp[perm], qc, gc[perm])
    assert a.map == pytest.approx(b.map, abs=1e-12)
    np.testing.assert_allclose(a.cmc, b.cmc)


# --------------------------------------------------------------------------
# re-ranking
# --------------------------------------------------------------------------

def test_rerank_lambda_one_is_identity():
    rng = np.random.default_rng(0)
    q, g = rng.normal(size=(4, 8)), rng.normal(size=(12, 8))
    assert np.array_equal(k_reciprocal_rerank(q, g, lambda_value=1.0), pairwise_distance(q, g))


def test_rerank_parameter_errors():
    q = np.ones((2, 3))
    for kw in ({"k1": 3, "k2": 3}, {"k1": 5, "k2": 0}, {"lambda_value": 1.5}, {"lambda_value": -0.1}):
        with pytest.raises(ValueError):
            k_reciprocal_rerank(q, q, **kw)


@pytest.mark.parametrize("seed", range(5))
def test_rerank_matches_set_oracle(seed):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(4, 6))
    lab_q, lab_g = rng.integers(0, 4, 5), rng.integers(0, 4, 20)
    q = centres[lab_q] + 0.4 * rng.normal(size=(5, 6))
    g = centres[lab_g] + 0.4 * rng.normal(size=(20, 6))
    for k1, k2, lam in ((20, 6, 0.3), (6, 3, 0.3), (4, 1, 0.0)):
        got = k_reciprocal_rerank(q, g, k1, k2, lam)
        np.testing.assert_allclose(got, rerank_oracle(q, g, k1, k2, lam), atol=1e-9)


def test_rerank_preserves_top1_on_separated_clusters():
    rng = np.random.default_rng(0)
    centres = np.eye(6)[:2] * 5
    q = centres[[0, 1]] + 0.1 * rng.normal(size=(2, 6))
    lab = np.repeat([0, 1], 8)
    g = centres[lab] + 0.1 * rng.normal(size=(16, 6))
    rr = k_reciprocal_rerank(q, g, k1=6, k2=3)
    np.testing.assert_array_equal(lab[rr.argmin(axis=1)], [0, 1])


def test_rerank_diagonal_is_row_minimum_for_identical_sets():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 5))
    rr = k_reciprocal_rerank(x, x, k1=6, k2=3)
    assert np.all(rr.argmin(axis=1) == np.arange(10))


# --------------------------------------------------------------------------
# feature files and evaluate
# --------------------------------------------------------------------------

def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    feats, pids, cams = rng.normal(size=(6, 4)), np.arange(6) % 3, np.arange(6) % 2
    path = tmp_path / "f.agft"
    write_features(path, feats, pids, cams)
    f2, p2, c2 = read_features(path)
    assert np.array_equal(f2, feats) and np.array_equal(p2, pids) and np.array_equal(c2, cams)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"AGXX" + raw[4:])
    with pytest.raises(FormatError):
        read_features(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_features(tmp_path / "short")


def test_evaluate_reports_rerank_keys():
    rng = np.random.default_rng(0)
    pids = np.repeat(np.arange(4), 6)
    cams = np.tile([0, 1], 12)
    feats = np.eye(8)[pids] + 0.2 * rng.normal(size=(24, 8))
    out = evaluate(feats, pids, cams, rerank=True)
    assert set(out) == {"mAP", "R1", "R5", "R10", "rr_mAP", "rr_R1", "rr_R5", "rr_R10"}
    assert out["R1"] == 1.0
