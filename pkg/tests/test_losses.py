import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agreid import losses as L
from agreid import tensor as tc
from agreid.tensor import ContractError, DimensionError, Tensor

# --------------------------------------------------------------------------
# brute-force oracles: scalar loops over python floats, no shared helpers
# --------------------------------------------------------------------------


def supcon_oracle(logits, rows, cols):
    total = 0.0
    for i, yi in enumerate(rows):
        z = sum(math.exp(v) for v in logits[i])
        pos = [j for j, yj in enumerate(cols) if yj == yi]
        total += -sum(math.log(math.exp(logits[i][j]) / z) for j in pos) / len(pos)
    return total / len(rows)


def ce_guidance_oracle(img, txt, labels, tau):
    total = 0.0
    for i, y in enumerate(labels):
        norm_i = math.sqrt(sum(v * v for v in img[i]))
        scores = []
        for t in txt:
            norm_t = math.sqrt(sum(v * v for v in t))
            scores.append(sum(a * b for a, b in zip(img[i], t)) / (norm_i * norm_t) / tau)
        m = max(scores)
        lse = m + math.log(sum(math.exp(s - m) for s in scores))
        total += lse - scores[y]
    return total / len(labels)


def id_oracle(logits, labels, eps):
    K = len(logits[0])
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        for k, v in enumerate(row):
            q = 1 - eps if k == y else eps / (K - 1)
            total -= q * (v - lse)
    return total / len(labels)


def triplet_oracle(feats, labels, margin):
    n = len(labels)

    def dist(a, b):
        return math.sqrt(max(sum((x - y) ** 2 for x, y in zip(feats[a], feats[b])), 1e-12))

    terms = []
    for a in range(n):
        pos = [dist(a, p) for p in range(n) if p != a and labels[p] == labels[a]]
        neg = [dist(a, q) for q in range(n) if labels[q] != labels[a]]
        if pos and neg:
            terms.append(max(max(pos) - min(neg) + margin, 0.0))
    return sum(terms) / len(terms)


def otsu_oracle(values, bins=256, lo=-1.0, hi=1.0):
    """Exhaustive scan with the textbook weighted-mean form over bin centres."""
    w = (hi - lo) / bins
    hist = [0] * bins
    for v in values:
        hist[min(max(int(math.floor((v - lo) / w)), 0), bins - 1)] += 1
    from fractions import Fraction
    centres = [Fraction(2 * k + 1, 2) for k in range(bins)]  # affine in the real centres
    N = sum(hist)
    best, best_t = None, 0
    for t in range(bins):
        n0 = sum(hist[: t + 1])
        n1 = N - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = sum(h * c for h, c in zip(hist[: t + 1], centres)) / n0
        mu1 = sum(h * c for h, c in zip(hist[t + 1:], centres[t + 1:])) / n1
        var = Fraction(n0 * n1, N * N) * (mu0 - mu1) ** 2
        if best is None or var > best:
            best, best_t = var, t
    return lo + (best_t + 1) * w


def _random_labels(rng, B):
    ids = rng.integers(0, max(2, B // 2), size=B)
    ids[: 2] = ids[0]  # at least one repeated identity
    return ids


# --------------------------------------------------------------------------
# oracle agreement on 100 random batches
# --------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_supcon_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    B = int(rng.integers(2, 9))
    ids = _random_labels(rng, B)
    logits = rng.normal(scale=3, size=(B, B))
    got = L.supcon_loss(Tensor(logits), ids).item()
    assert got == pytest.approx(supcon_oracle(logits.tolist(), ids.tolist(), ids.tolist()), abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_ce_guidance_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    B, K, d = int(rng.integers(1, 9)), int(rng.integers(2, 7)), int(rng.integers(2, 6))
    img, txt = rng.normal(size=(B, d)), rng.normal(size=(K, d))
    labels = rng.integers(0, K, size=B)
    got = L.ce_guidance_loss(Tensor(img), Tensor(txt), labels, 0.07).item()
    assert got == pytest.approx(ce_guidance_oracle(img.tolist(), txt.tolist(), labels.tolist(), 0.07), abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_id_loss_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    B, K = int(rng.integers(1, 9)), int(rng.integers(2, 7))
    logits = rng.normal(scale=2, size=(B, K))
    labels = rng.integers(0, K, size=B)
    eps = float(rng.choice([0.0, 0.1, 0.3]))
    got = L.id_loss(Tensor(logits), labels, eps).item()
    assert got == pytest.approx(id_oracle(logits.tolist(), labels.tolist(), eps), abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_triplet_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    B = int(rng.integers(3, 10))
    ids = _random_labels(rng, B)
    ids[-1] = ids[0] + 1  # guarantees a negative
    feats = rng.normal(size=(B, 4))
    got = L.triplet_loss(Tensor(feats), ids, 0.3).item()
    assert got == pytest.approx(triplet_oracle(feats.tolist(), ids.tolist(), 0.3), abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_otsu_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    kind = seed % 3
    n = int(rng.integers(2, 60))
    if kind == 0:
        v = rng.uniform(-1, 1, n)
    elif kind == 1:
        v = np.concatenate([rng.normal(-0.4, 0.1, n), rng.normal(0.5, 0.15, n)]).clip(-1, 1)
    else:
        v = np.round(rng.uniform(-1, 1, n), 1)  # many ties
    assert L.otsu_threshold(v) == otsu_oracle(v.tolist())


# --------------------------------------------------------------------------
# hand examples
# --------------------------------------------------------------------------

def test_feature_alignment_two_identities():
    logits = Tensor(np.eye(2))
    per_dir = -math.log(math.e / (math.e + 1))
    assert L.supcon_loss(logits, [0, 1]).item() == pytest.approx(0.3133, abs=1e-4)
    assert L.feature_alignment_loss(logits, [0, 1]).item() == pytest.approx(2 * per_dir)
    assert 2 * per_dir == pytest.approx(0.6265, abs=1e-4)


def test_supcon_equal_logits_follows_formula():
    # Every anchor sums -log(1/4) over its 2 positives then divides by 2,
    # giving log 4 (the documented "log 2" drops the outer 1/|P| average).
    val = L.supcon_loss(Tensor(np.zeros((4, 4))), [0, 0, 1, 1]).item()
    assert val == pytest.approx(math.log(4))
    assert val == pytest.approx(supcon_oracle([[0.0] * 4] * 4, [0, 0, 1, 1], [0, 0, 1, 1]))


def test_supcon_rejects_anchor_without_positive():
    with pytest.raises(ContractError):
        L.supcon_loss(Tensor(np.zeros((2, 2))), [0, 1], col_labels=[0, 0])


def test_attr_align_examples():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(2, 3, 5))
    assert L.attr_align_loss(Tensor(V), Tensor(V)).item() == pytest.approx(-2.0)
    assert L.attr_align_loss(Tensor(-V), Tensor(V)).item() == pytest.approx(2.0)
    with pytest.raises(DimensionError):
        L.attr_align_loss(Tensor(V), Tensor(V[:, :2]))


def test_stage_combinations():
    assert L.stage1_loss(0.5, -2.0, 0.0) == 0.5
    assert L.stage1_loss(0.5, -2.0, 1.0) == pytest.approx(-1.5)
    assert L.stage1_loss(1.0, 1.0, 2.0) == pytest.approx(3.0)
    assert L.stage2_loss(1.0, 0.5, 0.7, -2.0, 0.01) == pytest.approx(2.18)
    assert L.stage2_loss(0, 0, 0, 0, 0.01) == 0
    assert L.stage2_loss(1.0, 0.5, 0.7, -2.0, 0.0) == pytest.approx(2.2)
    with pytest.raises(ValueError):
        L.stage1_loss(1, 1, -1)
    with pytest.raises(ValueError):
        L.stage2_loss(1, 1, 1, 1, -0.1)


def test_cross_entropy_examples():
    assert L.cross_entropy(Tensor([[2.0, 1.0, 0.0]]), [0]).item() == pytest.approx(0.4076, abs=1e-4)
    assert L.cross_entropy(Tensor(np.zeros((3, 5))), [0, 1, 4]).item() == pytest.approx(math.log(5))
    assert L.cross_entropy(Tensor([[500.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(IndexError):
        L.cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_ce_guidance_rejects_bad_tau():
    with pytest.raises(ValueError):
        L.ce_guidance_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2))), [0], 0.0)


def test_id_loss_examples():
    assert L.id_loss(Tensor([[500.0, 0.0, 0.0]]), [0], 0.0).item() == pytest.approx(0.0, abs=1e-12)
    assert L.id_loss(Tensor(np.zeros((2, 4))), [1, 3], 0.0).item() == pytest.approx(math.log(4))
    assert L.id_loss(Tensor([[0.0, 0.0]]), [1], 0.1).item() == pytest.approx(math.log(2))
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            L.id_loss(Tensor([[0.0, 0.0]]), [0], bad)
    with pytest.raises(IndexError):
        L.id_loss(Tensor([[0.0, 0.0]]), [2], 0.1)


def test_triplet_examples():
    # anchor 0 sits at the origin with its positive and negative on orthogonal axes
    feats = np.array([[0.0, 0.0], [0.2, 0.0], [0.0, 0.6]])
    assert L.triplet_loss(Tensor(feats), [0, 0, 1], 0.3).item() == pytest.approx(
        triplet_oracle(feats.tolist(), [0, 0, 1], 0.3))
    d = L.euclidean_distances(Tensor(feats)).data
    hinge0 = max(d[0, 1] - d[0, 2] + 0.3, 0.0)
    assert hinge0 == 0.0
    feats = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.4]])
    d = L.euclidean_distances(Tensor(feats)).data
    assert d[0, 1] - d[0, 2] + 0.3 == pytest.approx(0.4)
    same = np.ones((4, 3))
    assert L.triplet_loss(Tensor(same), [0, 0, 1, 1], 0.3).item() == pytest.approx(0.3, abs=1e-5)
    with pytest.raises(ContractError):
        L.triplet_loss(Tensor(np.ones((2, 3))), [0, 0])


def test_triplet_all_mining_averages_every_triplet():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(6, 3))
    ids = [0, 0, 1, 1, 2, 2]
    d = np.sqrt(((feats[:, None] - feats[None]) ** 2).sum(-1))
    terms = [max(d[a, p] - d[a, n] + 0.3, 0) for a in range(6) for p in range(6) for n in range(6)
             if a != p and ids[a] == ids[p] and ids[n] != ids[a]]
    assert L.triplet_loss(Tensor(feats), ids, 0.3, "all").item() == pytest.approx(np.mean(terms))


def test_otsu_examples():
    g = L.otsu_threshold([0.1, 0.15, 0.2, 0.8, 0.85, 0.9])
    assert 0.2 < g < 0.8
    assert L.otsu_threshold([0.3] * 10) == -1.0 + 2.0 / 256
    with pytest.raises(ContractError):
        L.otsu_threshold([0.5])


def test_select_threshold_strategies():
    c = np.linspace(-1, 1, 101)
    assert L.select_threshold(c, "disabled") == L.GAMMA_DISABLED
    assert L.select_threshold(c, "P50") == pytest.approx(0.0)
    assert L.select_threshold(c, "p75") == pytest.approx(0.5)
    assert L.select_threshold(c, "p90") == pytest.approx(0.8)
    assert L.select_threshold(c, "otsu") == L.otsu_threshold(c)
    with pytest.raises(ValueError):
        L.select_threshold(c, "p10")


def test_noise_mask_examples():
    assert L.noise_mask(np.array([[0.9]]), 0.5)[0, 0] == 1
    assert L.noise_mask(np.array([[0.5]]), 0.5)[0, 0] == 0
    np.testing.assert_array_equal(L.noise_mask(np.array([[-1.0, 0.2]]), -1), [[1, 1]])


def test_attr_guidance_examples():
    A = Tensor(np.array([[[1.0, 0.0], [1.0, 0.0]]]))
    V = Tensor(np.array([[[2.0, 0.0], [-3.0, 0.0]]]))
    assert L.attr_guidance_loss(A, V, [[1, 0]]).item() == pytest.approx(-0.5)
    assert L.attr_guidance_loss(A, V, [[0, 0]]).item() == 0.0
    with pytest.raises(DimensionError):
        L.attr_guidance_loss(A, V, [[1, 0, 1]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_disabled_mask_is_bit_equal_to_alignment_loss(seed):
    rng = np.random.default_rng(seed)
    A, V = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    cos = L.attribute_cosines(Tensor(A), Tensor(V))
    D = L.noise_mask(cos, L.select_threshold(cos.data, "disabled"))
    assert L.attr_guidance_loss(Tensor(A), Tensor(V), D).item() == L.attr_align_loss(Tensor(A), Tensor(V)).item()
    D = L.noise_mask(cos, float(cos.data.max()) + 1e-9)
    assert L.attr_guidance_loss(Tensor(A), Tensor(V), D).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_mask_carries_no_gradient(seed):
    rng = np.random.default_rng(seed)
    A = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    V = Tensor(rng.normal(size=(2, 3, 4)))
    D = (rng.random((2, 3)) > 0.5).astype(float)
    with tc.tape():
        tc.backward(L.attr_guidance_loss(A, V, D))
    # rows with D = 0 receive exactly zero gradient
    np.testing.assert_array_equal(A.grad[D == 0], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_supcon_nonnegative_and_label_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    B = 6
    ids = np.array([0, 0, 1, 1, 2, 2])
    logits = rng.normal(size=(B, B))
    base = L.supcon_loss(Tensor(logits), ids).item()
    assert base >= 0
    perm = rng.permutation(B)
    permuted = L.supcon_loss(Tensor(logits[perm][:, perm]), ids[perm]).item()
    assert permuted == pytest.approx(base, abs=1e-12)
