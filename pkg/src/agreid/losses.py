"""Alignment, guidance and ReID losses, the noise mask and threshold selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .encoders import similarity_logits
from .tensor import ContractError, DimensionError, Tensor

OTSU_BINS = 256
GAMMA_DISABLED = -1.0
THRESHOLD_STRATEGIES = ("otsu", "p50", "p75", "p90", "disabled")


@dataclass(frozen=True)
class BatchLabels:
    identity_ids: np.ndarray
    camera_ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "identity_ids", np.asarray(self.identity_ids, dtype=np.int64))
        object.__setattr__(self, "camera_ids", np.asarray(self.camera_ids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.identity_ids)


def _ids(labels) -> np.ndarray:
    return labels.identity_ids if isinstance(labels, BatchLabels) else np.asarray(labels, dtype=np.int64)


# --------------------------------------------------------------------------
# stage 1
# --------------------------------------------------------------------------

def supcon_loss(logits: Tensor, labels, col_labels=None) -> Tensor:
    """Supervised contrastive loss with rows as anchors.

    Positives of anchor ``i`` are the columns sharing its identity. The
    denominator runs over every column, positives included.
    """
    rows = _ids(labels)
    cols = rows if col_labels is None else _ids(col_labels)
    if logits.shape != (len(rows), len(cols)):
        raise DimensionError(f"logits {logits.shape} do not match {len(rows)}x{len(cols)} labels")
    pos = (rows[:, None] == cols[None, :]).astype(np.float64)
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        raise ContractError(f"anchor {int(np.argmin(n_pos))} has no positive")
    log_prob = tc.log_softmax(logits, axis=1)
    per_anchor = tc.mul(tc.sum(tc.mul(log_prob, pos), axis=1), -1.0 / n_pos)
    return tc.mean(per_anchor)


def feature_alignment_loss(logits: Tensor, labels) -> Tensor:
    """Image-to-text plus text-to-image SupCon over a square logit matrix."""
    return tc.add(supcon_loss(logits, labels), supcon_loss(tc.transpose(logits), labels))


def attr_align_loss(A: Tensor, V: Tensor) -> Tensor:
    """``-(1/r) * sum_i sum_j cos(a_ij, v_ij)``; sums over the batch."""
    if A.shape != V.shape:
        raise DimensionError(f"attribute predictions {A.shape} vs pseudo-labels {V.shape}")
    r = A.shape[-2]
    return tc.scale(tc.sum(tc.cosine_similarity(A, V)), -1.0 / r)


def stage1_loss(l_feat, l_attr, lam: float = 1.0):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return l_feat + lam * l_attr


# --------------------------------------------------------------------------
# stage 2
# --------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    t = np.asarray(targets, dtype=np.int64)
    K = logits.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= K):
        raise IndexError(f"label outside 0..{K - 1}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(t)), t] = 1.0
    return tc.scale(tc.sum(tc.mul(tc.log_softmax(logits, axis=1), onehot)), -1.0 / len(t))


def ce_guidance_loss(image_feats: Tensor, text_feats: Tensor, labels, tau: float) -> Tensor:
    """Cross entropy of image-to-identity-text cosine logits.

    ``image_feats`` are already in the shared projected space; ``text_feats``
    hold one frozen row per identity.
    """
    return cross_entropy(similarity_logits(image_feats, text_feats, tau), _ids(labels))


def id_loss(class_logits: Tensor, labels, smoothing: float = 0.1) -> Tensor:
    """Cross entropy against a label-smoothed target.

    The true class gets ``1 - eps``, the others share ``eps`` evenly.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    t = _ids(labels)
    B, K = class_logits.shape
    if t.max() >= K or t.min() < 0:
        raise IndexError(f"label outside 0..{K - 1}")
    q = np.full((B, K), smoothing / (K - 1) if K > 1 else 0.0)
    q[np.arange(B), t] = 1.0 - smoothing
    return tc.scale(tc.sum(tc.mul(tc.log_softmax(class_logits, axis=1), q)), -1.0 / B)


def euclidean_distances(x: Tensor) -> Tensor:
    """All-pairs Euclidean distance of the rows of ``x``, clamped at 1e-12 before the root."""
    sq = tc.sum(tc.mul(x, x), axis=1)
    t = tc.add(tc.scale(tc.matmul(x, tc.transpose(x)), -2.0), sq)
    d2 = tc.add(tc.transpose(t), sq)
    return tc.sqrt(tc.clamp_min(d2, 1e-12))


def triplet_loss(feats: Tensor, labels, margin: float = 0.3, mining: str = "hard") -> Tensor:
    """Hinge ``max(d_p - d_n + margin, 0)`` averaged over anchors.

    ``mining="hard"`` takes each anchor's farthest positive and nearest
    negative; ``mining="all"`` averages over every valid triplet. Anchors
    without a positive or a negative are skipped.
    """
    ids = _ids(labels)
    B = len(ids)
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(B, dtype=bool)
    neg = ~same
    valid = pos.any(axis=1) & neg.any(axis=1)
    if not valid.any():
        raise ContractError("no anchor has both a positive and a negative")
    dist = euclidean_distances(feats)
    if mining == "hard":
        big = 1e9
        d_p = tc.amax(tc.add(dist, (pos - 1.0) * big), axis=1)
        d_n = tc.neg(tc.amax(tc.add(tc.neg(dist), (neg - 1.0) * big), axis=1))
        hinge = tc.relu(tc.add(tc.sub(d_p, d_n), margin))
        return tc.mean(tc.take_rows(hinge, np.flatnonzero(valid)))
    if mining == "all":
        a, p, n = np.nonzero(pos[:, :, None] & neg[:, None, :])
        flat = tc.reshape(dist, (B * B,))
        d_p = tc.take_rows(flat, a * B + p)
        d_n = tc.take_rows(flat, a * B + n)
        return tc.mean(tc.relu(tc.add(tc.sub(d_p, d_n), margin)))
    raise ValueError(f"unknown mining mode {mining!r}")


# --------------------------------------------------------------------------
# noise mask
# --------------------------------------------------------------------------

def _otsu_bin_index(values: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    width = (hi - lo) / bins
    return np.clip(np.floor((values - lo) / width), 0, bins - 1).astype(np.int64)


def otsu_threshold(values: Sequence[float], bins: int = OTSU_BINS,
                   lo: float = -1.0, hi: float = 1.0) -> float:
    """Histogram edge maximising the between-class variance.

    Candidates are the upper edges of bins ``0..bins-1``; class 0 holds the
    bins at or below the candidate. The variance comparison is carried out
    in exact integer arithmetic (bin index as the class value, which is an
    affine map of the bin centre and so has the same argmax). Ties go to the
    lowest edge; constant input therefore returns the first edge.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ContractError(f"otsu needs at least 2 values, got {v.size}")
    hist = np.bincount(_otsu_bin_index(v, bins, lo, hi), minlength=bins)
    n0s = np.cumsum(hist).tolist()
    s0s = np.cumsum(hist * np.arange(bins)).tolist()
    N, S = n0s[-1], s0s[-1]
    best_t, best_num, best_den = 0, 0, 1
    for t in range(bins):
        n0, s0 = n0s[t], s0s[t]
        n1, s1 = N - n0, S - s0
        if n0 == 0 or n1 == 0:
            continue
        num = (n0 * s1 - n1 * s0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return lo + (best_t + 1) * (hi - lo) / bins


def select_threshold(cosines, strategy: str = "otsu") -> float:
    strategy = strategy.lower()
    c = np.asarray(cosines, dtype=np.float64).reshape(-1)
    if strategy == "disabled":
        return GAMMA_DISABLED
    if strategy == "otsu":
        return otsu_threshold(c)
    if strategy in ("p50", "p75", "p90"):
        return float(np.percentile(c, float(strategy[1:])))
    raise ValueError(f"unknown threshold strategy {strategy!r}; choose from {THRESHOLD_STRATEGIES}")


def noise_mask(cosines, gamma: float) -> np.ndarray:
    """``D[i, j] = 1`` where ``cos > gamma``; ``gamma == -1`` keeps every pair."""
    c = np.asarray(cosines.data if isinstance(cosines, Tensor) else cosines, dtype=np.float64)
    if gamma == GAMMA_DISABLED:
        return np.ones_like(c)
    return (c > gamma).astype(np.float64)


def attribute_cosines(A: Tensor, V: Tensor) -> Tensor:
    if A.shape != V.shape:
        raise DimensionError(f"attribute predictions {A.shape} vs pseudo-labels {V.shape}")
    return tc.cosine_similarity(A, V)


def attr_guidance_loss(A: Tensor, V: Tensor, D) -> Tensor:
    """Masked attribute alignment: ``-(1/r) * sum D * cos``. ``D`` carries no gradient."""
    cos = attribute_cosines(A, V)
    D = np.asarray(D, dtype=np.float64)
    if D.shape != cos.shape:
        raise DimensionError(f"mask {D.shape} vs cosines {cos.shape}")
    r = A.shape[-2]
    return tc.scale(tc.sum(tc.mul(cos, D)), -1.0 / r)


def stage2_loss(l_id, l_tri, l_ce, l_attr, beta: float = 0.01):
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    return l_id + l_tri + l_ce + beta * l_attr
