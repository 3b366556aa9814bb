"""Training losses: weighted cross-entropy, focal, ordinal ranking, and their combination.

Each loss returns a LossValue carrying the scalar and the exact analytic
gradient with respect to the score matrix it was given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_GRADES = 5

# Grade pairs (a, b) with |a - y| < |b - y|: the score of the grade closer to
# the truth must beat the farther one by the margin.
_ORDINAL_PAIRS = {
    y: [(a, b) for a in range(NUM_GRADES) for b in range(NUM_GRADES)
        if abs(a - y) < abs(b - y)]
    for y in range(NUM_GRADES)
}


@dataclass
class LossValue:
    value: float
    d_logits: np.ndarray


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def inverse_frequency_weights(labels):
    """Per-class weights proportional to 1/frequency, normalized to mean 1.

    Classes absent from `labels` get weight 0 (they can never be hit by a
    weighted loss over these labels anyway).
    """
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=NUM_GRADES).astype(np.float64)
    present = counts > 0
    if not present.any():
        raise ValueError("cannot derive class weights from an empty label set")
    w = np.zeros(NUM_GRADES)
    w[present] = 1.0 / counts[present]
    w /= w[present].mean()
    return w


def _check_batch(logits, targets):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2 or logits.shape[1] != NUM_GRADES:
        raise ValueError(f"expected an N x {NUM_GRADES} score matrix, got shape {logits.shape}")
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if targets.shape != (logits.shape[0],):
        raise ValueError(f"targets shape {targets.shape} does not match batch size {logits.shape[0]}")
    if targets.min() < 0 or targets.max() >= NUM_GRADES:
        raise ValueError(f"targets must be grades in 0..{NUM_GRADES - 1}")
    return logits, targets


def weighted_cross_entropy(logits, targets, weights=None):
    """Mean over the batch of w[y] * (-log softmax(logits)[y])."""
    logits, targets = _check_batch(logits, targets)
    n = logits.shape[0]
    w = np.ones(NUM_GRADES) if weights is None else np.asarray(weights, dtype=np.float64)
    p = softmax(logits)
    idx = np.arange(n)
    wy = w[targets]
    logp = np.log(np.maximum(p[idx, targets], np.finfo(np.float64).tiny))
    value = float((wy * -logp).mean())

    d = p * wy[:, None]
    d[idx, targets] -= wy
    return LossValue(value, d / n)


def focal_loss(logits, targets, gamma=2.0, weights=None):
    """Mean of w[y] * (1 - p_y)^gamma * (-log p_y) with p = softmax(logits)."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    logits, targets = _check_batch(logits, targets)
    n = logits.shape[0]
    w = np.ones(NUM_GRADES) if weights is None else np.asarray(weights, dtype=np.float64)
    p = softmax(logits)
    idx = np.arange(n)
    py = np.maximum(p[idx, targets], np.finfo(np.float64).tiny)
    wy = w[targets]
    one_minus = 1.0 - p[idx, targets]
    logp = np.log(py)
    value = float((wy * one_minus ** gamma * -logp).mean())

    # dL/dp_y, with the (1-p)^(gamma-1) * log p term forced to its 0 limit at p_y = 1
    if gamma == 0.0:
        dldp = -1.0 / py
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            term = gamma * one_minus ** (gamma - 1.0) * logp
        term = np.where(one_minus == 0.0, 0.0, term)
        dldp = term - one_minus ** gamma / py
    # chain through softmax: dp_y/dz_j = p_y (delta_yj - p_j)
    coef = wy * dldp * p[idx, targets]
    d = -coef[:, None] * p
    d[idx, targets] += coef
    return LossValue(value, d / n)


def ranking_loss(scores, targets, margin=0.05):
    """Pairwise hinge enforcing that scores decay with grade distance from the truth.

    For every pair (a, b) with |a-y| < |b-y| the hinge max(0, margin - (s_a - s_b))
    is accumulated, normalized by the sample's pair count and the batch size.
    """
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    scores, targets = _check_batch(scores, targets)
    n = scores.shape[0]
    d = np.zeros_like(scores)
    total = 0.0
    for i in range(n):
        pairs = _ORDINAL_PAIRS[int(targets[i])]
        scale = 1.0 / (len(pairs) * n)
        row = scores[i]
        for a, b in pairs:
            gap = margin - (row[a] - row[b])
            if gap > 0:
                total += gap * scale
                d[i, a] -= scale
                d[i, b] += scale
    return LossValue(total, d)


def combined_loss(logits, targets, alpha=0.7, weights=None, margin=0.05):
    """alpha * weighted cross-entropy + (1 - alpha) * ranking loss on the same scores."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    ce = weighted_cross_entropy(logits, targets, weights)
    if alpha == 1.0:
        return ce
    rank = ranking_loss(logits, targets, margin)
    if alpha == 0.0:
        return rank
    return LossValue(alpha * ce.value + (1.0 - alpha) * rank.value,
                     alpha * ce.d_logits + (1.0 - alpha) * rank.d_logits)
