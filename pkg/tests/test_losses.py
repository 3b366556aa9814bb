"""Loss values against closed forms and oracles, plus gradient checks."""

import numpy as np
import pytest

from drgrade import losses
from oracles import finite_difference, ranking_loss_bruteforce, rel_error

GRAD_TOL = 1e-4


def rand_batch(rng, n=8):
    logits = rng.standard_normal((n, 5))
    targets = rng.integers(0, 5, size=n)
    return logits, targets


# ---------------------------------------------------------------------------
# weighted cross-entropy
# ---------------------------------------------------------------------------

def test_wce_confident_correct_is_near_zero():
    logits = np.full((4, 5), -25.0)
    targets = np.array([0, 1, 2, 4])
    logits[np.arange(4), targets] = 25.0  # margin 50
    out = losses.weighted_cross_entropy(logits, targets)
    assert out.value < 1e-9


def test_wce_uniform_logits_is_log5():
    out = losses.weighted_cross_entropy(np.zeros((3, 5)), np.array([0, 2, 4]))
    assert abs(out.value - np.log(5)) < 1e-9


def test_wce_empty_batch_rejected():
    with pytest.raises(ValueError, match="empty"):
        losses.weighted_cross_entropy(np.zeros((0, 5)), np.zeros(0, dtype=int))


@pytest.mark.parametrize("seed", range(8))
def test_wce_gradient(seed):
    rng = np.random.default_rng(seed)
    logits, targets = rand_batch(rng)
    w = rng.uniform(0.2, 2.0, size=5)

    def loss():
        return losses.weighted_cross_entropy(logits, targets, w).value

    got = losses.weighted_cross_entropy(logits, targets, w).d_logits
    assert rel_error(got, finite_difference(loss, logits)) < GRAD_TOL


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------

def test_focal_gamma_zero_equals_wce():
    rng = np.random.default_rng(10)
    for _ in range(50):
        logits, targets = rand_batch(rng)
        w = rng.uniform(0.2, 2.0, size=5)
        f = losses.focal_loss(logits, targets, gamma=0.0, weights=w)
        c = losses.weighted_cross_entropy(logits, targets, w)
        assert abs(f.value - c.value) <= 1e-12
        assert np.abs(f.d_logits - c.d_logits).max() <= 1e-12


def test_focal_confident_correct_is_near_zero():
    logits = np.full((2, 5), -25.0)
    targets = np.array([1, 3])
    logits[np.arange(2), targets] = 25.0
    assert losses.focal_loss(logits, targets, gamma=2.0).value < 1e-9


def test_focal_uniform_closed_form():
    # uniform p = 0.2 everywhere: (1 - 0.2)^2 * ln 5
    out = losses.focal_loss(np.zeros((5, 5)), np.arange(5), gamma=2.0)
    assert abs(out.value - 0.64 * np.log(5)) < 1e-6


@pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0, 3.0])
def test_focal_gradient(gamma):
    rng = np.random.default_rng(int(gamma * 10))
    logits, targets = rand_batch(rng)
    w = rng.uniform(0.2, 2.0, size=5)

    def loss():
        return losses.focal_loss(logits, targets, gamma=gamma, weights=w).value

    got = losses.focal_loss(logits, targets, gamma=gamma, weights=w).d_logits
    assert rel_error(got, finite_difference(loss, logits)) < GRAD_TOL


# ---------------------------------------------------------------------------
# ranking loss
# ---------------------------------------------------------------------------

def test_ranking_unimodal_scores_zero_loss():
    scores = np.array([[0.0, 1.0, 2.0, 1.0, 0.0]])
    out = losses.ranking_loss(scores, np.array([2]), margin=0.5)
    assert out.value == 0.0
    assert np.all(out.d_logits == 0.0)


def test_ranking_worst_ordering_positive():
    scores = np.array([[0.0, 1.0, 2.0, 3.0, 4.0]])
    out = losses.ranking_loss(scores, np.array([0]), margin=0.0)
    assert out.value > 0.0


def test_ranking_matches_bruteforce_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        scores = rng.standard_normal((6, 5))
        targets = rng.integers(0, 5, size=6)
        got = losses.ranking_loss(scores, targets, margin=0.1).value
        want = ranking_loss_bruteforce(scores, targets, 0.1)
        assert abs(got - want) <= 1e-12


def test_ranking_constant_shift_invariance():
    rng = np.random.default_rng(12)
    scores = rng.standard_normal((4, 5))
    targets = rng.integers(0, 5, size=4)
    base = losses.ranking_loss(scores, targets, margin=0.2).value
    shifted = losses.ranking_loss(scores + rng.standard_normal((4, 1)), targets, margin=0.2).value
    assert abs(base - shifted) < 1e-12


@pytest.mark.parametrize("seed", range(8))
def test_ranking_gradient(seed):
    rng = np.random.default_rng(20 + seed)
    scores, targets = rand_batch(rng)

    def loss():
        return losses.ranking_loss(scores, targets, margin=0.1).value

    got = losses.ranking_loss(scores, targets, margin=0.1).d_logits
    assert rel_error(got, finite_difference(loss, scores)) < GRAD_TOL


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------

def test_combined_endpoints():
    rng = np.random.default_rng(13)
    logits, targets = rand_batch(rng)
    w = rng.uniform(0.2, 2.0, size=5)
    ce = losses.weighted_cross_entropy(logits, targets, w)
    rank = losses.ranking_loss(logits, targets, margin=0.05)
    at1 = losses.combined_loss(logits, targets, alpha=1.0, weights=w)
    at0 = losses.combined_loss(logits, targets, alpha=0.0, weights=w)
    assert at1.value == ce.value and np.array_equal(at1.d_logits, ce.d_logits)
    assert at0.value == rank.value and np.array_equal(at0.d_logits, rank.d_logits)


def test_combined_alpha_point_seven_is_component_sum():
    rng = np.random.default_rng(14)
    logits, targets = rand_batch(rng)
    w = rng.uniform(0.2, 2.0, size=5)
    ce = losses.weighted_cross_entropy(logits, targets, w)
    rank = losses.ranking_loss(logits, targets, margin=0.05)
    got = losses.combined_loss(logits, targets, alpha=0.7, weights=w, margin=0.05)
    assert abs(got.value - (0.7 * ce.value + 0.3 * rank.value)) <= 1e-12
    assert np.abs(got.d_logits - (0.7 * ce.d_logits + 0.3 * rank.d_logits)).max() <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_combined_gradient(seed):
    rng = np.random.default_rng(30 + seed)
    logits, targets = rand_batch(rng)

    def loss():
        return losses.combined_loss(logits, targets, alpha=0.7, margin=0.1).value

    got = losses.combined_loss(logits, targets, alpha=0.7, margin=0.1).d_logits
    assert rel_error(got, finite_difference(loss, logits)) < GRAD_TOL


# ---------------------------------------------------------------------------
# shared properties
# ---------------------------------------------------------------------------

def test_losses_nonnegative_and_finite():
    rng = np.random.default_rng(15)
    for _ in range(100):
        logits, targets = rand_batch(rng, n=int(rng.integers(1, 12)))
        logits *= rng.uniform(0.1, 20.0)
        for fn in (lambda: losses.weighted_cross_entropy(logits, targets),
                   lambda: losses.focal_loss(logits, targets, gamma=2.0),
                   lambda: losses.ranking_loss(logits, targets, margin=0.05),
                   lambda: losses.combined_loss(logits, targets, alpha=0.7)):
            out = fn()
            assert out.value >= 0.0 and np.isfinite(out.value)
            assert np.isfinite(out.d_logits).all()


def test_inverse_frequency_weights_mean_one():
    labels = np.array([0] * 10 + [1] * 5 + [2] * 2 + [3] * 2 + [4] * 1)
    w = losses.inverse_frequency_weights(labels)
    assert abs(w.mean() - 1.0) < 1e-12
    assert w[4] > w[0]
    # absent class gets zero weight, mean taken over present ones
    w2 = losses.inverse_frequency_weights(np.array([0, 0, 1]))
    assert w2[2] == w2[3] == w2[4] == 0.0
    assert abs(w2[:2].mean() - 1.0) < 1e-12
