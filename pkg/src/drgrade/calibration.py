"""Per-class decision thresholds calibrated on validation probabilities.

Calibration searches the finite candidate set {midpoints of consecutive
distinct scores} + {0, 1}, so the optimum is exact for the sample. Decisions
convert the 5-way problem into one-vs-rest exceedance tests, resolving
conflicts toward the highest severity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import argmax_highest_grade

NUM_GRADES = 5
OBJECTIVES = ("f1", "youden")


@dataclass
class ThresholdSet:
    tau: np.ndarray
    objective: str = "f1"
    calibrated_on: int = 0
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.tau.shape != (NUM_GRADES,):
            raise ValueError(f"need {NUM_GRADES} thresholds, got shape {self.tau.shape}")
        if np.any(self.tau < 0) or np.any(self.tau > 1):
            raise ValueError(f"thresholds must lie in [0, 1], got {self.tau}")

    def to_dict(self):
        return {"tau": [float(t) for t in self.tau], "objective": self.objective,
                "calibrated_on": self.calibrated_on, "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["tau"]), d["objective"], d["calibrated_on"],
                   list(d.get("flags", [])))


def write_thresholds(path, thresholds):
    Path(path).write_text(json.dumps(thresholds.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    return Path(path)


def read_thresholds(path):
    return ThresholdSet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _check_probs(probs, allow_unnormalized):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.shape[1] != NUM_GRADES:
        raise ValueError(f"need {NUM_GRADES} columns, got shape {probs.shape}")
    if not allow_unnormalized:
        sums = probs.sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > 1e-6)[0]
        if bad.size:
            raise ValueError(
                f"probability rows must sum to 1 within 1e-6; row {bad[0]} sums to {sums[bad[0]]}")
    return probs


def _objective_value(tp, fp, fn, tn, objective):
    if objective == "f1":
        denom = 2 * tp + fp + fn
        return 2.0 * tp / denom if denom > 0 else 0.0
    if objective == "youden":
        tpr = tp / (tp + fn) if tp + fn > 0 else 0.0
        fpr = fp / (fp + tn) if fp + tn > 0 else 0.0
        return tpr - fpr
    raise ValueError(f"unknown calibration objective {objective!r}; choose from {OBJECTIVES}")


def _best_threshold(scores, positive, objective):
    """Lowest threshold maximizing the one-vs-rest objective over the candidate set."""
    distinct = np.unique(scores)
    candidates = [0.0]
    candidates.extend(((distinct[:-1] + distinct[1:]) / 2.0).tolist())
    candidates.append(1.0)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    best_tau, best_val = None, -np.inf
    for tau in candidates:
        pred = scores >= tau
        tp = int(np.sum(pred & positive))
        fp = int(np.sum(pred & ~positive))
        fn = n_pos - tp
        tn = n_neg - fp
        val = _objective_value(tp, fp, fn, tn, objective)
        if val > best_val:
            best_val, best_tau = val, tau
    return float(np.clip(best_tau, 0.0, 1.0)), best_val


def calibrate_thresholds(val_probs, val_labels, objective="f1", allow_unnormalized=False):
    """Per-class optimal thresholds on validation scores.

    Classes absent from the labels keep the default 0.5 and are flagged.
    """
    probs = _check_probs(val_probs, allow_unnormalized)
    labels = np.asarray(val_labels)
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {probs.shape[0]} rows")
    if probs.shape[0] < 1:
        raise ValueError("need at least one validation sample")
    tau = np.full(NUM_GRADES, 0.5)
    flags = []
    for c in range(NUM_GRADES):
        positive = labels == c
        if not positive.any():
            flags.append(f"class {c} absent from validation set; threshold defaulted to 0.5")
            continue
        tau[c], _ = _best_threshold(probs[:, c], positive, objective)
    return ThresholdSet(tau, objective, int(probs.shape[0]), flags)


def decide(probs, thresholds, allow_unnormalized=False):
    """One-vs-rest decision: highest grade whose probability clears its threshold,
    falling back to (higher-grade-tie) argmax when none does."""
    row = _check_probs(probs, allow_unnormalized)[0]
    exceeds = np.where(row >= thresholds.tau)[0]
    if exceeds.size:
        return int(exceeds.max())
    return int(argmax_highest_grade(row))


def decide_batch(probs, thresholds, allow_unnormalized=False):
    probs = _check_probs(probs, allow_unnormalized)
    return np.array([decide(row, thresholds, allow_unnormalized=True) for row in probs], dtype=int)
