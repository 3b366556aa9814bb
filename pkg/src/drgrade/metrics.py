"""Evaluation suite: confusion matrix, P/R/F1, one-vs-rest AUROC, ROC curves,
error-margin distribution, and structured report emission."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

NUM_GRADES = 5


def confusion(preds, labels):
    """5x5 count matrix, rows = true grade, cols = predicted grade."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise ValueError("need at least one sample")
    cm = np.zeros((NUM_GRADES, NUM_GRADES), dtype=int)
    np.add.at(cm, (labels, preds), 1)
    return cm


def prf_and_accuracy(cm):
    """Per-class precision/recall/F1, accuracy and unweighted macro averages.

    Zero-denominator precision or recall is reported as 0 and flagged.
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    flags = []
    precision = np.zeros(NUM_GRADES)
    recall = np.zeros(NUM_GRADES)
    for c in range(NUM_GRADES):
        if tp[c] + fp[c] > 0:
            precision[c] = tp[c] / (tp[c] + fp[c])
        else:
            flags.append(f"class {c}: no predictions, precision reported as 0")
        if tp[c] + fn[c] > 0:
            recall[c] = tp[c] / (tp[c] + fn[c])
        else:
            flags.append(f"class {c}: no true samples, recall reported as 0")
    f1 = np.zeros(NUM_GRADES)
    nz = precision + recall > 0
    f1[nz] = 2 * precision[nz] * recall[nz] / (precision[nz] + recall[nz])
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": float(tp.sum() / total),
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "flags": flags,
    }


def _binary_roc_counts(scores, positive):
    """Cumulative (FP, TP) after each distinct-score group, scores descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order]
    boundaries = np.where(np.diff(s) != 0)[0]
    group_ends = np.append(boundaries, s.size - 1)
    tps = np.cumsum(pos)[group_ends]
    fps = np.cumsum(~pos)[group_ends]
    return np.concatenate(([0], fps)), np.concatenate(([0], tps))


def binary_auroc(scores, positive):
    """AUROC by trapezoidal integration over tie groups; ties contribute 1/2
    (the rank / Mann-Whitney convention)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined without both a positive and a negative sample")
    fps, tps = _binary_roc_counts(scores, positive)
    # twice the area in count units, summed exactly in integers
    area2 = int(np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1])))
    return area2 / (2.0 * n_pos * n_neg)


def roc_points(scores, positive):
    """Monotone ROC staircase from (0,0) to (1,1); trapezoid area equals binary_auroc."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC undefined without both a positive and a negative sample")
    fps, tps = _binary_roc_counts(scores, positive)
    return [(float(f) / n_neg, float(t) / n_pos) for f, t in zip(fps, tps)]


def auroc_ovr(scores, labels):
    """One-vs-rest AUROC per class plus macro mean and micro aggregation.

    A class without both positives and negatives gets auroc None and a flag.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.ndim != 2 or scores.shape[1] != NUM_GRADES:
        raise ValueError(f"need an N x {NUM_GRADES} score matrix, got shape {scores.shape}")
    if scores.shape[0] != labels.shape[0]:
        raise ValueError("scores and labels lengths differ")
    per_class = []
    flags = []
    for c in range(NUM_GRADES):
        positive = labels == c
        if positive.all() or not positive.any():
            per_class.append(None)
            flags.append(f"class {c}: AUROC undefined (needs a positive and a negative)")
        else:
            per_class.append(binary_auroc(scores[:, c], positive))
    defined = [a for a in per_class if a is not None]
    mean_auroc = float(np.mean(defined)) if defined else None
    onehot = (labels[:, None] == np.arange(NUM_GRADES)[None, :])
    micro = binary_auroc(scores.reshape(-1), onehot.reshape(-1))
    return per_class, mean_auroc, micro, flags


def error_margin(preds, labels):
    """Fractions of predictions exactly right, off by one grade, off by two or more."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("predictions and labels must be equal-length and nonempty")
    diff = np.abs(preds - labels)
    n = preds.size
    return (float(np.sum(diff == 0) / n),
            float(np.sum(diff == 1) / n),
            float(np.sum(diff >= 2) / n))


def build_report(probs, preds, labels):
    """Assemble the full evaluation report from probabilities and decisions."""
    cm = confusion(preds, labels)
    prf = prf_and_accuracy(cm)
    per_class_auroc, mean_auroc, micro_auroc, auroc_flags = auroc_ovr(probs, labels)
    exact, off1, off2 = error_margin(preds, labels)
    return {
        "confusion": cm.tolist(),
        "per_class": {
            "precision": [float(v) for v in prf["precision"]],
            "recall": [float(v) for v in prf["recall"]],
            "f1": [float(v) for v in prf["f1"]],
            "auroc": [None if a is None else float(a) for a in per_class_auroc],
        },
        "accuracy": prf["accuracy"],
        "macro_precision": prf["macro_precision"],
        "macro_recall": prf["macro_recall"],
        "macro_f1": prf["macro_f1"],
        "mean_auroc": mean_auroc,
        "micro_auroc": micro_auroc,
        "error_margin": {"exact": exact, "off_by_one": off1, "off_by_two_plus": off2},
        "n_samples": int(len(np.asarray(labels))),
        "flags": prf["flags"] + auroc_flags,
    }


def write_report(path, report):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Path(path)


def write_confusion_csv(path, cm):
    cm = np.asarray(cm)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true\\pred"] + [f"pred{c}" for c in range(NUM_GRADES)])
        for t in range(NUM_GRADES):
            writer.writerow([f"true{t}"] + [int(v) for v in cm[t]])
    return Path(path)


def read_confusion_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=int)


def write_roc_csv(path, probs, labels):
    """Per-class ROC staircase points as (class, fpr, tpr) rows."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "fpr", "tpr"])
        for c in range(NUM_GRADES):
            positive = labels == c
            if positive.all() or not positive.any():
                continue
            for fpr, tpr in roc_points(probs[:, c], positive):
                writer.writerow([c, repr(fpr), repr(tpr)])
    return Path(path)


def read_roc_csv(path):
    curves = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            curves.setdefault(int(row["class"]), []).append(
                (float(row["fpr"]), float(row["tpr"])))
    return curves
