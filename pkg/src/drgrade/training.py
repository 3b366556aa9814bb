"""Deterministic training for the two trainable heads: AdamW, early stopping,
per-epoch history, and prediction with optional threshold decisions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container as ct
from . import losses, models
from .calibration import decide_batch
from .errors import GradingError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 2e-4
    weight_decay: float = 1e-3
    epochs: int = 20
    early_stop_patience: int = 7
    temperature: float = 0.2
    alpha: float = 0.7
    gamma: float = 2.0
    margin: float = 0.05
    seed: int = 0
    monitored_metric: str = "val_loss"   # or "val_accuracy"
    fcn_loss: str = "focal"              # or "focal_plus_ce"
    precision: str = "single"            # "double" for gradient-check builds

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.early_stop_patience < 1 or self.early_stop_patience > self.epochs:
            raise ValueError(f"patience must lie in 1..epochs, got {self.early_stop_patience}")
        if self.monitored_metric not in ("val_loss", "val_accuracy"):
            raise ValueError(f"unknown monitored metric {self.monitored_metric!r}")
        if self.fcn_loss not in ("focal", "focal_plus_ce"):
            raise ValueError(f"unknown fcn loss mode {self.fcn_loss!r}")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be single or double, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params, grads, state, lr, weight_decay=0.0,
               beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One decoupled-weight-decay Adam update, in place on the parameter arrays."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"{name!r} shape {p.shape}")
        g = np.asarray(g, dtype=p.dtype)
        if weight_decay:
            p -= lr * weight_decay * p  # decay applied to the parameter, not the gradient
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Stop after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience, mode):
        assert mode in ("min", "max")
        self.patience = patience
        self.mode = mode
        self.best = None
        self.best_epoch = None
        self.stale = 0

    def update(self, epoch, value):
        """Record an epoch's metric; returns True when it improved on the best."""
        improved = (self.best is None
                    or (self.mode == "min" and value < self.best)
                    or (self.mode == "max" and value > self.best))
        if improved:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return improved

    @property
    def should_stop(self):
        return self.stale >= self.patience


# ---------------------------------------------------------------------------
# Training data and history
# ---------------------------------------------------------------------------

@dataclass
class TrainData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    class_weights: np.ndarray = None


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    head: str
    model: object            # FcnHeadParams or PromptBank
    history: list
    best_epoch: int
    stopped_early: bool


HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def write_history(path, history):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row.epoch, repr(float(row.train_loss)), repr(float(row.train_acc)),
                             repr(float(row.val_loss)), repr(float(row.val_acc))])
    return Path(path)


def read_history(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(EpochStats(int(row["epoch"]), float(row["train_loss"]),
                                  float(row["train_acc"]), float(row["val_loss"]),
                                  float(row["val_acc"])))
    return out


# ---------------------------------------------------------------------------
# Head-specific steps
# ---------------------------------------------------------------------------

def _ranking_loss_and_grad(bank, embs, targets, weights, config):
    logits, ctx = models.ranking_head_forward(embs, bank)
    ce = losses.weighted_cross_entropy(logits, targets, weights)
    # the ordinal margin is specified in similarity units, so the hinge runs on
    # the raw similarities rather than the temperature-scaled logits
    sims = logits * bank.temperature
    rank = losses.ranking_loss(sims, targets, config.margin)
    value = config.alpha * ce.value + (1.0 - config.alpha) * rank.value
    d_logits = (config.alpha * ce.d_logits
                + (1.0 - config.alpha) * rank.d_logits * bank.temperature)
    return value, logits, ctx, d_logits


def _fcn_loss(logits, targets, weights, config):
    focal = losses.focal_loss(logits, targets, gamma=config.gamma, weights=weights)
    if config.fcn_loss == "focal":
        return focal.value, focal.d_logits
    ce = losses.weighted_cross_entropy(logits, targets, weights)
    return focal.value + ce.value, focal.d_logits + ce.d_logits


def _accuracy(logits, targets):
    preds = models.argmax_highest_grade(logits)
    return float(np.mean(preds == targets))


def _evaluate_ranking(bank, embs, targets, weights, config):
    value, logits, _, _ = _ranking_loss_and_grad(bank, embs, targets, weights, config)
    return value, _accuracy(logits, targets)


def _evaluate_fcn(params, x, targets, weights, config):
    logits, _ = models.fcn_head_forward(x, params, training=False)
    value, _ = _fcn_loss(logits, targets, weights, config)
    return value, _accuracy(logits, targets)


def _snapshot(head, model):
    if head == "ranking":
        return model.embeddings.copy()
    return ([{n: a.copy() for n, a in blk.named()} for blk in model.blocks],
            [blk.bn_state.copy() for blk in model.blocks],
            {i: {n: a.copy() for n, a in p.named()} for i, p in model.cbams.items()},
            model.classifier_w.copy(), model.classifier_b.copy())


def _restore(head, model, snap):
    if head == "ranking":
        model.embeddings = snap.copy()
        return model
    blocks, states, cbams, cw, cb = snap
    for blk, vals, st in zip(model.blocks, blocks, states):
        for n, a in vals.items():
            setattr(blk, n, a.copy())
        blk.bn_state = st.copy()
    for i, vals in cbams.items():
        for n, a in vals.items():
            setattr(model.cbams[i], n, a.copy())
    model.classifier_w = cw.copy()
    model.classifier_b = cb.copy()
    return model


def train(head, data, config, init=None):
    """Train a head to the early-stopping contract; returns the best-epoch model.

    Fully deterministic for a fixed (config, data, seed).
    """
    if head not in ("fcn", "ranking"):
        raise ValueError(f"unknown head {head!r}")
    if len(data.x_train) == 0 or len(data.x_val) == 0:
        raise ValueError("train and validation sets must be nonempty")
    dtype = config.dtype
    x_train = np.asarray(data.x_train, dtype=dtype)
    x_val = np.asarray(data.x_val, dtype=dtype)
    y_train = np.asarray(data.y_train, dtype=int)
    y_val = np.asarray(data.y_val, dtype=int)

    weights = (np.asarray(data.class_weights, dtype=np.float64)
               if data.class_weights is not None
               else losses.inverse_frequency_weights(y_train))

    rng = np.random.default_rng(config.seed)
    if head == "ranking":
        model = init if init is not None else models.PromptBank.init_random(
            x_train.shape[1], temperature=config.temperature, seed=config.seed, dtype=dtype)
        model.embeddings = np.asarray(model.embeddings, dtype=dtype)
        model = replace(model, temperature=config.temperature)
        param_dict = {"prompt_embeddings": model.embeddings}
    else:
        if init is not None:
            model = init
        else:
            cfg = models.FcnHeadConfig(in_channels=x_train.shape[1])
            model = models.FcnHeadParams.init(cfg, seed=config.seed, dtype=dtype)
        model = model.astype(dtype) if head == "fcn" and init is not None else model
        param_dict = dict(model.named_parameters())

    opt = OptimState.for_params(param_dict)
    stopper = EarlyStopper(config.early_stop_patience,
                           "min" if config.monitored_metric == "val_loss" else "max")
    history = []
    best_snap = None
    stopped_early = False
    n = len(x_train)

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if head == "ranking":
                value, logits, ctx, d_logits = _ranking_loss_and_grad(
                    model, xb, yb, weights, config)
                grads = {"prompt_embeddings": models.ranking_head_backward(ctx, d_logits)}
            else:
                logits, ctx = models.fcn_head_forward(xb, model, training=True)
                value, d_logits = _fcn_loss(logits, yb, weights, config)
                grads = models.fcn_head_backward(ctx, d_logits, model).d_params
            if not np.isfinite(value):
                raise GradingError(
                    f"non-finite loss {value} at epoch {epoch}, batch starting at {start}")
            adamw_step(param_dict, grads, opt, config.learning_rate, config.weight_decay)
            loss_sum += value * len(idx)
            correct += int(np.sum(models.argmax_highest_grade(logits) == yb))

        if head == "ranking":
            val_loss, val_acc = _evaluate_ranking(model, x_val, y_val, weights, config)
        else:
            val_loss, val_acc = _evaluate_fcn(model, x_val, y_val, weights, config)
        stats = EpochStats(epoch, loss_sum / n, correct / n, val_loss, val_acc)
        history.append(stats)

        monitored = val_loss if config.monitored_metric == "val_loss" else val_acc
        if stopper.update(epoch, monitored):
            best_snap = _snapshot(head, model)
        if stopper.should_stop:
            stopped_early = True
            break

    model = _restore(head, model, best_snap)
    return TrainResult(head, model, history, stopper.best_epoch, stopped_early)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict(head, model, inputs, thresholds=None):
    """Grades plus the probability matrix; with thresholds, one-vs-rest decisions."""
    if head in ("ranking", "zero-shot"):  # both score a prompt bank
        logits, _ = models.ranking_head_forward(inputs, model)
    elif head == "fcn":
        logits, _ = models.fcn_head_forward(np.asarray(inputs), model, training=False)
    else:
        raise ValueError(f"unknown head {head!r}")
    probs = losses.softmax(logits)
    if thresholds is None:
        grades = models.argmax_highest_grade(probs)
    else:
        grades = decide_batch(probs, thresholds)
    return np.asarray(grades, dtype=int), probs


# ---------------------------------------------------------------------------
# Assembling model inputs from manifests + containers
# ---------------------------------------------------------------------------

def gather_inputs(manifest, reader, kind):
    """Stack container entries for every manifest record, in manifest order."""
    arrays = []
    for rec in manifest:
        if rec.image_id not in reader:
            raise ct.ContainerError(f"container has no entry for image {rec.image_id!r}")
        arr = reader.get(rec.image_id)
        expected_ndim = 1 if kind == ct.KIND_GLOBAL else 3
        if arr.ndim != expected_ndim:
            raise ct.ContainerError(
                f"entry {rec.image_id!r} has {arr.ndim} dims, expected {expected_ndim} for {kind}")
        arrays.append(arr)
    return np.stack(arrays), manifest.labels()
