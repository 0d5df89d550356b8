"""Training loop, evaluation, and ranking metrics.

Training runs Adam with coupled L2 weight decay over shuffled minibatches,
evaluates validation AUROC after every epoch, and keeps a snapshot of the
best-scoring parameters; it stops once the score has not improved for
``patience`` consecutive epochs. Everything is seeded, so identical inputs
reproduce identical histories bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model as md
from . import numerics as nm
from .data import ConnectomeDataset


class MetricError(ValueError):
    """Raised when a metric is undefined for the given labels."""


class TrainingError(RuntimeError):
    """Raised when optimization produces non-finite values."""


# ---------------------------------------------------------------------------
# metrics


def auroc(labels, scores) -> float:
    """Area under the ROC curve via the rank-sum (Mann-Whitney) statistic.

    Equals the probability a positive outranks a negative, counting ties as
    half. Label 1 is the positive class; both classes must be present.
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise MetricError(f"labels {y.shape} and scores {s.shape} must be equal-length vectors")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    u_stat = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


@dataclass(frozen=True)
class Metrics:
    auroc: float
    accuracy: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
        }


def compute_metrics(labels, scores, threshold: float = 0.5) -> Metrics:
    """Confusion counts and AUROC from positive-class scores.

    Predicts positive only for scores strictly above the threshold, so an
    exactly tied score falls to the control class.
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    predicted = (s > threshold).astype(np.int64)
    tp = int(((predicted == 1) & (y == 1)).sum())
    fp = int(((predicted == 1) & (y == 0)).sum())
    tn = int(((predicted == 0) & (y == 0)).sum())
    fn = int(((predicted == 0) & (y == 1)).sum())
    total = y.size
    return Metrics(
        auroc=auroc(y, s),
        accuracy=(tp + tn) / total if total else 0.0,
        sensitivity=tp / (tp + fn) if (tp + fn) else 0.0,
        specificity=tn / (tn + fp) if (tn + fp) else 0.0,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


def positive_scores(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of the positive class from [B, C] logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e[:, 1] / e.sum(axis=1)


def evaluate(
    params: md.ModelParams,
    config: md.ModelConfig,
    dataset: ConnectomeDataset,
    threshold: float = 0.5,
    batch_size: int = 256,
) -> Metrics:
    """Forward the whole dataset (no tape) and score it.

    Per-subject outputs are independent of batch composition, so the result
    does not depend on dataset ordering.
    """
    if len(dataset) == 0:
        raise MetricError("cannot evaluate an empty dataset")
    scores = predict_scores(params, config, dataset, batch_size=batch_size)
    return compute_metrics(dataset.labels(), scores, threshold=threshold)


def predict_scores(
    params: md.ModelParams,
    config: md.ModelConfig,
    dataset: ConnectomeDataset,
    batch_size: int = 256,
) -> np.ndarray:
    stacked = dataset.stack_fc()
    out = np.empty(len(dataset))
    for start in range(0, len(dataset), batch_size):
        x = nm.Tensor(stacked[start : start + batch_size])
        result = md.forward(x, params, config)
        out[start : start + batch_size] = positive_scores(result.logits.data)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise md.ConfigError("lr and weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise md.ConfigError("batch_size must be positive")
        if self.max_epochs < 1:
            raise md.ConfigError("max_epochs must be positive")
        if not (1 <= self.patience <= self.max_epochs):
            raise md.ConfigError(
                f"patience {self.patience} must be in [1, max_epochs={self.max_epochs}]"
            )


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_auroc: float
    cv2: float
    gate_means: tuple[float, ...]


@dataclass
class TrainResult:
    params: md.ModelParams
    history: list[EpochStats]
    best_epoch: int
    best_val_auroc: float
    stopped_early: bool


def train(
    params: md.ModelParams,
    model_config: md.ModelConfig,
    train_set: ConnectomeDataset,
    val_set: ConnectomeDataset,
    train_config: TrainConfig | None = None,
) -> TrainResult:
    """Optimize ``params`` in place and return the best-validation snapshot.

    The history records, per epoch: mean batch loss, validation AUROC, mean
    batch balance penalty (cv^2 of gate importance), and the mean gate
    probability per expert across the epoch's subjects.
    """
    cfg = train_config or TrainConfig()
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    if model_config.cv_coef > 0 and model_config.decoder == "moe" and cfg.batch_size < 2:
        raise md.ConfigError("batch_size must be at least 2 when the balance penalty is active")
    val_labels = set(val_set.labels().tolist())
    if val_labels != {0, 1}:
        raise TrainingError("validation set must contain both classes for AUROC")

    stacked = train_set.stack_fc()
    labels = train_set.labels()
    n_train = len(train_set)
    rng = np.random.default_rng(cfg.seed)
    adam = nm.AdamState.for_params(
        params, lr=cfg.lr, weight_decay=cfg.weight_decay
    )

    history: list[EpochStats] = []
    best_auroc = -np.inf
    best_epoch = 0
    best_params = params.clone()
    epochs_since_best = 0
    stopped_early = False

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n_train)
        losses = []
        cv2_values = []
        gate_sums = None
        step = 0
        for start in range(0, n_train, cfg.batch_size):
            step += 1
            batch = order[start : start + cfg.batch_size]
            x = nm.Tensor(stacked[batch])
            y = labels[batch]
            params.zero_grads()
            with nm.Tape() as tape:
                result = md.forward(x, params, model_config)
                loss = md.total_loss(
                    result.logits, y, result.gate_probs, model_config.cv_coef, model_config.cv_eps
                )
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            nm.backward(loss, tape)
            nm.adam_step(params, params.grads(), adam)

            losses.append(loss_value)
            probs = result.trace.gate_probs
            if probs is None:
                probs = np.ones((batch.size, 1))
            importance = probs.sum(axis=0)
            cv2_values.append(md.cv_squared(importance, eps=model_config.cv_eps).item())
            gate_sums = importance if gate_sums is None else gate_sums + importance

        val_auroc = evaluate(params, model_config, val_set).auroc
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_auroc=val_auroc,
                cv2=float(np.mean(cv2_values)),
                gate_means=tuple(float(g) for g in gate_sums / n_train),
            )
        )
        if val_auroc > best_auroc:
            best_auroc = val_auroc
            best_epoch = epoch
            best_params = params.clone()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                stopped_early = True
                break

    return TrainResult(
        params=best_params,
        history=history,
        best_epoch=best_epoch,
        best_val_auroc=float(best_auroc),
        stopped_early=stopped_early,
    )


# ---------------------------------------------------------------------------
# history files


def history_header(n_experts: int) -> list[str]:
    return ["epoch", "train_loss", "val_auroc", "cv2"] + [
        f"gate_mean_e{e}" for e in range(n_experts)
    ]


def save_history(history: list[EpochStats], path) -> None:
    """CSV with one row per epoch; floats keep full repr precision."""
    if not history:
        raise ValueError("history is empty")
    n_experts = len(history[0].gate_means)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(history_header(n_experts))
        for row in history:
            writer.writerow(
                [row.epoch, repr(row.train_loss), repr(row.val_auroc), repr(row.cv2)]
                + [repr(g) for g in row.gate_means]
            )


def load_history(path) -> list[EpochStats]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_experts = len(header) - 4
        rows = []
        for rec in reader:
            rows.append(
                EpochStats(
                    epoch=int(rec[0]),
                    train_loss=float(rec[1]),
                    val_auroc=float(rec[2]),
                    cv2=float(rec[3]),
                    gate_means=tuple(float(v) for v in rec[4 : 4 + n_experts]),
                )
            )
    return rows
