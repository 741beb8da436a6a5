"""Challenge metrics and per-task selection strategies.

The composite metric is (mean per-task accuracy + mean per-task F1) / 2.
Selection picks, independently per task, the training epoch and the
decision threshold that maximize that task's (accuracy + F1) / 2 on a
held-out set; a linear logistic blend of several member models' logits is
available as an ensembling step.

A ``SelectionResult`` serializes to JSON as
``{"tasks": {"<j>": {"epoch", "threshold", "score", "weights"}}, ...}``;
evaluation reports serialize to CSV with one row per strategy
(``strategy, f1, accuracy, final_score``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import (
    EmptySelectionError,
    FormatError,
    InvalidArgumentError,
    ShapeError,
)
from .numerics import clamp_prob


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InvalidArgumentError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, truth) -> ConfusionCounts:
    """Standard binary confusion counts from 0/1 vectors."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise ShapeError("pred and truth must be equal-length non-empty vectors")
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise InvalidArgumentError("pred and truth entries must be 0 or 1")
    p = p.astype(bool)
    t = t.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        tn=int(np.sum(~p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def f1(c: ConfusionCounts, degenerate: float = 1.0) -> float:
    """2tp / (2tp + fp + fn); the no-positives-anywhere case (tp = fp =
    fn = 0) returns ``degenerate`` (vacuously perfect by default)."""
    if c.total == 0:
        raise EmptySelectionError("f1 of empty counts")
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return float(degenerate)
    return 2.0 * c.tp / denom


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise EmptySelectionError("accuracy of empty counts")
    return (c.tp + c.tn) / c.total


def final_score(mean_acc: float, mean_f1: float) -> float:
    """The challenge metric: arithmetic mean of accuracy and F1."""
    for name, v in (("mean_acc", mean_acc), ("mean_f1", mean_f1)):
        if not 0.0 <= v <= 1.0:
            raise InvalidArgumentError(f"{name} must lie in [0, 1], got {v}")
    return (mean_acc + mean_f1) / 2.0


def task_score(c: ConfusionCounts, degenerate_f1: float = 1.0) -> float:
    """(accuracy + F1) / 2 for one task."""
    return (accuracy(c) + f1(c, degenerate_f1)) / 2.0


@dataclass(frozen=True)
class EvaluationReport:
    """Per-task metrics plus their means and the composite score."""

    counts: tuple
    f1s: np.ndarray
    accs: np.ndarray
    scores: np.ndarray
    mean_f1: float
    mean_acc: float
    final: float


def _check_prob_matrix(probs, name="fused_probs") -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be (N, C)")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidArgumentError(f"{name} must lie in [0, 1]")
    return arr


def evaluate(fused_probs, thresholds, truth, mask=None, degenerate_f1: float = 1.0) -> EvaluationReport:
    """Threshold, count, and score: final = mean_j (acc_j + f1_j) / 2."""
    probs = _check_prob_matrix(fused_probs)
    t = np.asarray(truth)
    if t.shape != probs.shape:
        raise ShapeError("truth shape must match fused_probs")
    n, c = probs.shape
    thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (c,))
    if mask is None:
        mask = np.ones_like(t)
    mask = np.asarray(mask)
    if mask.shape != probs.shape:
        raise ShapeError("mask shape must match fused_probs")
    counts = []
    for j in range(c):
        rows = mask[:, j] == 1
        if not rows.any():
            raise EmptySelectionError(f"no valid samples for task {j}")
        pred = (probs[rows, j] >= thr[j]).astype(np.uint8)
        counts.append(confusion(pred, t[rows, j]))
    f1s = np.array([f1(cc, degenerate_f1) for cc in counts])
    accs = np.array([accuracy(cc) for cc in counts])
    scores = (accs + f1s) / 2.0
    return EvaluationReport(
        counts=tuple(counts),
        f1s=f1s,
        accs=accs,
        scores=scores,
        mean_f1=float(f1s.mean()),
        mean_acc=float(accs.mean()),
        final=final_score(float(accs.mean()), float(f1s.mean())),
    )


@dataclass
class SelectionResult:
    """Per-task chosen epochs and/or thresholds with their scores."""

    scores: np.ndarray
    composite: float
    epochs: np.ndarray | None = None
    thresholds: np.ndarray | None = None
    ensemble_weights: np.ndarray | None = None
    ensemble_fallback: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def task_count(self) -> int:
        return self.scores.shape[0]

    def to_json(self) -> str:
        tasks = {}
        for j in range(self.task_count):
            entry = {
                "epoch": None if self.epochs is None else int(self.epochs[j]),
                "threshold": None if self.thresholds is None else float(self.thresholds[j]),
                "score": float(self.scores[j]),
                "weights": None
                if self.ensemble_weights is None
                else [float(w) for w in self.ensemble_weights[j]],
            }
            if self.ensemble_fallback is not None:
                entry["ensemble_fallback"] = bool(self.ensemble_fallback[j])
            tasks[str(j)] = entry
        doc = {"tasks": tasks, "composite": float(self.composite), **self.extra}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectionResult":
        try:
            doc = json.loads(text)
            tasks = doc["tasks"]
            order = sorted(tasks, key=int)
            scores = np.array([float(tasks[k]["score"]) for k in order])
            epochs = [tasks[k].get("epoch") for k in order]
            thresholds = [tasks[k].get("threshold") for k in order]
            weights = [tasks[k].get("weights") for k in order]
            fallback = [tasks[k].get("ensemble_fallback") for k in order]
            composite = float(doc["composite"])
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"invalid selection document: {exc}") from exc
        extra = {k: v for k, v in doc.items() if k not in ("tasks", "composite")}
        return cls(
            scores=scores,
            composite=composite,
            epochs=None if any(e is None for e in epochs) else np.array(epochs, dtype=np.int64),
            thresholds=None
            if any(t is None for t in thresholds)
            else np.array(thresholds, dtype=np.float64),
            ensemble_weights=None
            if any(w is None for w in weights)
            else np.array(weights, dtype=np.float64),
            ensemble_fallback=None
            if any(fb is None for fb in fallback)
            else np.array(fallback, dtype=bool),
            extra=extra,
        )


def select_checkpoints(history) -> SelectionResult:
    """Per-task argmax over epochs of the per-task score (earliest on ties).

    ``history`` is a checkpoint history (anything with ``scores_matrix()``)
    or a bare (epochs, tasks) score matrix; the composite is the mean over
    tasks of the per-task maxima, which always dominates the best
    single-epoch mean.
    """
    score_table = history.scores_matrix() if hasattr(history, "scores_matrix") else history
    table = np.asarray(score_table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] == 0 or table.shape[1] == 0:
        raise EmptySelectionError("score table must be a non-empty (epochs, tasks) matrix")
    epochs = table.argmax(axis=0)
    per_task = table.max(axis=0)
    return SelectionResult(
        scores=per_task,
        composite=float(per_task.mean()),
        epochs=epochs.astype(np.int64),
    )


def select_thresholds(fused_probs, truth, grid, mask=None, degenerate_f1: float = 1.0) -> SelectionResult:
    """Per-task threshold from ``grid`` maximizing (acc + F1) / 2.

    Ties break toward the lowest threshold (favors recall).
    """
    grid = [float(g) for g in grid]
    if not grid or any(not 0.0 < g < 1.0 for g in grid):
        raise InvalidArgumentError("threshold grid must be non-empty with values in (0, 1)")
    grid = sorted(grid)
    probs = _check_prob_matrix(fused_probs)
    t = np.asarray(truth)
    if t.shape != probs.shape:
        raise ShapeError("truth shape must match fused_probs")
    c = probs.shape[1]
    best_thr = np.empty(c)
    best_score = np.full(c, -np.inf)
    for g in grid:
        report = evaluate(probs, g, t, mask=mask, degenerate_f1=degenerate_f1)
        better = report.scores > best_score
        best_thr[better] = g
        best_score[better] = report.scores[better]
    return SelectionResult(
        scores=best_score,
        composite=float(best_score.mean()),
        thresholds=best_thr,
    )


@dataclass
class EnsembleFit:
    """Per-task logistic blend of member logits, with average fallback."""

    weights: np.ndarray  # (C, M + 1), intercept first
    fallback: np.ndarray  # (C,) bool: True -> uniform average used
    scores: np.ndarray  # (C,) fit-set task scores of the adopted blend
    composite: float


def _member_stack(member_probs):
    mats = [_check_prob_matrix(p, f"member {i}") for i, p in enumerate(member_probs)]
    if len(mats) < 2:
        raise InvalidArgumentError("ensembling needs at least two members")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ShapeError("all members must share one (N, C) shape")
    return np.stack(mats)  # (M, N, C)


def ensemble_probs(member_probs, fit: EnsembleFit) -> np.ndarray:
    """Apply a fitted blend; fallback tasks use the uniform average."""
    stack = _member_stack(member_probs)
    m, n, c = stack.shape
    if fit.weights.shape != (c, m + 1):
        raise ShapeError("fit does not match the member count / task count")
    logits = special.logit(clamp_prob(stack))
    out = np.empty((n, c))
    for j in range(c):
        if fit.fallback[j]:
            out[:, j] = stack[:, :, j].mean(axis=0)
        else:
            beta = fit.weights[j]
            out[:, j] = special.expit(beta[0] + logits[:, :, j].T @ beta[1:])
    return out


def fit_ensemble(
    member_probs,
    truth,
    *,
    iterations: int = 800,
    degenerate_f1: float = 1.0,
) -> EnsembleFit:
    """Per-task logistic blend of member logits, fit by gradient descent on
    cross-entropy; a task falls back to the uniform average whenever the
    fitted blend fails to strictly improve the fit-set task score (including
    the degenerate all-constant-members case)."""
    stack = _member_stack(member_probs)
    t = np.asarray(truth)
    m, n, c = stack.shape
    if t.shape != (n, c):
        raise ShapeError("truth shape must match the members")
    if not np.isin(t, (0, 1)).all():
        raise InvalidArgumentError("truth entries must be 0 or 1")
    logits = special.logit(clamp_prob(stack))
    weights = np.zeros((c, m + 1))
    fallback = np.zeros(c, dtype=bool)
    scores = np.empty(c)
    for j in range(c):
        y = t[:, j].astype(np.float64)
        avg = stack[:, :, j].mean(axis=0)
        avg_score = task_score(confusion((avg >= 0.5).astype(np.uint8), t[:, j]), degenerate_f1)
        feats = logits[:, :, j].T  # (N, M)
        degenerate = bool(np.all(np.ptp(feats, axis=0) < 1e-12))
        if degenerate:
            fallback[j] = True
            weights[j] = np.concatenate([[0.0], np.full(m, 1.0 / m)])
            scores[j] = avg_score
            continue
        x = np.concatenate([np.ones((n, 1)), feats], axis=1)
        beta = np.concatenate([[0.0], np.full(m, 1.0 / m)])
        # 1/L step for the logistic loss; L <= 0.25 * mean ||x||^2.
        lr = 1.0 / (0.25 * float((x * x).sum(axis=1).mean()) + 1e-12)
        for _ in range(iterations):
            p = special.expit(x @ beta)
            beta = beta - lr * (x.T @ (p - y)) / n
        fitted = special.expit(x @ beta)
        fit_score = task_score(confusion((fitted >= 0.5).astype(np.uint8), t[:, j]), degenerate_f1)
        if fit_score > avg_score:
            weights[j] = beta
            scores[j] = fit_score
        else:
            fallback[j] = True
            weights[j] = np.concatenate([[0.0], np.full(m, 1.0 / m)])
            scores[j] = avg_score
    return EnsembleFit(
        weights=weights,
        fallback=fallback,
        scores=scores,
        composite=float(scores.mean()),
    )
