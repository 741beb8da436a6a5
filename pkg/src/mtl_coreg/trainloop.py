"""Mini-batch training with per-epoch checkpointing, confidence-based
noisy-label filtering, and the pretrain-then-finetune schedule.

Each epoch shuffles the training set, forms mini-batches, applies per-task
batch balancing to build the recognition masks (the same mask feeds both
views), takes one gradient step per batch (plain gradient descent or
momentum), and then scores every task on the held-out set at threshold 0.5,
snapshotting the parameters. All randomness derives from the config seed,
so a single-threaded run is bitwise reproducible.

Checkpoint history files hold, per epoch: the epoch index, a per-task
metrics block (confusion counts and f1/acc/score), the serialized model
parameters, and optionally the fused validation probabilities used later
for threshold sweeps. The metrics history exports to CSV with columns
``epoch, task, tp, fp, tn, fn, f1, acc, score``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    InvalidArgumentError,
    ShapeError,
    SizeError,
    TrainingDivergedError,
)
from .fileio import atomic_write_bytes
from .model import TwoViewModel
from .selection import confusion, f1, accuracy
from .synthdata import LabeledDataset, balance_batch, concat_datasets, stream

HISTORY_MAGIC = b"TVMH"
HISTORY_VERSION = 1

_OPTIMIZERS = ("sgd", "momentum")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    optimizer: str = "momentum"
    momentum: float = 0.9
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    lambda_mv: float = 1.0
    lambda_cr: float = 1.0
    alpha_balance: float = 0.2
    balancing_enabled: bool = True
    mv_absolute: bool = False
    store_val_probs: bool = True
    degenerate_f1: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in _OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {_OPTIMIZERS}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.lambda_mv < 0.0 or self.lambda_cr < 0.0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.alpha_balance <= 1.0:
            raise ConfigError("alpha_balance must lie in (0, 1]")


@dataclass
class Checkpoint:
    """One epoch's parameter snapshot and held-out per-task metrics."""

    epoch: int
    params_blob: bytes
    counts: np.ndarray  # (C, 4) int64: tp, fp, tn, fn
    f1s: np.ndarray
    accs: np.ndarray
    scores: np.ndarray
    val_probs: np.ndarray | None = None

    def restore_model(self) -> TwoViewModel:
        return TwoViewModel.from_bytes(self.params_blob)


@dataclass
class CheckpointHistory:
    checkpoints: list
    task_count: int

    def __post_init__(self):
        epochs = [cp.epoch for cp in self.checkpoints]
        if epochs != list(range(len(epochs))):
            raise ContractError("checkpoint epochs must increase from 0")
        for cp in self.checkpoints:
            if cp.scores.shape != (self.task_count,):
                raise ShapeError("checkpoint task count mismatch")

    def __len__(self) -> int:
        return len(self.checkpoints)

    def scores_matrix(self) -> np.ndarray:
        return np.stack([cp.scores for cp in self.checkpoints])

    def best_mean_epoch(self) -> int:
        means = self.scores_matrix().mean(axis=1)
        return int(means.argmax())

    # -- files --------------------------------------------------------------

    def to_bytes(self) -> bytes:
        has_probs = bool(self.checkpoints) and self.checkpoints[0].val_probs is not None
        val_n = self.checkpoints[0].val_probs.shape[0] if has_probs else 0
        parts = [
            struct.pack(
                "<4sIIIBI",
                HISTORY_MAGIC,
                HISTORY_VERSION,
                len(self.checkpoints),
                self.task_count,
                1 if has_probs else 0,
                val_n,
            )
        ]
        for cp in self.checkpoints:
            parts.append(struct.pack("<I", cp.epoch))
            parts.append(cp.counts.astype("<i8").tobytes())
            parts.append(np.stack([cp.f1s, cp.accs, cp.scores]).astype("<f8").tobytes())
            parts.append(struct.pack("<I", len(cp.params_blob)))
            parts.append(cp.params_blob)
            if has_probs:
                parts.append(cp.val_probs.astype("<f8").tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CheckpointHistory":
        head_fmt = "<4sIIIBI"
        try:
            magic, version, n_cp, c, has_probs, val_n = struct.unpack_from(head_fmt, blob, 0)
        except struct.error as exc:
            raise FormatError("truncated history header") from exc
        if magic != HISTORY_MAGIC:
            raise FormatError(f"bad history magic {magic!r}")
        if version != HISTORY_VERSION:
            raise FormatError(f"unsupported history version {version}")
        offset = struct.calcsize(head_fmt)
        checkpoints = []
        try:
            for _ in range(n_cp):
                (epoch,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                counts = np.frombuffer(blob, "<i8", count=4 * c, offset=offset)
                counts = counts.reshape(c, 4).astype(np.int64)
                offset += 32 * c
                metrics = np.frombuffer(blob, "<f8", count=3 * c, offset=offset)
                metrics = metrics.reshape(3, c).astype(np.float64)
                offset += 24 * c
                (blob_len,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                params = blob[offset : offset + blob_len]
                if len(params) != blob_len:
                    raise FormatError("truncated checkpoint parameters")
                offset += blob_len
                probs = None
                if has_probs:
                    probs = np.frombuffer(blob, "<f8", count=val_n * c, offset=offset)
                    probs = probs.reshape(val_n, c).astype(np.float64)
                    offset += 8 * val_n * c
                checkpoints.append(
                    Checkpoint(
                        epoch=epoch,
                        params_blob=params,
                        counts=counts,
                        f1s=metrics[0],
                        accs=metrics[1],
                        scores=metrics[2],
                        val_probs=probs,
                    )
                )
        except (struct.error, ValueError) as exc:
            raise FormatError(f"corrupt history payload: {exc}") from exc
        if offset != len(blob):
            raise FormatError("history payload has trailing bytes")
        return cls(checkpoints=checkpoints, task_count=c)

    @classmethod
    def load(cls, path) -> "CheckpointHistory":
        with open(path, "rb") as handle:
            return cls.from_bytes(handle.read())

    def metrics_csv(self) -> str:
        lines = ["epoch,task,tp,fp,tn,fn,f1,acc,score"]
        for cp in self.checkpoints:
            for j in range(self.task_count):
                tp, fp, tn, fn = (int(v) for v in cp.counts[j])
                lines.append(
                    f"{cp.epoch},{j},{tp},{fp},{tn},{fn},"
                    f"{cp.f1s[j]!r},{cp.accs[j]!r},{cp.scores[j]!r}"
                )
        return "\n".join(lines) + "\n"


def _check_model_dataset(model: TwoViewModel, ds: LabeledDataset, name: str) -> None:
    if ds.input_dim != model.input_dim:
        raise ShapeError(f"{name} input dim {ds.input_dim} != model {model.input_dim}")
    if ds.task_count != model.task_count:
        raise ShapeError(f"{name} task count {ds.task_count} != model {model.task_count}")


def evaluate_checkpoint(model: TwoViewModel, val_ds: LabeledDataset, epoch: int,
                        config: TrainConfig) -> Checkpoint:
    """Score every task on the held-out set at threshold 0.5."""
    fused = model.forward(val_ds.features).fused
    preds = (fused >= 0.5).astype(np.uint8)
    counts = np.empty((model.task_count, 4), dtype=np.int64)
    f1s = np.empty(model.task_count)
    accs = np.empty(model.task_count)
    for j in range(model.task_count):
        rows = val_ds.mask[:, j] == 1
        if not rows.any():
            raise SizeError(f"validation set has no usable labels for task {j}")
        cc = confusion(preds[rows, j], val_ds.labels[rows, j])
        counts[j] = (cc.tp, cc.fp, cc.tn, cc.fn)
        f1s[j] = f1(cc, config.degenerate_f1)
        accs[j] = accuracy(cc)
    return Checkpoint(
        epoch=epoch,
        params_blob=model.to_bytes(),
        counts=counts,
        f1s=f1s,
        accs=accs,
        scores=(accs + f1s) / 2.0,
        val_probs=fused if config.store_val_probs else None,
    )


def train(model: TwoViewModel, train_ds: LabeledDataset, val_ds: LabeledDataset,
          config: TrainConfig) -> CheckpointHistory:
    """Run the full optimization loop, snapshotting after every epoch."""
    _check_model_dataset(model, train_ds, "train_ds")
    _check_model_dataset(model, val_ds, "val_ds")
    if val_ds.n_samples == 0:
        raise SizeError("validation set must be non-empty")
    if train_ds.n_samples == 0:
        raise SizeError("training set must be non-empty")
    if config.batch_size > train_ds.n_samples:
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds training set size {train_ds.n_samples}"
        )

    n = train_ds.n_samples
    shuffle_rng = stream(config.seed, 0x0001)
    velocity = np.zeros(model.num_params())
    checkpoints = []
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay**epoch
        perm = shuffle_rng.permutation(n)
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            xb = train_ds.features[idx]
            yb = train_ds.labels[idx]
            valid = train_ds.mask[idx]
            if config.balancing_enabled:
                bal_seed = stream(config.seed, 0x0002, epoch, batch_index).integers(
                    0, 1 << 63
                )
                rec_mask = balance_batch(
                    yb, config.alpha_balance, int(bal_seed), valid_mask=valid
                ).mask()
            else:
                rec_mask = valid
            if rec_mask.sum() == 0:
                continue  # nothing supervises this batch
            grads = model.gradients(
                xb,
                yb,
                masks=rec_mask.astype(np.float64),
                lambda_mv=config.lambda_mv,
                lambda_cr=config.lambda_cr,
                mv_absolute=config.mv_absolute,
            )
            step = grads.flat()
            if not (np.isfinite(grads.loss.total) and np.all(np.isfinite(step))):
                raise TrainingDivergedError(epoch, batch_index)
            if config.optimizer == "momentum":
                velocity = config.momentum * velocity + step
                step = velocity
            model.set_flat_params(model.flat_params() - lr * step)
        checkpoints.append(evaluate_checkpoint(model, val_ds, epoch, config))
    return CheckpointHistory(checkpoints=checkpoints, task_count=model.task_count)


def agreement_mask(fused_probs: np.ndarray, noisy_labels: np.ndarray,
                   threshold: float) -> np.ndarray:
    """1 where the model's predicted label matches the noisy label and the
    prediction confidence max(p, 1-p) strictly exceeds the threshold."""
    if not 0.5 <= threshold < 1.0:
        raise InvalidArgumentError("filter threshold must lie in [0.5, 1)")
    fused = np.asarray(fused_probs, dtype=np.float64)
    noisy = np.asarray(noisy_labels)
    if fused.shape != noisy.shape:
        raise ShapeError("probabilities and noisy labels must share one shape")
    predicted = fused >= 0.5
    confidence = np.maximum(fused, 1.0 - fused)
    return ((predicted == (noisy == 1)) & (confidence > threshold)).astype(np.uint8)


def filter_noisy(model: TwoViewModel, noisy_ds: LabeledDataset,
                 threshold: float) -> LabeledDataset:
    """Keep a noisy label only when the model agrees with it confidently.

    The returned dataset uses the surviving noisy labels as supervision,
    with the agreement mask; rows with no surviving label are dropped.
    """
    if noisy_ds.noisy_labels is None:
        raise ContractError("filter_noisy requires a dataset with noisy labels")
    _check_model_dataset(model, noisy_ds, "noisy_ds")
    fused = model.forward(noisy_ds.features).fused
    keep = agreement_mask(fused, noisy_ds.noisy_labels, threshold) & noisy_ds.mask
    rows = keep.any(axis=1)
    return LabeledDataset(
        features=noisy_ds.features[rows].copy(),
        labels=noisy_ds.noisy_labels[rows].copy(),
        noisy_labels=None,
        mask=keep[rows].copy(),
    )


def pretrain_finetune(
    model: TwoViewModel,
    ds_a: LabeledDataset,
    ds_c: LabeledDataset,
    val_ds: LabeledDataset,
    pre_config: TrainConfig,
    fine_config: TrainConfig,
    return_pretrain: bool = False,
):
    """Train on A + C (masks respected), then continue on A alone.

    Returns the finetune-phase history; with ``return_pretrain=True``
    returns (finetune_history, pretrain_history).
    """
    combined = concat_datasets(ds_a, ds_c) if ds_c.n_samples > 0 else ds_a
    pre_history = train(model, combined, val_ds, pre_config)
    fine_history = train(model, ds_a, val_ds, fine_config)
    if return_pretrain:
        return fine_history, pre_history
    return fine_history
