"""Synthetic correlated multi-label data, label-noise injection, dataset
splitting, and per-task batch balancing.

Labels come from a shared-latent-factor model: a standard normal latent
vector is projected through per-task loading rows chosen so the latent
task scores carry a requested correlation matrix, and each task thresholds
its score at the empirical quantile of its target positive rate. Features
are an affine map of the same latent vector plus Gaussian noise, so linear
classifiers on the features can recover the labels.

All randomness flows through Philox counter-based streams keyed from the
caller's seed; per-task balancing streams use ``seed XOR task_index`` so
task selections are mutually independent and order-free.

Dataset files are a single binary container: magic, version, N, C,
input_dim, a noisy-labels flag, then row-major little-endian float64
features followed by one byte per label/noisy-label/mask entry. A CSV
export with columns ``feature_*, label_*, [noisy_*,] mask_*`` is also
provided.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    InvalidArgumentError,
    ShapeError,
    SizeError,
)
from .fileio import atomic_write_bytes

DATASET_MAGIC = b"MTLD"
DATASET_VERSION = 1

_U64_MASK = (1 << 64) - 1


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Deterministic Philox stream derived from a seed and integer tags."""
    state = np.random.SeedSequence([int(seed) & _U64_MASK, *[int(t) & _U64_MASK for t in tags]])
    key = int.from_bytes(state.generate_state(2, np.uint64).tobytes(), "little")
    return np.random.Generator(np.random.Philox(key=key))


def task_stream(seed: int, task_index: int) -> np.random.Generator:
    """Philox stream for one task, keyed as seed XOR task index."""
    if task_index < 0:
        raise InvalidArgumentError("task index must be non-negative")
    return np.random.Generator(np.random.Philox(key=(int(seed) ^ int(task_index)) & _U64_MASK))


def _as_binary(arr, name: str) -> np.ndarray:
    out = np.asarray(arr)
    if not np.isin(out, (0, 1)).all():
        raise InvalidArgumentError(f"{name} entries must be 0 or 1")
    return out.astype(np.uint8)


@dataclass
class LabeledDataset:
    """Feature vectors with per-task binary labels.

    ``noisy_labels`` is an optional parallel label matrix; ``mask`` marks
    which (sample, task) labels are usable (1) in recognition losses.
    """

    features: np.ndarray
    labels: np.ndarray
    noisy_labels: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-d matrix")
        if not np.all(np.isfinite(self.features)):
            raise InvalidArgumentError("features must be finite")
        self.labels = _as_binary(self.labels, "labels")
        if self.labels.ndim != 2 or self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError("labels must be (N, C) aligned with features")
        if self.noisy_labels is not None:
            self.noisy_labels = _as_binary(self.noisy_labels, "noisy_labels")
            if self.noisy_labels.shape != self.labels.shape:
                raise ShapeError("noisy_labels must match labels shape")
        if self.mask is None:
            self.mask = np.ones_like(self.labels)
        else:
            self.mask = _as_binary(self.mask, "mask")
            if self.mask.shape != self.labels.shape:
                raise ShapeError("mask must match labels shape")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def task_count(self) -> int:
        return self.labels.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            noisy_labels=None if self.noisy_labels is None else self.noisy_labels[idx].copy(),
            mask=self.mask[idx].copy(),
        )

    def select_tasks(self, task_indices) -> "LabeledDataset":
        idx = np.asarray(task_indices, dtype=np.int64)
        if idx.size == 0 or np.any(idx < 0) or np.any(idx >= self.task_count):
            raise InvalidArgumentError("task subset indices out of range")
        return LabeledDataset(
            features=self.features.copy(),
            labels=self.labels[:, idx].copy(),
            noisy_labels=None if self.noisy_labels is None else self.noisy_labels[:, idx].copy(),
            mask=self.mask[:, idx].copy(),
        )

    # -- file container -----------------------------------------------------

    def to_bytes(self) -> bytes:
        header = struct.pack(
            "<4sIQIIB",
            DATASET_MAGIC,
            DATASET_VERSION,
            self.n_samples,
            self.task_count,
            self.input_dim,
            1 if self.noisy_labels is not None else 0,
        )
        parts = [header, self.features.astype("<f8").tobytes(), self.labels.tobytes()]
        if self.noisy_labels is not None:
            parts.append(self.noisy_labels.tobytes())
        parts.append(self.mask.tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LabeledDataset":
        head_fmt = "<4sIQIIB"
        head_size = struct.calcsize(head_fmt)
        try:
            magic, version, n, c, d, has_noisy = struct.unpack_from(head_fmt, blob, 0)
        except struct.error as exc:
            raise FormatError("truncated dataset header") from exc
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}")
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        expected = head_size + 8 * n * d + (2 + has_noisy) * n * c
        if len(blob) != expected:
            raise FormatError(f"dataset payload is {len(blob)} bytes, expected {expected}")
        offset = head_size
        features = np.frombuffer(blob, "<f8", count=n * d, offset=offset).reshape(n, d)
        offset += 8 * n * d

        def bytes_block():
            nonlocal offset
            out = np.frombuffer(blob, np.uint8, count=n * c, offset=offset).reshape(n, c)
            offset += n * c
            return out

        labels = bytes_block()
        noisy = bytes_block() if has_noisy else None
        mask = bytes_block()
        try:
            return cls(features.astype(np.float64), labels, noisy, mask)
        except (ShapeError, InvalidArgumentError) as exc:
            raise FormatError(f"dataset payload failed validation: {exc}") from exc

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        with open(path, "rb") as handle:
            return cls.from_bytes(handle.read())

    def to_csv(self, path) -> None:
        cols = [f"feature_{i}" for i in range(self.input_dim)]
        cols += [f"label_{j}" for j in range(self.task_count)]
        if self.noisy_labels is not None:
            cols += [f"noisy_{j}" for j in range(self.task_count)]
        cols += [f"mask_{j}" for j in range(self.task_count)]
        rows = []
        for i in range(self.n_samples):
            row = [repr(float(v)) for v in self.features[i]]
            row += [str(int(v)) for v in self.labels[i]]
            if self.noisy_labels is not None:
                row += [str(int(v)) for v in self.noisy_labels[i]]
            row += [str(int(v)) for v in self.mask[i]]
            rows.append(row)
        out = []
        for row in [cols, *rows]:
            out.append(",".join(row))
        atomic_write_bytes(path, ("\n".join(out) + "\n").encode())


def concat_datasets(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    """Row-stack two datasets; noisy labels survive only if both sides carry them."""
    if a.task_count != b.task_count or a.input_dim != b.input_dim:
        raise ShapeError("datasets must share task count and input dim")
    noisy = None
    if a.noisy_labels is not None and b.noisy_labels is not None:
        noisy = np.concatenate([a.noisy_labels, b.noisy_labels])
    return LabeledDataset(
        features=np.concatenate([a.features, b.features]),
        labels=np.concatenate([a.labels, b.labels]),
        noisy_labels=noisy,
        mask=np.concatenate([a.mask, b.mask]),
    )


@dataclass(frozen=True)
class GeneratorConfig:
    """Configuration of the latent-factor label generator."""

    task_count: int
    latent_dim: int
    input_dim: int
    sample_count: int
    target_positive_rates: tuple
    task_correlation: tuple | None = None  # C x C rows; None means identity
    feature_noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("task_count", "latent_dim", "input_dim", "sample_count"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        rates = tuple(float(r) for r in self.target_positive_rates)
        if len(rates) != self.task_count:
            raise ConfigError("need one target positive rate per task")
        if any(not 0.0 < r < 1.0 for r in rates):
            raise ConfigError("target positive rates must lie in (0, 1)")
        object.__setattr__(self, "target_positive_rates", rates)
        if self.task_correlation is not None:
            corr = np.asarray(self.task_correlation, dtype=np.float64)
            c = self.task_count
            if corr.shape != (c, c):
                raise ConfigError(f"task_correlation must be {c}x{c}")
            if not np.allclose(corr, corr.T, atol=1e-12):
                raise ConfigError("task_correlation must be symmetric")
            if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
                raise ConfigError("task_correlation must have a unit diagonal")
            if np.any(np.abs(corr) > 1.0 + 1e-12):
                raise ConfigError("task_correlation entries must lie in [-1, 1]")
            if np.linalg.eigvalsh(corr).min() < -1e-8:
                raise ConfigError("task_correlation is not positive semidefinite")
            object.__setattr__(self, "task_correlation", tuple(map(tuple, corr.tolist())))

    def correlation_matrix(self) -> np.ndarray:
        if self.task_correlation is None:
            return np.eye(self.task_count)
        return np.asarray(self.task_correlation, dtype=np.float64)


def _loading_rows(corr: np.ndarray, latent_dim: int) -> np.ndarray:
    """Rows V with V @ V.T == corr (exact when latent_dim >= C)."""
    eigvals, eigvecs = np.linalg.eigh(corr)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    c = corr.shape[0]
    if latent_dim >= c:
        rows = eigvecs * np.sqrt(eigvals)
        return np.concatenate([rows, np.zeros((c, latent_dim - c))], axis=1)
    # Truncated factorization: keep the strongest factors and renormalize
    # rows so each task score stays unit variance.
    rows = eigvecs[:, :latent_dim] * np.sqrt(eigvals[:latent_dim])
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return rows / norms


def generate(config: GeneratorConfig) -> LabeledDataset:
    """Sample a dataset fully determined by ``config`` (including its seed).

    Per-task thresholds are calibrated on the sampled latent scores, so
    empirical positive rates track the targets to within a couple of 1/N.
    """
    rng = stream(config.seed, 0xDA7A)
    n, c = config.sample_count, config.task_count
    loadings = _loading_rows(config.correlation_matrix(), config.latent_dim)
    z = rng.standard_normal((n, config.latent_dim))
    scores = z @ loadings.T
    thresholds = np.array(
        [np.quantile(scores[:, j], 1.0 - config.target_positive_rates[j]) for j in range(c)]
    )
    labels = (scores > thresholds).astype(np.uint8)
    mixing = rng.standard_normal((config.input_dim, config.latent_dim)) / math.sqrt(
        config.latent_dim
    )
    features = z @ mixing.T
    if config.feature_noise_std > 0.0:
        features = features + config.feature_noise_std * rng.standard_normal(features.shape)
    return LabeledDataset(features=features, labels=labels)


def split(ds: LabeledDataset, train_fraction: float, seed: int):
    """Random disjoint partition with sizes ceil(f*N) and N - ceil(f*N)."""
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgumentError("train_fraction must lie strictly in (0, 1)")
    n = ds.n_samples
    # The epsilon absorbs float representation error in f*N (e.g. 0.7*10).
    n_first = math.ceil(train_fraction * n - 1e-9)
    if n_first <= 0 or n_first >= n:
        raise SizeError(f"split of {n} samples at {train_fraction} leaves an empty side")
    perm = stream(seed, 0x5BE1).permutation(n)
    first = np.sort(perm[:n_first])
    second = np.sort(perm[n_first:])
    return ds.subset(first), ds.subset(second)


def corrupt_labels(ds: LabeledDataset, flip_rate: float, seed: int) -> LabeledDataset:
    """Attach noisy labels = clean labels flipped independently at flip_rate."""
    if not 0.0 <= flip_rate < 0.5:
        raise InvalidArgumentError("flip_rate must lie in [0, 0.5)")
    flips = stream(seed, 0xF11B).random(ds.labels.shape) < flip_rate
    noisy = np.where(flips, 1 - ds.labels, ds.labels).astype(np.uint8)
    return replace(ds, noisy_labels=noisy)


@dataclass
class BalanceSelection:
    """Kept-sample index sets, one per task, for one batch."""

    kept: list
    alpha: float
    batch_size: int

    def mask(self) -> np.ndarray:
        out = np.zeros((self.batch_size, len(self.kept)), dtype=np.uint8)
        for j, idx in enumerate(self.kept):
            out[idx, j] = 1
        return out


def batch_balance(task_labels, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Kept indices for one task's batch labels.

    When alpha * #negatives exceeds #positives, all positives are kept plus
    a uniform random subset of exactly round(alpha * #negatives) negatives
    (round half to even); otherwise the whole batch is kept.
    """
    labels = _as_binary(task_labels, "task_labels")
    if labels.ndim != 1 or labels.size == 0:
        raise InvalidArgumentError("task_labels must be a non-empty 1-d vector")
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgumentError("alpha must lie in (0, 1]")
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels == 0)
    if alpha * negatives.size > positives.size:
        n_keep = int(np.rint(alpha * negatives.size))
        chosen = rng.choice(negatives.size, size=n_keep, replace=False)
        return np.sort(np.concatenate([positives, negatives[chosen]]))
    return np.arange(labels.size, dtype=np.int64)


def balance_batch(batch_labels, alpha: float, seed: int, valid_mask=None) -> BalanceSelection:
    """Apply batch_balance independently per task over the valid entries.

    Each task draws from its own ``seed XOR task`` stream, so selections do
    not depend on the order tasks are processed in.
    """
    labels = _as_binary(batch_labels, "batch_labels")
    if labels.ndim != 2:
        raise ShapeError("batch_labels must be (B, C)")
    b, c = labels.shape
    valid = np.ones_like(labels) if valid_mask is None else _as_binary(valid_mask, "valid_mask")
    if valid.shape != labels.shape:
        raise ShapeError("valid_mask must match batch_labels shape")
    kept = []
    for j in range(c):
        candidates = np.flatnonzero(valid[:, j] == 1)
        if candidates.size == 0:
            kept.append(candidates)
            continue
        local = batch_balance(labels[candidates, j], alpha, task_stream(seed, j))
        kept.append(candidates[local])
    return BalanceSelection(kept=kept, alpha=alpha, batch_size=b)
