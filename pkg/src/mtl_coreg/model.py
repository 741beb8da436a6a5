"""Two-view multi-task model.

Each view is a small dense feature extractor feeding a bank of per-task
linear classifiers. Training combines four losses: one recognition loss
per view (masked binary cross-entropy), a weight-decorrelation loss (mean
cosine similarity between corresponding augmented classifier weights of
the two views), and a prediction-consistency loss (mean Jensen-Shannon
divergence between the per-task Bernoulli outputs of the two views). The
fused output is the elementwise mean of the two views' probabilities.

Gradients are computed analytically for every parameter; they are checked
against central finite differences in the test suite.

Parameters serialize to a flat, versioned binary layout: magic bytes,
version, task count, feature dim, per-view layer dims and activation
codes, then all parameters in declaration order as little-endian float64
(view-1 extractor layers, view-2 extractor layers, bank 1, bank 2; each
layer/bank contributes weights then biases).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import (
    ConfigError,
    DegenerateVectorError,
    EmptySelectionError,
    FormatError,
    InvalidArgumentError,
    ShapeError,
)
from .numerics import PROB_EPS, entropy_nats

PARAMS_MAGIC = b"TVMP"
PARAMS_VERSION = 1

_ACTIVATIONS = ("tanh", "identity")


def _xavier_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class FeatureExtractor:
    """Dense layer stack with a fixed smooth nonlinearity.

    ``activation="identity"`` is a test hook that makes the stack linear;
    the trained configuration always uses tanh.
    """

    def __init__(self, weights, biases, activation: str = "tanh"):
        if activation not in _ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {activation!r}")
        if len(weights) != len(biases) or not weights:
            raise ShapeError("need one bias vector per weight matrix")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activation = activation
        dims = [self.weights[0].shape[0]]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeError("layer weight/bias shapes inconsistent")
            if w.shape[0] != dims[-1]:
                raise ShapeError("consecutive layer dims do not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidArgumentError("extractor parameters must be finite")
            dims.append(w.shape[1])
        self.layer_dims = tuple(dims)

    @classmethod
    def initialize(cls, layer_dims, rng, activation: str = "tanh") -> "FeatureExtractor":
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ConfigError(f"layer dims must be >= 2 positive integers, got {dims}")
        weights = [_xavier_uniform(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        return cls(weights, biases, activation)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x: np.ndarray, return_activations: bool = False):
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(
                f"expected (N, {self.input_dim}) input, got {h.shape}"
            )
        acts = [h]
        for w, b in zip(self.weights, self.biases):
            a = h @ w + b
            h = np.tanh(a) if self.activation == "tanh" else a
            acts.append(h)
        return (h, acts) if return_activations else h

    def backward(self, acts, grad_out):
        """Gradients of all layer parameters given d(loss)/d(output).

        Returns ([(dW, db) per layer], d(loss)/d(input)).
        """
        grads = [None] * len(self.weights)
        delta = grad_out
        for layer in reversed(range(len(self.weights))):
            h_out = acts[layer + 1]
            da = delta * (1.0 - h_out * h_out) if self.activation == "tanh" else delta
            grads[layer] = (acts[layer].T @ da, da.sum(axis=0))
            delta = da @ self.weights[layer].T
        return grads, delta

    def copy(self) -> "FeatureExtractor":
        return FeatureExtractor(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


class ClassifierBank:
    """Per-task linear classifiers for one view: weights (C, d), biases (C,)."""

    def __init__(self, weights, biases):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ShapeError("bank expects (C, d) weights and (C,) biases")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ShapeError("bank weight/bias task counts differ")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise InvalidArgumentError("bank parameters must be finite")

    @classmethod
    def initialize(cls, task_count: int, feature_dim: int, rng) -> "ClassifierBank":
        weights = _xavier_uniform(rng, feature_dim, task_count).T
        # Nonzero biases guarantee a nonzero augmented vector [w_j, b_j]
        # even before the first update.
        biases = rng.uniform(-0.01, 0.01, size=task_count)
        return cls(weights, biases)

    @property
    def task_count(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.biases

    def augmented(self) -> np.ndarray:
        """Per-task stacked [w_j, b_j] rows, shape (C, d + 1)."""
        return np.concatenate([self.weights, self.biases[:, None]], axis=1)

    def copy(self) -> "ClassifierBank":
        return ClassifierBank(self.weights.copy(), self.biases.copy())


@dataclass(frozen=True)
class PredictionBatch:
    """Per-view and fused per-task probabilities for one batch."""

    p1: np.ndarray
    p2: np.ndarray
    fused: np.ndarray

    def __post_init__(self):
        if self.p1.shape != self.p2.shape or self.fused.shape != self.p1.shape:
            raise ShapeError("prediction matrices must share one shape")

    @classmethod
    def from_views(cls, p1: np.ndarray, p2: np.ndarray) -> "PredictionBatch":
        return cls(p1=p1, p2=p2, fused=(p1 + p2) / 2.0)


@dataclass(frozen=True)
class LossBreakdown:
    """The four training losses and their weighted total."""

    l_rec1: float
    l_rec2: float
    l_mv: float
    l_cr: float
    lambda_mv: float
    lambda_cr: float
    total: float

    @classmethod
    def build(cls, l_rec1, l_rec2, l_mv, l_cr, lambda_mv, lambda_cr) -> "LossBreakdown":
        total = l_rec1 + l_rec2 + lambda_mv * l_mv + lambda_cr * l_cr
        return cls(l_rec1, l_rec2, l_mv, l_cr, lambda_mv, lambda_cr, total)


@dataclass
class Gradients:
    """Parameter-shaped gradients of the total loss, plus the loss itself."""

    extractor_1: list
    extractor_2: list
    bank_1: tuple
    bank_2: tuple
    loss: LossBreakdown

    def flat(self) -> np.ndarray:
        """Concatenation in the model's parameter declaration order."""
        parts = []
        for layer_grads in (self.extractor_1, self.extractor_2):
            for dw, db in layer_grads:
                parts.append(dw.ravel())
                parts.append(db.ravel())
        for dw, db in (self.bank_1, self.bank_2):
            parts.append(dw.ravel())
            parts.append(db.ravel())
        return np.concatenate(parts)


def loss_recognition(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Masked mean binary cross-entropy with clamped log arguments."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if probs.shape != labels.shape or probs.shape != mask.shape:
        raise ShapeError("probs, labels and mask must share one shape")
    m_total = mask.sum()
    if m_total == 0:
        raise EmptySelectionError("recognition loss over an all-zero mask")
    pc = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    nll = -(labels * np.log(pc) + (1.0 - labels) * np.log1p(-pc))
    return float((nll * mask).sum() / m_total)


def _multiview_cosines(bank1: ClassifierBank, bank2: ClassifierBank):
    if bank1.task_count != bank2.task_count or bank1.feature_dim != bank2.feature_dim:
        raise ShapeError("banks must share task count and feature dim")
    aug1 = bank1.augmented()
    aug2 = bank2.augmented()
    n1 = np.linalg.norm(aug1, axis=1)
    n2 = np.linalg.norm(aug2, axis=1)
    if np.any(n1 == 0.0) or np.any(n2 == 0.0):
        raise DegenerateVectorError("augmented classifier weight vector has zero norm")
    cos = (aug1 * aug2).sum(axis=1) / (n1 * n2)
    return aug1, aug2, n1, n2, cos


def loss_multiview(bank1: ClassifierBank, bank2: ClassifierBank, absolute: bool = False) -> float:
    """Mean cosine similarity between corresponding augmented task classifiers.

    With ``absolute=True`` the magnitude |cos| is penalized instead, so the
    optimum is exact orthogonality rather than anti-alignment.
    """
    _, _, _, _, cos = _multiview_cosines(bank1, bank2)
    vals = np.abs(cos) if absolute else cos
    return float(vals.mean())


def _mv_term(bank1, bank2, lambda_mv, absolute):
    """Cosine loss value plus its intermediates.

    The nonzero-norm check only matters when the loss participates: with
    lambda_mv == 0 a degenerate bank reports 0 instead of raising.
    """
    try:
        parts = _multiview_cosines(bank1, bank2)
    except DegenerateVectorError:
        if lambda_mv > 0.0:
            raise
        return 0.0, None
    cos = parts[4]
    return float((np.abs(cos) if absolute else cos).mean()), parts


def loss_coreg(pred: PredictionBatch) -> float:
    """Mean Bernoulli Jensen-Shannon divergence between the two views."""
    p1, p2 = pred.p1, pred.p2
    mid = (p1 + p2) / 2.0
    js = entropy_nats(mid) - 0.5 * (entropy_nats(p1) + entropy_nats(p2))
    return float(js.mean())


def _normalize_masks(masks, shape):
    if masks is None:
        full = np.ones(shape, dtype=np.float64)
        return full, full
    if isinstance(masks, tuple):
        m1, m2 = masks
    else:
        m1 = m2 = masks
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if m1.shape != shape or m2.shape != shape:
        raise ShapeError("mask shape must match (N, C)")
    return m1, m2


class TwoViewModel:
    """Two feature extractors plus two per-task classifier banks."""

    def __init__(self, extractor_1, extractor_2, bank_1, bank_2):
        if extractor_1.input_dim != extractor_2.input_dim:
            raise ShapeError("extractors must share the input dim")
        if extractor_1.output_dim != bank_1.feature_dim:
            raise ShapeError("view-1 feature dim does not match its bank")
        if extractor_2.output_dim != bank_2.feature_dim:
            raise ShapeError("view-2 feature dim does not match its bank")
        if bank_1.task_count != bank_2.task_count:
            raise ShapeError("banks must share the task count")
        self.extractor_1 = extractor_1
        self.extractor_2 = extractor_2
        self.bank_1 = bank_1
        self.bank_2 = bank_2

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        hidden_dims,
        feature_dim: int,
        task_count: int,
        seed: int,
        activation: str = "tanh",
    ) -> "TwoViewModel":
        rng = np.random.Generator(np.random.Philox(key=seed))
        dims = [input_dim, *hidden_dims, feature_dim]
        ext1 = FeatureExtractor.initialize(dims, rng, activation)
        ext2 = FeatureExtractor.initialize(dims, rng, activation)
        bank1 = ClassifierBank.initialize(task_count, feature_dim, rng)
        bank2 = ClassifierBank.initialize(task_count, feature_dim, rng)
        return cls(ext1, ext2, bank1, bank2)

    @property
    def task_count(self) -> int:
        return self.bank_1.task_count

    @property
    def feature_dim(self) -> int:
        return self.extractor_1.output_dim

    @property
    def input_dim(self) -> int:
        return self.extractor_1.input_dim

    def forward(self, features: np.ndarray) -> PredictionBatch:
        f1 = self.extractor_1.forward(features)
        f2 = self.extractor_2.forward(features)
        p1 = special.expit(self.bank_1.logits(f1))
        p2 = special.expit(self.bank_2.logits(f2))
        return PredictionBatch.from_views(p1, p2)

    def total_loss(
        self,
        features,
        labels,
        masks=None,
        lambda_mv: float = 1.0,
        lambda_cr: float = 1.0,
        mv_absolute: bool = False,
    ) -> LossBreakdown:
        if lambda_mv < 0 or lambda_cr < 0:
            raise InvalidArgumentError("loss weights must be non-negative")
        labels = np.asarray(labels, dtype=np.float64)
        pred = self.forward(features)
        if labels.shape != pred.p1.shape:
            raise ShapeError("labels shape must match (N, C) predictions")
        m1, m2 = _normalize_masks(masks, labels.shape)
        l_mv, _ = _mv_term(self.bank_1, self.bank_2, lambda_mv, mv_absolute)
        return LossBreakdown.build(
            l_rec1=loss_recognition(pred.p1, labels, m1),
            l_rec2=loss_recognition(pred.p2, labels, m2),
            l_mv=l_mv,
            l_cr=loss_coreg(pred),
            lambda_mv=lambda_mv,
            lambda_cr=lambda_cr,
        )

    def gradients(
        self,
        features,
        labels,
        masks=None,
        lambda_mv: float = 1.0,
        lambda_cr: float = 1.0,
        mv_absolute: bool = False,
    ) -> Gradients:
        """Analytic d(total)/d(theta) for every parameter of both views."""
        if lambda_mv < 0 or lambda_cr < 0:
            raise InvalidArgumentError("loss weights must be non-negative")
        x = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        f1, acts1 = self.extractor_1.forward(x, return_activations=True)
        f2, acts2 = self.extractor_2.forward(x, return_activations=True)
        z1 = self.bank_1.logits(f1)
        z2 = self.bank_2.logits(f2)
        p1 = special.expit(z1)
        p2 = special.expit(z2)
        if labels.shape != p1.shape:
            raise ShapeError("labels shape must match (N, C) predictions")
        m1, m2 = _normalize_masks(masks, labels.shape)
        n, c = labels.shape

        l_rec1 = loss_recognition(p1, labels, m1)
        l_rec2 = loss_recognition(p2, labels, m2)
        l_mv, mv_parts = _mv_term(self.bank_1, self.bank_2, lambda_mv, mv_absolute)
        mid = (p1 + p2) / 2.0
        l_cr = float((entropy_nats(mid) - 0.5 * (entropy_nats(p1) + entropy_nats(p2))).mean())
        loss = LossBreakdown.build(l_rec1, l_rec2, l_mv, l_cr, lambda_mv, lambda_cr)

        # d(rec)/d(logit): (p - y) on entries the clamp leaves untouched,
        # exactly 0 where the clamp is active (the computed loss is flat there).
        def rec_logit_grad(p, mask):
            inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
            return np.where(inside, (p - labels) * mask, 0.0) / mask.sum()

        g1 = rec_logit_grad(p1, m1)
        g2 = rec_logit_grad(p2, m2)

        if lambda_cr > 0.0:
            # d(cr)/d(logit_i) = (z_i - logit(mid)) * p_i (1 - p_i) / (2 N C).
            # mid is clamped only where the sigmoid has saturated to exactly
            # 0 or 1, where the multiplying p(1-p) factor is exactly 0.
            mid_safe = np.clip(mid, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))
            logit_mid = np.log(mid_safe) - np.log1p(-mid_safe)
            scale = lambda_cr / (2.0 * n * c)
            g1 = g1 + scale * (z1 - logit_mid) * p1 * (1.0 - p1)
            g2 = g2 + scale * (z2 - logit_mid) * p2 * (1.0 - p2)

        dw_bank1 = g1.T @ f1
        db_bank1 = g1.sum(axis=0)
        dw_bank2 = g2.T @ f2
        db_bank2 = g2.sum(axis=0)

        if lambda_mv > 0.0:
            # d(mean cos)/d(aug1_j) = (aug2_j/(|u||v|) - cos_j aug1_j/|u|^2)/C,
            # times sign(cos_j) when penalizing |cos|.
            aug1, aug2, n1, n2, cos = mv_parts
            sign = np.sign(cos) if mv_absolute else np.ones_like(cos)
            coef = (lambda_mv / c) * sign
            d_aug1 = coef[:, None] * (aug2 / (n1 * n2)[:, None] - (cos / n1**2)[:, None] * aug1)
            d_aug2 = coef[:, None] * (aug1 / (n1 * n2)[:, None] - (cos / n2**2)[:, None] * aug2)
            dw_bank1 = dw_bank1 + d_aug1[:, :-1]
            db_bank1 = db_bank1 + d_aug1[:, -1]
            dw_bank2 = dw_bank2 + d_aug2[:, :-1]
            db_bank2 = db_bank2 + d_aug2[:, -1]

        grads_ext1, _ = self.extractor_1.backward(acts1, g1 @ self.bank_1.weights)
        grads_ext2, _ = self.extractor_2.backward(acts2, g2 @ self.bank_2.weights)

        return Gradients(
            extractor_1=grads_ext1,
            extractor_2=grads_ext2,
            bank_1=(dw_bank1, db_bank1),
            bank_2=(dw_bank2, db_bank2),
            loss=loss,
        )

    # -- parameter access -------------------------------------------------

    def _param_arrays(self):
        for ext in (self.extractor_1, self.extractor_2):
            for w, b in zip(ext.weights, ext.biases):
                yield w
                yield b
        for bank in (self.bank_1, self.bank_2):
            yield bank.weights
            yield bank.biases

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._param_arrays()])

    def set_flat_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for arr in self._param_arrays():
            arr[...] = vec[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size
        if offset != vec.size:
            raise ShapeError(f"expected {offset} parameters, got {vec.size}")

    def num_params(self) -> int:
        return sum(a.size for a in self._param_arrays())

    def copy(self) -> "TwoViewModel":
        return TwoViewModel(
            self.extractor_1.copy(),
            self.extractor_2.copy(),
            self.bank_1.copy(),
            self.bank_2.copy(),
        )

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        header = [struct.pack("<4sIII", PARAMS_MAGIC, PARAMS_VERSION,
                              self.task_count, self.feature_dim)]
        for ext in (self.extractor_1, self.extractor_2):
            dims = ext.layer_dims
            header.append(struct.pack(f"<I{len(dims)}IB", len(dims), *dims,
                                      _ACTIVATIONS.index(ext.activation)))
        payload = self.flat_params().astype("<f8").tobytes()
        return b"".join(header) + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TwoViewModel":
        try:
            magic, version, task_count, feature_dim = struct.unpack_from("<4sIII", blob, 0)
        except struct.error as exc:
            raise FormatError("truncated model parameter blob") from exc
        if magic != PARAMS_MAGIC:
            raise FormatError(f"bad model magic {magic!r}")
        if version != PARAMS_VERSION:
            raise FormatError(f"unsupported model version {version}")
        offset = struct.calcsize("<4sIII")
        specs = []
        for _ in range(2):
            try:
                (ndims,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                dims = struct.unpack_from(f"<{ndims}I", blob, offset)
                offset += 4 * ndims
                (act_code,) = struct.unpack_from("<B", blob, offset)
                offset += 1
            except struct.error as exc:
                raise FormatError("truncated model header") from exc
            if ndims < 2 or act_code >= len(_ACTIVATIONS):
                raise FormatError("invalid extractor description")
            specs.append((dims, _ACTIVATIONS[act_code]))
        params = np.frombuffer(blob, dtype="<f8", offset=offset)

        def take(shape):
            nonlocal params
            size = int(np.prod(shape))
            if params.size < size:
                raise FormatError("model parameter payload too short")
            out = params[:size].reshape(shape).astype(np.float64)
            params = params[size:]
            return out

        extractors = []
        for dims, act in specs:
            if dims[-1] != feature_dim:
                raise FormatError("extractor output dim disagrees with header")
            weights, biases = [], []
            for a, b in zip(dims[:-1], dims[1:]):
                weights.append(take((a, b)))
                biases.append(take((b,)))
            extractors.append(FeatureExtractor(weights, biases, act))
        banks = []
        for _ in range(2):
            w = take((task_count, feature_dim))
            b = take((task_count,))
            banks.append(ClassifierBank(w, b))
        if params.size:
            raise FormatError("model parameter payload has trailing bytes")
        return cls(extractors[0], extractors[1], banks[0], banks[1])
