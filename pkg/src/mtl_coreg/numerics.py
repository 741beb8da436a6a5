"""Shared math kernels: stable sigmoid, Bernoulli entropy, cosine similarity,
and the Bernoulli Jensen-Shannon divergence.

All logarithms are natural, so entropies are in nats and ``LN2`` is the
ceiling of both the binary entropy and the Jensen-Shannon divergence.
Every function accepts scalars or numpy arrays and is pure; concurrent
callers never share state.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .errors import DegenerateVectorError, InvalidArgumentError

LN2 = math.log(2.0)

# Probabilities entering log terms of the recognition loss are clamped to
# [PROB_EPS, 1 - PROB_EPS] to keep gradients bounded. Metrics and reported
# probabilities are never clamped.
PROB_EPS = 1e-7


def as_prob(value) -> float:
    """Validate one probability; out-of-range or non-finite input is an error."""
    v = float(value)
    if not math.isfinite(v) or not 0.0 <= v <= 1.0:
        raise InvalidArgumentError(f"probability must lie in [0, 1], got {value!r}")
    return v


def _checked_probs(p, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise InvalidArgumentError(f"{name} must lie in [0, 1]")
    return arr


def _checked_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgumentError(f"{name} must be a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} must contain only finite entries")
    return arr


def _scalar_like(template, value):
    return float(value) if np.ndim(template) == 0 else value


def sigmoid(x):
    """Stable logistic function 1 / (1 + exp(-x)).

    No overflow for any finite input; strictly increasing.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("sigmoid requires finite input")
    return _scalar_like(x, special.expit(arr))


def entropy_nats(p):
    """Binary entropy without domain checks; callers guarantee p in [0, 1].

    xlogy(0, 0) == 0 implements the 0 * ln 0 = 0 branch exactly, with no
    epsilon clamping.
    """
    return -(special.xlogy(p, p) + special.xlogy(1.0 - p, 1.0 - p)) + 0.0


def binary_entropy(p):
    """Entropy of Bernoulli(p) in nats: -(p ln p + (1-p) ln(1-p))."""
    arr = _checked_probs(p, "p")
    return _scalar_like(p, entropy_nats(arr))


def clamp_prob(p):
    """Clamp probabilities into [PROB_EPS, 1 - PROB_EPS] for log terms."""
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, in [-1, 1]."""
    va = _checked_vector(a, "a")
    vb = _checked_vector(b, "b")
    if va.shape != vb.shape:
        raise InvalidArgumentError(
            f"vectors must have equal length, got {va.size} and {vb.size}"
        )
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("zero-norm vector has no direction")
    return float(np.dot(va, vb) / (na * nb))


def js_bernoulli(p1, p2):
    """Jensen-Shannon divergence between Bernoulli(p1) and Bernoulli(p2), nats.

    H((p1+p2)/2) - (H(p1) + H(p2)) / 2; in [0, ln 2], zero iff p1 == p2,
    symmetric in its arguments under identical evaluation order.
    """
    a1 = _checked_probs(p1, "p1")
    a2 = _checked_probs(p2, "p2")
    mid = (a1 + a2) / 2.0
    out = entropy_nats(mid) - 0.5 * (entropy_nats(a1) + entropy_nats(a2))
    return _scalar_like(p1 if np.ndim(p1) else p2, out)
