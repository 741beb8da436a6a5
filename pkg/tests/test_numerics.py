"""Math kernel tests: frozen values, symmetry sweeps, and domain errors."""

import math

import mpmath as mp
import numpy as np
import pytest

from mtl_coreg.errors import DegenerateVectorError, InvalidArgumentError
from mtl_coreg.numerics import (
    LN2,
    as_prob,
    binary_entropy,
    clamp_prob,
    cosine_similarity,
    js_bernoulli,
    sigmoid,
)


def mp_entropy(p):
    """High-precision binary entropy oracle (50 significant digits)."""
    with mp.workdps(50):
        p = mp.mpf(p)
        if p == 0 or p == 1:
            return mp.mpf(0)
        return -(p * mp.log(p) + (1 - p) * mp.log(1 - p))


def mp_js(p1, p2):
    with mp.workdps(50):
        mid = (mp.mpf(p1) + mp.mpf(p2)) / 2
        return mp_entropy(mid) - (mp_entropy(p1) + mp_entropy(p2)) / 2


class TestSigmoid:
    def test_symmetry_point(self):
        assert sigmoid(0.0) == 0.5

    def test_log_three(self):
        assert sigmoid(math.log(3.0)) == pytest.approx(0.75, abs=1e-12)

    def test_deep_negative_tail(self):
        # Oracle: 1 / (1 + e^50) evaluated in extended precision.
        with mp.workdps(50):
            expected = float(1 / (1 + mp.e**50))
        value = sigmoid(-50.0)
        assert 0.0 < value < 1e-20
        assert value == pytest.approx(expected, rel=1e-12)

    def test_no_overflow_at_large_inputs(self):
        for x in (-1e3, 1e3):
            v = sigmoid(x)
            assert math.isfinite(v) and 0.0 <= v <= 1.0

    def test_complement_identity(self):
        rng = np.random.default_rng(2024)
        x = rng.uniform(-30, 30, size=10_000)
        np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-12)

    def test_strictly_increasing(self):
        x = np.linspace(-20, 20, 5000)
        assert np.all(np.diff(sigmoid(x)) > 0)

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(InvalidArgumentError):
            sigmoid(bad)


class TestProb:
    @pytest.mark.parametrize("ok", [0.0, 1.0, 0.25, 1e-300])
    def test_accepts_valid(self, ok):
        assert as_prob(ok) == ok

    @pytest.mark.parametrize("bad", [-0.1, 1.0000001, math.nan, math.inf, -5])
    def test_rejects_invalid(self, bad):
        with pytest.raises(InvalidArgumentError):
            as_prob(bad)

    def test_clamp_prob_window(self):
        clipped = clamp_prob(np.array([0.0, 0.3, 1.0]))
        assert clipped[0] == 1e-7
        assert clipped[1] == 0.3
        assert clipped[2] == 1.0 - 1e-7


class TestBinaryEntropy:
    def test_maximum_entropy_point(self):
        assert binary_entropy(0.5) == pytest.approx(LN2, abs=1e-15)

    @pytest.mark.parametrize("p", [0.0, 1.0])
    def test_degenerate_endpoints(self, p):
        assert binary_entropy(p) == 0.0

    def test_quarter_value(self):
        expected = float(mp_entropy(0.25))
        assert expected == pytest.approx(0.5623351446188084, abs=1e-15)
        assert binary_entropy(0.25) == pytest.approx(expected, abs=1e-14)

    def test_symmetry_sweep(self):
        rng = np.random.default_rng(7)
        p = rng.random(10_000)
        np.testing.assert_allclose(binary_entropy(p), binary_entropy(1.0 - p), atol=1e-12)

    def test_range(self):
        rng = np.random.default_rng(8)
        h = binary_entropy(rng.random(10_000))
        assert h.min() >= 0.0
        assert h.max() <= LN2 + 1e-15

    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            binary_entropy(1.2)


class TestCosineSimilarity:
    def test_orthogonal(self):
        assert cosine_similarity([1, 0, 0], [0, 1, 0]) == 0.0

    def test_parallel(self):
        assert cosine_similarity([2, 2], [1, 1]) == pytest.approx(1.0, abs=1e-15)

    def test_forty_five_degrees(self):
        assert cosine_similarity([1, 0, 0], [1, 1, 0]) == pytest.approx(
            1.0 / math.sqrt(2.0), abs=1e-15
        )

    def test_self_similarity_sweep(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            v = rng.standard_normal(rng.integers(1, 20))
            if np.linalg.norm(v) == 0.0:
                continue
            assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_zero_norm_is_an_error(self):
        with pytest.raises(DegenerateVectorError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            cosine_similarity([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_non_finite_entries(self):
        with pytest.raises(InvalidArgumentError):
            cosine_similarity([1.0, math.nan], [1.0, 2.0])


class TestJsBernoulli:
    def test_identical_distributions(self):
        assert js_bernoulli(0.3, 0.3) == 0.0

    def test_maximal_disagreement(self):
        assert js_bernoulli(1.0, 0.0) == pytest.approx(LN2, abs=1e-15)

    def test_frozen_value(self):
        expected = float(mp_js("0.2", "0.6"))
        assert expected == pytest.approx(0.08630462173553427, abs=1e-15)
        assert js_bernoulli(0.2, 0.6) == pytest.approx(expected, abs=1e-14)

    def test_sweep_bounds_and_symmetry(self):
        rng = np.random.default_rng(13)
        p1 = rng.random(10_000)
        p2 = rng.random(10_000)
        js = js_bernoulli(p1, p2)
        assert js.min() >= 0.0
        assert js.max() <= LN2 + 1e-12
        np.testing.assert_array_equal(js, js_bernoulli(p2, p1))

    def test_zero_exactly_when_equal(self):
        rng = np.random.default_rng(14)
        p = rng.random(10_000)
        assert np.all(js_bernoulli(p, p) == 0.0)

    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            js_bernoulli(0.5, 1.5)
