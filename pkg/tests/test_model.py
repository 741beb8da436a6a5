"""Two-view model tests: forward values, loss values, gradient checks,
and the binary parameter layout."""

import math

import mpmath as mp
import numpy as np
import pytest

from mtl_coreg.errors import (
    DegenerateVectorError,
    EmptySelectionError,
    FormatError,
    ShapeError,
)
from mtl_coreg.model import (
    ClassifierBank,
    FeatureExtractor,
    LossBreakdown,
    PredictionBatch,
    TwoViewModel,
    loss_coreg,
    loss_multiview,
    loss_recognition,
)
from mtl_coreg.numerics import LN2


def tiny_model(seed=0, input_dim=5, hidden=(10,), d=8, c=4, activation="tanh"):
    return TwoViewModel.initialize(
        input_dim=input_dim, hidden_dims=hidden, feature_dim=d,
        task_count=c, seed=seed, activation=activation,
    )


def zero_bank_model(input_dim=3, d=3, c=2):
    """Model whose classifier banks are all-zero (probabilities 0.5)."""
    m = tiny_model(seed=1, input_dim=input_dim, hidden=(4,), d=d, c=c)
    m.bank_1.weights[...] = 0.0
    m.bank_1.biases[...] = 0.0
    m.bank_2.weights[...] = 0.0
    m.bank_2.biases[...] = 0.0
    return m


def mp_js(p1, p2):
    with mp.workdps(50):
        def h(p):
            p = mp.mpf(p)
            if p in (0, 1):
                return mp.mpf(0)
            return -(p * mp.log(p) + (1 - p) * mp.log(1 - p))

        return float(h((mp.mpf(p1) + mp.mpf(p2)) / 2) - (h(p1) + h(p2)) / 2)


class TestForward:
    def test_zero_banks_give_half_everywhere(self):
        m = zero_bank_model()
        rng = np.random.default_rng(0)
        pred = m.forward(rng.standard_normal((7, 3)))
        np.testing.assert_array_equal(pred.p1, 0.5)
        np.testing.assert_array_equal(pred.p2, 0.5)
        np.testing.assert_array_equal(pred.fused, 0.5)

    def test_identity_passthrough_reduces_to_sigmoid(self):
        # Linear activation hook with identity weights: the logit is the
        # first input coordinate, so the output is sigmoid(ln 3) = 0.75.
        ext = FeatureExtractor([np.eye(2)], [np.zeros(2)], activation="identity")
        bank = ClassifierBank(np.array([[1.0, 0.0]]), np.array([0.0]))
        m = TwoViewModel(ext, ext.copy(), bank, ClassifierBank(np.zeros((1, 2)), np.zeros(1)))
        pred = m.forward(np.array([[math.log(3.0), 7.0]]))
        assert pred.p1[0, 0] == pytest.approx(0.75, abs=1e-12)

    def test_forward_is_deterministic_bitwise(self):
        m = tiny_model(seed=3)
        x = np.random.default_rng(5).standard_normal((9, 5))
        a = m.forward(x)
        b = m.forward(x)
        assert np.array_equal(a.p1, b.p1)
        assert np.array_equal(a.p2, b.p2)
        assert np.array_equal(a.fused, b.fused)

    def test_fused_average_identity(self):
        m = tiny_model(seed=4)
        x = np.random.default_rng(6).standard_normal((11, 5))
        pred = m.forward(x)
        np.testing.assert_array_equal(pred.fused, (pred.p1 + pred.p2) / 2.0)

    def test_dimension_mismatch(self):
        m = tiny_model()
        with pytest.raises(ShapeError):
            m.forward(np.zeros((4, 9)))


class TestLossMultiview:
    def test_identical_banks(self):
        bank = ClassifierBank(np.random.default_rng(0).standard_normal((3, 4)),
                              np.random.default_rng(1).standard_normal(3))
        assert loss_multiview(bank, bank.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_pairs(self):
        b1 = ClassifierBank(np.array([[1.0, 0.0], [0.0, 2.0]]), np.zeros(2))
        b2 = ClassifierBank(np.array([[0.0, 3.0], [4.0, 0.0]]), np.zeros(2))
        assert loss_multiview(b1, b2) == 0.0

    def test_forty_five_degrees(self):
        b1 = ClassifierBank(np.array([[1.0, 0.0]]), np.array([0.0]))
        b2 = ClassifierBank(np.array([[1.0, 1.0]]), np.array([0.0]))
        assert loss_multiview(b1, b2) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(21)
        b1 = ClassifierBank(rng.standard_normal((5, 6)), rng.standard_normal(5))
        b2 = ClassifierBank(rng.standard_normal((5, 6)), rng.standard_normal(5))
        base = loss_multiview(b1, b2)
        for c in (1e-6, 0.5, 3.0, 1e6):
            scaled = ClassifierBank(b1.weights * c, b1.biases * c)
            assert loss_multiview(scaled, b2) == pytest.approx(base, abs=1e-10)

    def test_zero_augmented_vector_is_an_error(self):
        b1 = ClassifierBank(np.zeros((1, 2)), np.zeros(1))
        b2 = ClassifierBank(np.ones((1, 2)), np.ones(1))
        with pytest.raises(DegenerateVectorError):
            loss_multiview(b1, b2)

    def test_absolute_variant(self):
        b1 = ClassifierBank(np.array([[1.0, 0.0]]), np.array([0.0]))
        b2 = ClassifierBank(np.array([[-1.0, 0.0]]), np.array([0.0]))
        assert loss_multiview(b1, b2) == pytest.approx(-1.0, abs=1e-12)
        assert loss_multiview(b1, b2, absolute=True) == pytest.approx(1.0, abs=1e-12)


class TestLossCoreg:
    def test_agreeing_views(self):
        p = np.random.default_rng(2).random((6, 3))
        pred = PredictionBatch.from_views(p, p.copy())
        assert loss_coreg(pred) == 0.0

    def test_maximal_disagreement(self):
        pred = PredictionBatch.from_views(np.array([[1.0]]), np.array([[0.0]]))
        assert loss_coreg(pred) == pytest.approx(LN2, abs=1e-15)

    def test_frozen_two_task_value(self):
        pred = PredictionBatch.from_views(np.array([[0.2, 0.3]]), np.array([[0.6, 0.3]]))
        expected = (mp_js("0.2", "0.6") + 0.0) / 2.0
        assert expected == pytest.approx(0.043152310867767135, abs=1e-15)
        assert loss_coreg(pred) == pytest.approx(expected, abs=1e-14)

    def test_positive_when_views_differ(self):
        p1 = np.full((4, 2), 0.4)
        p2 = p1.copy()
        p2[2, 1] = 0.400002
        assert loss_coreg(PredictionBatch.from_views(p1, p2)) > 0.0


class TestLossRecognition:
    def test_perfect_prediction(self):
        labels = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert loss_recognition(labels, labels, np.ones_like(labels)) <= 1e-6

    def test_uninformative_prediction(self):
        labels = np.array([[1.0, 0.0], [0.0, 1.0]])
        probs = np.full_like(labels, 0.5)
        assert loss_recognition(probs, labels, np.ones_like(labels)) == pytest.approx(
            LN2, abs=1e-12
        )

    def test_frozen_value(self):
        # -ln(0.75) for a confident correct positive.
        value = loss_recognition(np.array([[0.75]]), np.array([[1.0]]), np.array([[1.0]]))
        assert value == pytest.approx(0.2876820724517809, abs=1e-14)

    def test_all_zero_mask_is_an_error(self):
        with pytest.raises(EmptySelectionError):
            loss_recognition(np.array([[0.5]]), np.array([[1.0]]), np.array([[0.0]]))

    def test_masked_entries_do_not_contribute(self):
        probs = np.array([[0.9, 0.00001], [0.8, 0.99999]])
        labels = np.array([[1.0, 1.0], [1.0, 0.0]])
        mask = np.array([[1.0, 0.0], [1.0, 0.0]])
        expected = -(math.log(0.9) + math.log(0.8)) / 2.0
        assert loss_recognition(probs, labels, mask) == pytest.approx(expected, abs=1e-12)


class TestTotalLoss:
    def test_zero_weights_reduce_to_recognition(self):
        m = tiny_model(seed=9)
        rng = np.random.default_rng(9)
        x = rng.standard_normal((12, 5))
        y = rng.integers(0, 2, (12, 4)).astype(float)
        out = m.total_loss(x, y, lambda_mv=0.0, lambda_cr=0.0)
        assert out.total == pytest.approx(out.l_rec1 + out.l_rec2, abs=1e-15)

    def test_weight_tied_views(self):
        m = tiny_model(seed=10)
        m.extractor_2 = m.extractor_1.copy()
        m.bank_2 = m.bank_1.copy()
        rng = np.random.default_rng(10)
        x = rng.standard_normal((8, 5))
        y = rng.integers(0, 2, (8, 4)).astype(float)
        out = m.total_loss(x, y)
        assert out.l_mv == pytest.approx(1.0, abs=1e-12)
        assert out.l_cr == 0.0

    def test_bookkeeping_identity(self):
        rng = np.random.default_rng(11)
        for seed in range(5):
            m = tiny_model(seed=seed)
            x = rng.standard_normal((10, 5))
            y = rng.integers(0, 2, (10, 4)).astype(float)
            lam_mv, lam_cr = rng.random(2) * 3.0
            out = m.total_loss(x, y, lambda_mv=lam_mv, lambda_cr=lam_cr)
            recombined = out.l_rec1 + out.l_rec2 + lam_mv * out.l_mv + lam_cr * out.l_cr
            assert out.total == pytest.approx(recombined, abs=1e-12)
            assert -1.0 <= out.l_mv <= 1.0
            assert 0.0 <= out.l_cr <= LN2 + 1e-12

    def test_loss_breakdown_invariant(self):
        out = LossBreakdown.build(0.3, 0.4, -0.2, 0.1, 2.0, 3.0)
        assert out.total == pytest.approx(0.3 + 0.4 + 2.0 * -0.2 + 3.0 * 0.1, abs=1e-15)


def finite_difference(model, x, y, mask, lam_mv, lam_cr, step=1e-5):
    theta = model.flat_params()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] += step
        model.set_flat_params(bumped)
        up = model.total_loss(x, y, masks=mask, lambda_mv=lam_mv, lambda_cr=lam_cr).total
        bumped[i] -= 2 * step
        model.set_flat_params(bumped)
        down = model.total_loss(x, y, masks=mask, lambda_mv=lam_mv, lambda_cr=lam_cr).total
        grad[i] = (up - down) / (2 * step)
    model.set_flat_params(theta)
    return grad


class TestGradients:
    def test_bias_gradient_symmetry_on_balanced_labels(self):
        m = zero_bank_model(input_dim=4, d=3, c=1)
        x = np.random.default_rng(3).standard_normal((6, 4))
        y = np.array([[1.0], [0.0], [1.0], [0.0], [1.0], [0.0]])
        g = m.gradients(x, y, lambda_mv=0.0, lambda_cr=0.0)
        np.testing.assert_allclose(g.bank_1[1], 0.0, atol=1e-15)
        np.testing.assert_allclose(g.bank_2[1], 0.0, atol=1e-15)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        m = tiny_model(seed=seed)
        x = rng.standard_normal((16, 5))
        y = rng.integers(0, 2, (16, 4)).astype(float)
        mask = (rng.random((16, 4)) < 0.8).astype(float)
        mask[0] = 1.0
        analytic = m.gradients(x, y, masks=mask).flat()
        numeric = finite_difference(m, x, y, mask, 1.0, 1.0)
        rel = np.abs(analytic - numeric) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8
        )
        assert rel.max() < 1e-4

    def test_cosine_gradient_orthogonal_to_its_argument(self):
        # Scale invariance: the directional derivative of the decorrelation
        # loss along each augmented weight vector itself is zero.
        m = tiny_model(seed=6)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((5, 5))
        y = rng.integers(0, 2, (5, 4)).astype(float)
        g_mv_only = m.gradients(x, y, lambda_mv=1.0, lambda_cr=0.0)
        g_none = m.gradients(x, y, lambda_mv=0.0, lambda_cr=0.0)
        d_aug_w = g_mv_only.bank_2[0] - g_none.bank_2[0]
        d_aug_b = g_mv_only.bank_2[1] - g_none.bank_2[1]
        aug2 = m.bank_2.augmented()
        directional = (d_aug_w * aug2[:, :-1]).sum(axis=1) + d_aug_b * aug2[:, -1]
        np.testing.assert_allclose(directional, 0.0, atol=1e-12)

    def test_all_gradients_finite(self):
        m = tiny_model(seed=8)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((16, 5))
        y = rng.integers(0, 2, (16, 4)).astype(float)
        assert np.all(np.isfinite(m.gradients(x, y).flat()))


class TestSerialization:
    def test_roundtrip_is_bitwise(self):
        m = tiny_model(seed=12)
        blob = m.to_bytes()
        restored = TwoViewModel.from_bytes(blob)
        assert np.array_equal(m.flat_params(), restored.flat_params())
        x = np.random.default_rng(12).standard_normal((6, 5))
        assert np.array_equal(m.forward(x).fused, restored.forward(x).fused)
        assert restored.to_bytes() == blob

    def test_identity_activation_survives_roundtrip(self):
        m = tiny_model(seed=13, activation="identity")
        restored = TwoViewModel.from_bytes(m.to_bytes())
        assert restored.extractor_1.activation == "identity"

    def test_bad_magic(self):
        blob = bytearray(tiny_model().to_bytes())
        blob[:4] = b"NOPE"
        with pytest.raises(FormatError):
            TwoViewModel.from_bytes(bytes(blob))

    def test_truncated_payload(self):
        blob = tiny_model().to_bytes()
        with pytest.raises(FormatError):
            TwoViewModel.from_bytes(blob[: len(blob) - 16])

    def test_flat_params_roundtrip(self):
        m = tiny_model(seed=14)
        vec = m.flat_params()
        m2 = tiny_model(seed=15)
        m2.set_flat_params(vec)
        assert np.array_equal(m2.flat_params(), vec)
