import itertools

import numpy as np
import pytest

from qdit.errors import DimensionError, ValidationError
from qdit.gptq import HessianAccumulator, accumulate, gptq_quantize_layer, rtn_quantize_layer, weighted_error
from qdit.quantizer import QuantParams, dequantize, group_quantize_weights


def calib_hessian(rng, d, rows=256):
    x = rng.standard_normal((rows, d))
    return accumulate(HessianAccumulator.zeros(d), x)


class TestAccumulate:
    def test_zero_rows(self):
        acc = HessianAccumulator.zeros(3)
        accumulate(acc, np.zeros((5, 3)))
        np.testing.assert_array_equal(acc.h, np.zeros((3, 3)))
        assert acc.sample_count == 5

    def test_identity_rows(self):
        acc = accumulate(HessianAccumulator.zeros(4), np.eye(4))
        np.testing.assert_array_equal(acc.h, np.eye(4))

    def test_additive(self, rng):
        a, b = rng.standard_normal((7, 5)), rng.standard_normal((9, 5))
        split = accumulate(accumulate(HessianAccumulator.zeros(5), a), b)
        joined = accumulate(HessianAccumulator.zeros(5), np.concatenate([a, b]))
        np.testing.assert_allclose(split.h, joined.h, atol=1e-12)
        assert split.sample_count == joined.sample_count == 16

    def test_batched_input(self, rng):
        x = rng.standard_normal((2, 3, 4))
        a = accumulate(HessianAccumulator.zeros(4), x)
        np.testing.assert_array_equal(a.h, accumulate(HessianAccumulator.zeros(4), x.reshape(6, 4)).h)

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            accumulate(HessianAccumulator.zeros(3), np.ones((2, 4)))


class TestGptq:
    @pytest.mark.parametrize("g", [1, 4, 5, 16])
    def test_identity_hessian_is_rtn(self, rng, g):
        w = rng.standard_normal((16, 6)).astype(np.float32)
        a = gptq_quantize_layer(w, np.eye(16), g, 4)
        b = group_quantize_weights(w, g, 4)
        np.testing.assert_array_equal(a.codes, b.codes)
        np.testing.assert_array_equal(a.params.scale, b.params.scale)
        np.testing.assert_array_equal(a.params.zero_point, b.params.zero_point)
        np.testing.assert_array_equal(rtn_quantize_layer(w, g, 4).codes, b.codes)

    def test_beats_rtn_on_calibration_hessian(self, rng):
        wins = 0
        for _ in range(10):
            w = rng.standard_normal((32, 32))
            h = calib_hessian(rng, 32)
            wins += weighted_error(w, gptq_quantize_layer(w, h, 32, 4), h) <= weighted_error(w, rtn_quantize_layer(w, 32, 4), h)
        assert wins >= 9

    def test_exhaustive_four_element_oracle(self, rng):
        worst = 0.0
        for _ in range(30):
            w = rng.standard_normal((4, 1))
            h = calib_hessian(rng, 4).h
            q = gptq_quantize_layer(w, h, 4, 2)
            p = QuantParams(q.params.scale, q.params.zero_point, 2)
            best = min(
                float(np.sum((d := dequantize(np.array(c).reshape(4, 1), p) - w) * (h @ d)))
                for c in itertools.product(range(4), repeat=4)
            )
            ratio = weighted_error(w, q, h) / best
            assert ratio >= 1 - 1e-9
            worst = max(worst, ratio)
        assert worst <= 2.0

    def test_causal_in_rows(self, rng):
        # codes of rows in earlier groups do not depend on later rows
        w = rng.standard_normal((12, 5))
        h = calib_hessian(rng, 12)
        later = w.copy()
        later[8:] = rng.standard_normal((4, 5)) * 10
        a, b = gptq_quantize_layer(w, h, 4, 3), gptq_quantize_layer(later, h, 4, 3)
        np.testing.assert_array_equal(a.codes[:8], b.codes[:8])
        np.testing.assert_array_equal(a.params.scale[:2], b.params.scale[:2])

    def test_deterministic(self, rng):
        w = rng.standard_normal((20, 8))
        h = calib_hessian(rng, 20)
        a, b = gptq_quantize_layer(w, h, 8, 4), gptq_quantize_layer(w, h, 8, 4)
        np.testing.assert_array_equal(a.codes, b.codes)

    def test_singular_and_dead_hessian(self, rng):
        w = rng.standard_normal((6, 3))
        x = rng.standard_normal((2, 6))
        x[:, 2] = 0  # dead input channel
        q = gptq_quantize_layer(w, accumulate(HessianAccumulator.zeros(6), x), 3, 4)
        assert np.all(np.isfinite(q.dequantize()))
        z = gptq_quantize_layer(w, np.zeros((6, 6)), 3, 4)  # all dead: plain rounding
        np.testing.assert_array_equal(z.codes, group_quantize_weights(w, 3, 4).codes)

    def test_act_order(self, rng):
        w = rng.standard_normal((8, 4))
        np.testing.assert_array_equal(gptq_quantize_layer(w, np.eye(8), 8, 4, act_order=True).codes, rtn_quantize_layer(w, 8, 4).codes)
        h = calib_hessian(rng, 8)
        q = gptq_quantize_layer(w, h, 8, 4, act_order=True)
        assert weighted_error(w, q, h) <= weighted_error(w, rtn_quantize_layer(w, 8, 4), h)
        with pytest.raises(ValidationError):
            gptq_quantize_layer(w, h, 4, 4, act_order=True)

    def test_shape_errors(self, rng):
        with pytest.raises(DimensionError):
            gptq_quantize_layer(np.ones((4, 2)), np.eye(3), 2, 4)
        with pytest.raises(ValidationError):
            gptq_quantize_layer(np.ones(4), np.eye(4), 2, 4)


def test_weighted_error_identity_is_squared_error(rng):
    w = rng.standard_normal((6, 3))
    q = rtn_quantize_layer(w, 3, 3)
    assert weighted_error(w, q, np.eye(6)) == pytest.approx(((q.dequantize() - w) ** 2).sum(), rel=1e-12)
