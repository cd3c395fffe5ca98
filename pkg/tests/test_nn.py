"""Blocks: linear, embedding, LSTM step, initialization statistics."""

import numpy as np
import pytest

from sgcap.autodiff import DimensionError, Tape, Tensor, constant, grad_check, mul, parameter, sum_all
from sgcap.nn import EmbeddingTable, LinearLayer, LstmParams, LstmState, lstm_step, xavier_limit


class TestLinear:
    def test_zero_input_zero_bias_gives_zero(self):
        rng = np.random.default_rng(0)
        layer = LinearLayer.init(rng, 4, 3)
        y = layer.apply_vec(constant(np.zeros(4)))
        np.testing.assert_array_equal(y.data, np.zeros(3))

    def test_matches_plain_numpy(self):
        rng = np.random.default_rng(1)
        layer = LinearLayer.init(rng, 5, 2)
        layer.bias.data[:] = rng.normal(size=2)
        x = rng.normal(size=5)
        y = layer.apply_vec(constant(x))
        np.testing.assert_allclose(y.data, layer.weight.data @ x + layer.bias.data, atol=1e-12)

    def test_rows_variant_matches_vec_variant(self):
        rng = np.random.default_rng(2)
        layer = LinearLayer.init(rng, 3, 4)
        layer.bias.data[:] = rng.normal(size=4)
        xs = rng.normal(size=(6, 3))
        rows = layer.apply_rows(constant(xs)).data
        for i in range(6):
            np.testing.assert_allclose(rows[i], layer.apply_vec(constant(xs[i])).data, atol=1e-12)

    def test_shape_error(self):
        layer = LinearLayer.init(np.random.default_rng(0), 3, 2)
        with pytest.raises(DimensionError):
            layer.apply_vec(constant(np.zeros(4)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        layer = LinearLayer.init(rng, 4, 3)
        x = parameter(rng.normal(size=4))

        def f(w, b, x):
            lay = LinearLayer(w, b)
            y = lay.apply_vec(x)
            return sum_all(mul(y, y))

        assert grad_check(f, [layer.weight, layer.bias, x]) <= 1e-5


class TestEmbedding:
    def test_lookup_returns_row(self):
        table = EmbeddingTable.init(np.random.default_rng(0), 7, 4)
        np.testing.assert_array_equal(table.lookup(3).data, table.weight.data[3])

    def test_out_of_range(self):
        table = EmbeddingTable.init(np.random.default_rng(0), 7, 4)
        with pytest.raises(IndexError):
            table.lookup(7)
        with pytest.raises(IndexError):
            table.lookup(-1)

    def test_gradient_accumulates_on_repeated_token(self):
        from sgcap.autodiff import add

        table = EmbeddingTable.init(np.random.default_rng(0), 5, 3)
        with Tape() as tape:
            total = add(sum_all(table.lookup(2)), sum_all(table.lookup(2)))
        tape.backward(total)
        expected = np.zeros((5, 3))
        expected[2] = 2.0
        np.testing.assert_array_equal(table.weight.grad, expected)


class TestInitStatistics:
    def test_xavier_uniform_std(self):
        # uniform(-s, s) has std s/sqrt(3); check within 10% on 10k samples
        rng = np.random.default_rng(42)
        fan_in, fan_out = 100, 100
        from sgcap.nn import init_weight

        w = init_weight(rng, fan_out, fan_in)
        s = xavier_limit(fan_in, fan_out)
        assert w.data.size == 10000
        assert abs(w.data.std() - s / np.sqrt(3)) < 0.1 * (s / np.sqrt(3))
        assert np.abs(w.data).max() <= s

    def test_lstm_bias_init(self):
        p = LstmParams.init(np.random.default_rng(0), 4, 3)
        np.testing.assert_array_equal(p.b_f.data, np.ones(3))
        np.testing.assert_array_equal(p.b_i.data, np.zeros(3))
        np.testing.assert_array_equal(p.b_o.data, np.zeros(3))
        np.testing.assert_array_equal(p.b_c.data, np.zeros(3))


class TestLstmStep:
    def _zero_params(self, d_in, d_h):
        z = lambda shape: parameter(np.zeros(shape))
        return LstmParams(
            z((d_h, d_in + d_h)), z((d_h, d_in + d_h)), z((d_h, d_in + d_h)), z((d_h, d_in + d_h)),
            z(d_h), z(d_h), z(d_h), z(d_h),
        )

    def test_all_zero_gives_zero_hidden(self):
        p = self._zero_params(3, 2)
        s = lstm_step(p, p.zero_state(), constant(np.zeros(3)))
        np.testing.assert_array_equal(s.h.data, np.zeros(2))
        np.testing.assert_array_equal(s.m.data, np.zeros(2))

    def test_zero_weights_halve_memory(self):
        # zero weights/biases: every gate is 0.5, c~ is 0, so
        # m' = 0.5 m0 and h' = 0.5 tanh(0.5 m0)
        p = self._zero_params(3, 4)
        m0 = np.array([0.4, -1.0, 2.0, 0.0])
        s0 = LstmState(Tensor(np.zeros(4)), Tensor(m0))
        s1 = lstm_step(p, s0, constant(np.ones(3)))
        np.testing.assert_allclose(s1.m.data, 0.5 * m0, atol=1e-15)
        np.testing.assert_allclose(s1.h.data, 0.5 * np.tanh(0.5 * m0), atol=1e-15)

    def test_state_shapes_preserved(self):
        rng = np.random.default_rng(5)
        p = LstmParams.init(rng, 6, 4)
        s = lstm_step(p, p.zero_state(), constant(rng.normal(size=6)))
        assert s.h.shape == (4,)
        assert s.m.shape == (4,)

    def test_wrong_input_width(self):
        p = LstmParams.init(np.random.default_rng(0), 6, 4)
        with pytest.raises(DimensionError):
            lstm_step(p, p.zero_state(), constant(np.zeros(5)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_grad_check_through_two_steps(self, seed):
        rng = np.random.default_rng(seed)
        p = LstmParams.init(rng, 3, 2)
        x1 = parameter(rng.normal(size=3))
        x2 = parameter(rng.normal(size=3))
        leaves = [t for _, t in p.named_params("lstm")] + [x1, x2]

        def f(*leaves):
            (w_i, w_f, w_o, w_c, b_i, b_f, b_o, b_c, x1, x2) = leaves
            params = LstmParams(w_i, w_f, w_o, w_c, b_i, b_f, b_o, b_c)
            s = lstm_step(params, params.zero_state(), x1)
            s = lstm_step(params, s, x2)
            return sum_all(mul(s.h, s.h))

        assert grad_check(f, leaves) <= 1e-5
