"""Attention blocks against independent brute-force oracles."""

import numpy as np
import pytest

from oracles import brute_aoa, brute_multi_head, brute_scaled_dot
from sgcap.attention import (
    AoAParams,
    MultiHeadParams,
    aoa_block,
    multi_head_attention,
    scaled_dot_attention,
)
from sgcap.autodiff import DimensionError, constant, grad_check, mul, parameter, sum_all


class TestScaledDot:
    def test_single_key_returns_value_row(self):
        rng = np.random.default_rng(0)
        q = constant(rng.normal(size=(3, 4)))
        k = constant(rng.normal(size=(1, 4)))
        v = constant(rng.normal(size=(1, 4)))
        out = scaled_dot_attention(q, k, v)
        np.testing.assert_array_equal(out.data, np.tile(v.data, (3, 1)))

    def test_identical_keys_give_uniform_weights(self):
        rng = np.random.default_rng(1)
        q = constant(rng.normal(size=(1, 4)))
        k = constant(np.tile(rng.normal(size=4), (5, 1)))
        v = constant(rng.normal(size=(5, 4)))
        out = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data[0], v.data.mean(axis=0), atol=1e-12)

    @pytest.mark.parametrize("case", range(20))
    def test_matches_brute_force(self, case):
        rng = np.random.default_rng(100 + case)
        nq, nk, d = rng.integers(1, 5), rng.integers(1, 6), int(rng.choice([2, 4, 6]))
        q = rng.normal(size=(nq, d)) * 2
        k = rng.normal(size=(nk, d)) * 2
        v = rng.normal(size=(nk, d))
        got = scaled_dot_attention(constant(q), constant(k), constant(v)).data
        np.testing.assert_allclose(got, brute_scaled_dot(q, k, v), atol=1e-9)

    def test_masked_key_has_exactly_zero_influence(self):
        rng = np.random.default_rng(2)
        q = constant(rng.normal(size=(2, 4)))
        k_data = rng.normal(size=(5, 4))
        v_data = rng.normal(size=(5, 4))
        mask = np.array([True, False, True, True, False])
        base = scaled_dot_attention(constant(q.data), constant(k_data), constant(v_data), mask).data
        # perturb masked rows arbitrarily; output must be bit-identical
        k2, v2 = k_data.copy(), v_data.copy()
        k2[1] += 37.0
        v2[1] -= 11.0
        k2[4] *= -3.0
        v2[4] += 100.0
        again = scaled_dot_attention(constant(q.data), constant(k2), constant(v2), mask).data
        np.testing.assert_array_equal(base, again)

    def test_all_masked_rejected(self):
        q = constant(np.zeros((1, 2)))
        kv = constant(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            scaled_dot_attention(q, kv, kv, np.zeros(3, dtype=bool))

    def test_mask_length_checked(self):
        q = constant(np.zeros((1, 2)))
        kv = constant(np.ones((3, 2)))
        with pytest.raises(DimensionError):
            scaled_dot_attention(q, kv, kv, np.ones(4, dtype=bool))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        q = parameter(rng.normal(size=(2, 4)))
        k = parameter(rng.normal(size=(3, 4)))
        v = parameter(rng.normal(size=(3, 4)))
        w = constant(rng.normal(size=(2, 4)))

        def f(q, k, v):
            return sum_all(mul(scaled_dot_attention(q, k, v), w))

        assert grad_check(f, [q, k, v]) <= 1e-5


class TestMultiHead:
    def test_one_head_equals_scaled_dot_of_projections(self):
        rng = np.random.default_rng(3)
        p = MultiHeadParams.init(rng, 6, 1)
        a = rng.normal(size=(4, 6))
        got = multi_head_attention(p, constant(a), constant(a), constant(a)).data
        q = a @ p.w_q.data.T
        k = a @ p.w_k.data.T
        v = a @ p.w_v.data.T
        expected = scaled_dot_attention(constant(q), constant(k), constant(v)).data
        np.testing.assert_allclose(got, expected, atol=1e-12)

    @pytest.mark.parametrize("case", range(20))
    def test_matches_brute_force(self, case):
        rng = np.random.default_rng(200 + case)
        heads = int(rng.choice([1, 2, 3]))
        d = heads * int(rng.choice([2, 3]))
        p = MultiHeadParams.init(rng, d, heads)
        q_in = rng.normal(size=(rng.integers(1, 4), d))
        kv_in = rng.normal(size=(rng.integers(1, 5), d))
        got = multi_head_attention(p, constant(q_in), constant(kv_in), constant(kv_in)).data
        expected = brute_multi_head(p.w_q.data, p.w_k.data, p.w_v.data, heads, q_in, kv_in, kv_in)
        np.testing.assert_allclose(got, expected, atol=1e-9)

    def test_head_count_must_divide(self):
        with pytest.raises(DimensionError):
            MultiHeadParams.init(np.random.default_rng(0), 6, 4)

    def test_output_shape(self):
        rng = np.random.default_rng(4)
        p = MultiHeadParams.init(rng, 8, 2)
        out = multi_head_attention(
            p, constant(rng.normal(size=(1, 8))), constant(rng.normal(size=(5, 8))),
            constant(rng.normal(size=(5, 8)))
        )
        assert out.shape == (1, 8)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        p = MultiHeadParams.init(rng, 4, 2)
        a = parameter(rng.normal(size=(3, 4)))
        w = constant(rng.normal(size=(3, 4)))
        leaves = [p.w_q, p.w_k, p.w_v, a]

        def f(wq, wk, wv, a):
            pp = MultiHeadParams(wq, wk, wv, 2)
            return sum_all(mul(multi_head_attention(pp, a, a, a), w))

        assert grad_check(f, leaves) <= 1e-5


class TestAoA:
    def test_zero_gate_zeroes_output(self):
        rng = np.random.default_rng(5)
        p = AoAParams.init(rng, 4)
        # force the gate to ~0 with a huge negative bias
        p.w_q_gate.data[:] = 0
        p.w_v_gate.data[:] = 0
        p.b_gate.data[:] = -800.0
        q = constant(rng.normal(size=(2, 4)))
        v = constant(rng.normal(size=(2, 4)))
        out = aoa_block(p, q, v)
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    @pytest.mark.parametrize("case", range(20))
    def test_matches_brute_force(self, case):
        rng = np.random.default_rng(300 + case)
        d = int(rng.choice([2, 4, 6]))
        n = int(rng.integers(1, 5))
        p = AoAParams.init(rng, d)
        p.b_info.data[:] = rng.normal(size=d)
        p.b_gate.data[:] = rng.normal(size=d)
        q = rng.normal(size=(n, d))
        v = rng.normal(size=(n, d))
        got = aoa_block(p, constant(q), constant(v)).data
        np.testing.assert_allclose(got, brute_aoa(p, q, v), atol=1e-9)

    def test_shape_mismatch(self):
        p = AoAParams.init(np.random.default_rng(0), 4)
        with pytest.raises(DimensionError):
            aoa_block(p, constant(np.zeros((2, 4))), constant(np.zeros((3, 4))))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        p = AoAParams.init(rng, 4)
        q = parameter(rng.normal(size=(2, 4)))
        v = parameter(rng.normal(size=(2, 4)))
        leaves = [t for _, t in p.named_params("aoa")] + [q, v]

        def f(*leaves):
            pp = AoAParams(*leaves[:6])
            return sum_all(aoa_block(pp, leaves[6], leaves[7]))

        assert grad_check(f, leaves) <= 1e-5
