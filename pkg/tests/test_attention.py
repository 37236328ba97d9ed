import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cogattn.attention import (
    AttnActivation,
    HeadParams,
    attention_backward,
    attention_forward,
    attn_output,
    cog_backward,
    cog_rows_fast,
    cog_rows_naive,
    multihead_block,
    qk_scores,
    softmax_backward,
    softmax_rows,
)
from cogattn.numerics import MASKED, DimensionError, apply_causal_mask, tensor


def brute_cog(row):
    """Scalar loop over the defining formula; masked entries are None."""
    live = [p for p in row if p is not None]
    m = max(abs(p) for p in live)
    out = []
    for p in row:
        if p is None:
            out.append(0.0)
        else:
            s = (p > 0) - (p < 0)
            out.append(s * math.exp(s * p - m))
    denom = sum(abs(e) for e in out)
    return [0.0] * len(row) if denom == 0 else [e / denom for e in out]


class TestScores:
    def test_identity(self):
        np.testing.assert_array_equal(qk_scores(np.eye(2), np.eye(2), 1.0), np.eye(2))

    def test_scale(self):
        q = tensor([[2.0, 0.0], [0.0, 2.0]])
        k = tensor([[1.0, 3.0], [2.0, 4.0]])  # q k^T = [[2,4],[6,8]]
        np.testing.assert_allclose(qk_scores(q, k, 0.5), [[1, 2], [3, 4]])

    def test_orthogonal(self):
        assert qk_scores(tensor([[1.0, 0.0]]), tensor([[0.0, 1.0]]), 1.0)[0, 0] == 0

    def test_default_scale(self):
        q = np.ones((1, 4))
        assert qk_scores(q, q)[0, 0] == pytest.approx(4 / 2)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            qk_scores(np.ones((2, 3)), np.ones((2, 4)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(tensor([[0.0, 0.0]])).a, [[0.5, 0.5]])

    def test_ln3(self):
        np.testing.assert_allclose(softmax_rows(tensor([[0.0, math.log(3)]])).a, [[0.25, 0.75]], atol=1e-15)

    def test_no_overflow(self):
        np.testing.assert_allclose(softmax_rows(tensor([[1000.0, 1000.0]])).a, [[0.5, 0.5]])

    def test_masked_entries_zero(self, rng):
        a = softmax_rows(apply_causal_mask(rng.standard_normal((6, 6)))).a
        assert np.all(a[np.triu_indices(6, 1)] == 0)
        np.testing.assert_allclose(a.sum(-1), 1, atol=1e-12)


@pytest.mark.parametrize("kernel", [cog_rows_naive, cog_rows_fast], ids=["naive", "fast"])
class TestCogRows:
    def test_opposite_pair(self, kernel):
        np.testing.assert_allclose(kernel(tensor([[1.0, -1.0]])).a, [[0.5, -0.5]])

    def test_single(self, kernel):
        assert kernel(tensor([[2.0]])).a[0, 0] == 1.0
        assert kernel(tensor([[-2.0]])).a[0, 0] == -1.0

    def test_all_negative(self, kernel):
        # -softmax([3, 1]): e^3 / (e^3 + e) = 1 / (1 + e^-2)
        big = 1 / (1 + math.exp(-2))
        np.testing.assert_allclose(kernel(tensor([[-3.0, -1.0]])).a, [[-big, -(1 - big)]], atol=1e-12)
        np.testing.assert_allclose(kernel(tensor([[-3.0, -1.0]])).a, [[-0.8808, -0.1192]], atol=1e-4)

    def test_degenerate_row(self, kernel):
        w = kernel(tensor([[0.0, 0.0]]))
        np.testing.assert_array_equal(w.a, [[0.0, 0.0]])
        assert w.degenerate_count == 1

    def test_zero_entry_excluded(self, kernel):
        np.testing.assert_array_equal(kernel(tensor([[1.0, 0.0]])).a, [[1.0, 0.0]])

    def test_matches_brute_force(self, kernel, rng):
        for _ in range(20):
            n = int(rng.integers(1, 9))
            p = apply_causal_mask(rng.normal(0, 3, (n, n)))
            expect = [brute_cog([None if v == MASKED else float(v) for v in row]) for row in p]
            np.testing.assert_allclose(kernel(p).a, expect, atol=1e-13)

    def test_huge_scores_finite(self, kernel):
        p = tensor([[1e4, -1e4, 5e3]], "single")
        assert np.all(np.isfinite(kernel(p).a))


finite_scores = st.floats(-30, 30, allow_nan=False).map(lambda v: 0.0 if abs(v) < 1 else v)


class TestCogProperties:
    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=finite_scores))
    def test_fast_equals_naive(self, p):
        np.testing.assert_allclose(cog_rows_fast(p).a, cog_rows_naive(p).a, rtol=0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (5, 5), elements=st.floats(-30, 30, allow_nan=False)))
    def test_invariants(self, p):
        p = apply_causal_mask(p)
        w = cog_rows_fast(p)
        live = ~w.degenerate
        np.testing.assert_allclose(np.abs(w.a[live]).sum(-1), 1, atol=1e-12)
        assert np.all(np.abs(w.a) <= 1)
        assert np.all(w.a[np.triu_indices(5, 1)] == 0)
        unmasked = np.tril(np.ones((5, 5), bool))
        np.testing.assert_array_equal(np.sign(w.a[unmasked]), np.sign(p[unmasked]))

    def test_reduces_to_softmax(self, rng):
        p = np.abs(rng.standard_normal((10, 7))) + 0.01
        np.testing.assert_allclose(cog_rows_fast(p).a, softmax_rows(p).a, atol=1e-15)
        np.testing.assert_allclose(cog_rows_naive(-p).a, -softmax_rows(p).a, atol=1e-15)

    def test_shift_invariance(self, rng):
        p = rng.uniform(-10, 10, (50, 20))
        np.testing.assert_allclose(cog_rows_naive(p, shift=False).a, cog_rows_naive(p).a, atol=1e-12)


def finite_difference(fn, p, h=1e-6):
    jac = np.zeros((p.size, p.size))
    for l in range(p.size):
        up, dn = p.copy(), p.copy()
        up[l] += h
        dn[l] -= h
        jac[:, l] = (fn(up) - fn(dn)) / (2 * h)
    return jac


class TestBackward:
    def test_cog_jacobian_closed_form(self):
        p = tensor([[1.0, -1.0]])
        a = cog_rows_fast(p).a
        jac = np.stack([cog_backward(p, a, e[None])[0] for e in np.eye(2)])
        np.testing.assert_allclose(jac, [[0.25, 0.25], [0.25, 0.25]])
        fd = finite_difference(lambda x: cog_rows_naive(x[None]).a[0], p[0])
        np.testing.assert_allclose(fd, [[0.25, 0.25], [0.25, 0.25]], atol=1e-9)

    def test_cog_positive_row_is_softmax_jacobian(self, rng):
        p = rng.uniform(0.1, 2, (1, 5))
        a = cog_rows_fast(p).a
        g = rng.standard_normal((1, 5))
        np.testing.assert_allclose(cog_backward(p, a, g), softmax_backward(a, g), atol=1e-15)

    def test_zero_grad(self, rng):
        p = rng.standard_normal((1, 4))
        a = cog_rows_fast(p).a
        assert np.all(cog_backward(p, a, np.zeros((1, 4))) == 0)
        assert np.all(softmax_backward(softmax_rows(p).a, np.zeros((1, 4))) == 0)

    def test_cog_against_finite_differences(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 10))
            p = rng.uniform(-4, 4, n)
            p = np.where(np.abs(p) < 1e-3, 0.5, p)
            a = cog_rows_fast(p[None]).a
            fd = finite_difference(lambda x: cog_rows_naive(x[None]).a[0], p)
            g = rng.standard_normal((1, n))
            np.testing.assert_allclose(cog_backward(p[None], a, g)[0], g[0] @ fd, rtol=1e-6, atol=1e-9)

    def test_masked_and_zero_get_no_gradient(self):
        p = tensor([[1.0, 0.0, MASKED]])
        a = cog_rows_fast(p).a
        out = cog_backward(p, a, tensor([[1.0, 1.0, 1.0]]))
        assert out[0, 1] == 0 and out[0, 2] == 0

    def test_softmax_jacobians(self):
        assert softmax_backward(tensor([[1.0]]), tensor([[3.0]]))[0, 0] == 0
        a = tensor([[0.5, 0.5]])
        jac = np.stack([softmax_backward(a, e[None])[0] for e in np.eye(2)])
        np.testing.assert_allclose(jac, [[0.25, -0.25], [-0.25, 0.25]])


class TestOutput:
    def test_signed_row(self):
        np.testing.assert_allclose(attn_output(tensor([[0.5, -0.5]]), np.eye(2)), [[0.5, -0.5]])

    def test_zero_row(self):
        assert np.all(attn_output(np.zeros((1, 3)), np.ones((3, 2))) == 0)

    def test_copy(self, rng):
        v = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(attn_output(np.eye(4)[2:3], v), v[2:3])


def random_heads(rng, d=8, h=2, scale=0.5):
    mats = [rng.normal(0, scale, (d, d)) for _ in range(4)]
    return HeadParams(*mats, n_heads=h)


class TestMultihead:
    @pytest.mark.parametrize("act", list(AttnActivation))
    def test_causality(self, act, rng):
        params = random_heads(rng)
        x = rng.standard_normal((6, 8))
        full = multihead_block(x, params, act)
        np.testing.assert_allclose(multihead_block(x[:1], params, act), full[:1], atol=1e-12)
        np.testing.assert_allclose(multihead_block(x[:4], params, act), full[:4], atol=1e-12)

    def test_head_permutation(self, rng):
        params = random_heads(rng, d=8, h=2)
        x = rng.standard_normal((5, 8))
        cols = np.r_[4:8, 0:4]
        swapped = HeadParams(params.w_q[:, cols], params.w_k[:, cols], params.w_v[:, cols], params.w_o[cols, :], 2)
        for act in AttnActivation:
            np.testing.assert_allclose(multihead_block(x, swapped, act), multihead_block(x, params, act), atol=1e-12)

    @pytest.mark.parametrize("act", list(AttnActivation))
    def test_captured_weights_invariants(self, act, rng):
        for _ in range(10):
            x = rng.normal(0, 2, (7, 8))
            _, w = multihead_block(x, random_heads(rng, scale=1.0), act, capture=True)
            assert w.a.shape == (2, 7, 7)
            assert np.all(w.a[:, np.triu(np.ones((7, 7), bool), 1)] == 0)
            if act is AttnActivation.SOFTMAX:
                assert np.all(w.a >= 0)
                np.testing.assert_allclose(w.a.sum(-1), 1, atol=1e-12)
            else:
                np.testing.assert_allclose(np.abs(w.a).sum(-1), 1, atol=1e-12)
                assert np.all(np.abs(w.a.sum(-1)) <= 1 + 1e-12)

    def test_bad_config(self, rng):
        params = HeadParams(*[np.ones((8, 8))] * 4, n_heads=3)
        with pytest.raises(DimensionError):
            multihead_block(np.ones((2, 8)), params, "softmax")

    @pytest.mark.parametrize("act", list(AttnActivation))
    def test_block_backward(self, act, rng):
        params = random_heads(rng)
        x = rng.standard_normal((2, 5, 8))
        g = rng.standard_normal((2, 5, 8))

        def objective(xx, pp):
            return float((attention_forward(xx, pp, act)[0] * g).sum())

        _, _, cache = attention_forward(x, params, act)
        dx, grads = attention_backward(g, cache)
        h = 1e-6
        for idx in [(0, 0, 0), (1, 3, 5), (0, 4, 7)]:
            up, dn = x.copy(), x.copy()
            up[idx] += h
            dn[idx] -= h
            assert dx[idx] == pytest.approx((objective(up, params) - objective(dn, params)) / (2 * h), rel=1e-6, abs=1e-8)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(params, name)
            for idx in [(0, 0), (3, 6), (7, 2)]:
                old = w[idx]
                w[idx] = old + h
                lp = objective(x, params)
                w[idx] = old - h
                lm = objective(x, params)
                w[idx] = old
                assert grads[name][idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-6, abs=1e-8)
