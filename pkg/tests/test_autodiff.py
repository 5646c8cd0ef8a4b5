"""Gradient-tape checks against central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import fd_gradient, relative_error

from taxseq import autodiff as ad
from taxseq.autodiff import Parameter, Tensor, backward, no_grad
from taxseq.errors import (AllIgnored, DetachedGraph, IndivisibleHeads,
                           InvalidProbability, ShapeMismatch)

TOL = 1e-4


def gradcheck(fn, inputs, eps=1e-3):
    """Max relative error between tape gradients and finite differences.

    ``fn`` maps a dict of Tensors to a scalar Tensor; ``inputs`` holds the
    float64 arrays to differentiate at.
    """
    tensors = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    backward(fn(tensors))
    worst = 0.0
    for key, base in inputs.items():
        def scalar(arr, key=key):
            frozen = {k: Tensor(v) for k, v in inputs.items()}
            frozen[key] = Tensor(arr)
            return fn(frozen).item()

        numeric = fd_gradient(scalar, base, eps=eps)
        assert tensors[key].grad is not None, key
        worst = max(worst, relative_error(tensors[key].grad, numeric))
    return worst


def arr(rng, *shape):
    return rng.standard_normal(shape)


class TestElementwiseGrads:
    def test_add_with_broadcast(self, rng):
        w = arr(rng, 2, 3)
        fn = lambda t: ad.tsum(ad.mul(ad.add(t["a"], t["b"]), Tensor(w)))
        assert gradcheck(fn, {"a": arr(rng, 2, 3), "b": arr(rng, 3)}) < TOL

    def test_mul(self, rng):
        fn = lambda t: ad.tsum(ad.mul(t["a"], t["b"]))
        assert gradcheck(fn, {"a": arr(rng, 4, 2), "b": arr(rng, 4, 2)}) < TOL

    def test_scale_add_const_mul_const(self, rng):
        c = arr(rng, 3)
        fn = lambda t: ad.tsum(ad.mul_const(ad.add_const(ad.scale(t["x"], -1.7), c), c + 2))
        assert gradcheck(fn, {"x": arr(rng, 2, 3)}) < TOL

    def test_exp_power_chain(self, rng):
        fn = lambda t: ad.tsum(ad.power(ad.exp(t["x"]), 1.5))
        assert gradcheck(fn, {"x": 0.5 * arr(rng, 3, 3)}) < TOL

    def test_gelu(self, rng):
        w = arr(rng, 5)
        fn = lambda t: ad.tsum(ad.mul(ad.gelu(t["x"]), Tensor(w)))
        assert gradcheck(fn, {"x": 2 * arr(rng, 5)}) < TOL

    def test_sum_and_mean_axes(self, rng):
        w = arr(rng, 1, 4)
        fn = lambda t: ad.tsum(ad.mul(ad.tsum(t["x"], axis=0, keepdims=True), Tensor(w)))
        assert gradcheck(fn, {"x": arr(rng, 3, 4)}) < TOL
        w2 = arr(rng, 3)
        fn2 = lambda t: ad.tsum(ad.mul(ad.mean(t["x"], axis=1), Tensor(w2)))
        assert gradcheck(fn2, {"x": arr(rng, 3, 4)}) < TOL

    def test_softmax_weighted(self, rng):
        w = arr(rng, 2, 5)
        fn = lambda t: ad.tsum(ad.mul(ad.softmax(t["x"], axis=-1), Tensor(w)))
        assert gradcheck(fn, {"x": arr(rng, 2, 5)}) < TOL

    def test_layer_norm_all_inputs(self, rng):
        w = arr(rng, 2, 6)
        fn = lambda t: ad.tsum(ad.mul(ad.layer_norm(t["x"], t["g"], t["b"]), Tensor(w)))
        got = gradcheck(fn, {"x": arr(rng, 2, 6),
                             "g": 1 + 0.1 * arr(rng, 6),
                             "b": 0.1 * arr(rng, 6)})
        assert got < TOL


class TestShapeOpGrads:
    def test_reshape_transpose(self, rng):
        w = arr(rng, 4, 3, 2)
        fn = lambda t: ad.tsum(ad.mul(
            ad.transpose(ad.reshape(t["x"], (2, 3, 4)), (2, 1, 0)), Tensor(w)))
        assert gradcheck(fn, {"x": arr(rng, 6, 4)}) < TOL

    def test_concat(self, rng):
        w = arr(rng, 5, 2)
        fn = lambda t: ad.tsum(ad.mul(ad.concat([t["a"], t["b"]], axis=0), Tensor(w)))
        assert gradcheck(fn, {"a": arr(rng, 2, 2), "b": arr(rng, 3, 2)}) < TOL

    def test_matmul_batched_broadcast(self, rng):
        fn = lambda t: ad.tsum(ad.matmul(t["a"], t["b"]))
        assert gradcheck(fn, {"a": arr(rng, 3, 2, 4), "b": arr(rng, 4, 5)}) < TOL

    def test_linear_with_bias(self, rng):
        w = arr(rng, 2, 3)
        fn = lambda t: ad.tsum(ad.mul(ad.linear(t["x"], t["w"], t["b"]), Tensor(w)))
        assert gradcheck(fn, {"x": arr(rng, 2, 4), "w": arr(rng, 4, 3),
                              "b": arr(rng, 3)}) < TOL

    def test_embed_rows(self, rng):
        ids = np.array([[0, 2], [2, 4]])
        w = arr(rng, 2, 2, 3)
        fn = lambda t: ad.tsum(ad.mul(ad.embed(t["tab"], ids), Tensor(w)))
        assert gradcheck(fn, {"tab": arr(rng, 5, 3)}) < TOL
        tab = Tensor(arr(rng, 5, 3), requires_grad=True)
        backward(ad.tsum(ad.embed(tab, ids)))
        assert np.allclose(tab.grad[1], 0) and np.allclose(tab.grad[3], 0)
        assert np.allclose(tab.grad[2], 2.0)  # looked up twice

    def test_split_merge_heads_round_trip(self, rng):
        x = Tensor(arr(rng, 2, 5, 8), requires_grad=True)
        y = ad.merge_heads(ad.split_heads(x, 4))
        assert np.array_equal(y.data, x.data)
        backward(ad.tsum(ad.mul(y, Tensor(arr(rng, 2, 5, 8)))))
        assert x.grad.shape == x.data.shape

    def test_indivisible_heads(self, rng):
        with pytest.raises(IndivisibleHeads):
            ad.split_heads(Tensor(arr(rng, 2, 5, 6)), 4)


class TestAttentionGrads:
    def test_scaled_dot_with_mask(self, rng):
        mask = np.zeros((1, 3, 3))
        mask[:, 0, 2] = ad.NEG_INF
        mask[:, 1, 0] = ad.NEG_INF
        w = arr(rng, 2, 3, 4)
        fn = lambda t: ad.tsum(ad.mul(
            ad.scaled_dot_attention(t["q"], t["k"], t["v"], mask=mask), Tensor(w)))
        got = gradcheck(fn, {"q": arr(rng, 2, 3, 4), "k": arr(rng, 2, 3, 4),
                             "v": arr(rng, 2, 3, 4)})
        assert got < TOL

    def test_masked_positions_get_no_weight(self, rng):
        mask = np.zeros((1, 4, 4))
        mask[:, :, 3] = ad.NEG_INF
        cap = []
        ad.scaled_dot_attention(Tensor(arr(rng, 1, 4, 4)), Tensor(arr(rng, 1, 4, 4)),
                                Tensor(arr(rng, 1, 4, 4)), mask=mask, capture=cap)
        assert cap[0]["probs"][..., 3].max() < 1e-9
        assert cap[0]["all_masked_rows"] == 0

    def test_fully_masked_row_zero_output(self, rng):
        mask = np.zeros((1, 2, 3))
        mask[:, 1, :] = ad.NEG_INF
        cap = []
        out = ad.scaled_dot_attention(Tensor(arr(rng, 1, 2, 4)), Tensor(arr(rng, 1, 3, 4)),
                                      Tensor(arr(rng, 1, 3, 4)), mask=mask, capture=cap)
        assert cap[0]["all_masked_rows"] == 1
        assert np.allclose(out.data[0, 1], 0.0)

    def test_multi_head_attention_full(self, rng):
        d, heads = 8, 2
        names = ["wq", "wk", "wv", "wo"]
        weights = {n: 0.3 * arr(rng, d, d) for n in names}
        weights |= {f"b{n[1]}": 0.1 * arr(rng, d) for n in names}
        mask = np.zeros((1, 1, 3, 3))
        mask[..., 0, 1:] = ad.NEG_INF
        readout = arr(rng, 2, 3, d)

        def fn(t):
            params = {n: t[n] for n in weights}
            y = ad.multi_head_attention(t["x"], t["x"], t["x"], mask, heads, params)
            return ad.tsum(ad.mul(y, Tensor(readout)))

        inputs = {"x": 0.5 * arr(rng, 2, 3, d)} | weights
        assert gradcheck(fn, inputs) < TOL

    def test_attention_shape_errors(self, rng):
        with pytest.raises(ShapeMismatch):
            ad.scaled_dot_attention(Tensor(arr(rng, 1, 2, 4)), Tensor(arr(rng, 1, 2, 5)),
                                    Tensor(arr(rng, 1, 2, 5)))
        with pytest.raises(ShapeMismatch):
            ad.scaled_dot_attention(Tensor(arr(rng, 1, 2, 4)), Tensor(arr(rng, 1, 3, 4)),
                                    Tensor(arr(rng, 1, 2, 4)))


class TestLossGrads:
    def test_smoothed_sum_matches_reference(self, rng):
        from oracles import smoothed_ce_reference
        logits = arr(rng, 2, 5, 7)
        targets = rng.integers(0, 7, size=(2, 5))
        targets[0, 3] = 99
        total, n = ad.smoothed_nll_sum(Tensor(logits), targets, smoothing=0.1,
                                       ignore_id=99)
        want_mean, want_n = smoothed_ce_reference(logits, targets, 0.1, 99)
        assert n == want_n == 9
        assert total.item() / n == pytest.approx(want_mean, abs=1e-12)

    def test_cross_entropy_gradcheck(self, rng):
        targets = np.array([[1, 3, 0], [2, 2, 5]])
        fn = lambda t: ad.cross_entropy_smoothed(t["x"], targets, smoothing=0.1)
        assert gradcheck(fn, {"x": arr(rng, 2, 3, 6)}) < TOL

    def test_ignored_positions_get_zero_grad(self, rng):
        logits = Tensor(arr(rng, 2, 3, 5), requires_grad=True)
        targets = np.array([[1, 9, 2], [9, 9, 0]])
        total, n = ad.smoothed_nll_sum(logits, targets, smoothing=0.1, ignore_id=9)
        assert n == 3
        backward(total)
        assert np.allclose(logits.grad[0, 1], 0)
        assert np.allclose(logits.grad[1, :2], 0)
        assert not np.allclose(logits.grad[0, 0], 0)

    def test_per_position_matches_sum(self, rng):
        logits = arr(rng, 3, 4, 6)
        targets = rng.integers(0, 6, size=(3, 4))
        vec, n = ad.smoothed_nll_per_position(Tensor(logits), targets, smoothing=0.1)
        total, n2 = ad.smoothed_nll_sum(Tensor(logits), targets, smoothing=0.1)
        assert n == n2 == 12 and vec.data.shape == (12,)
        assert float(vec.data.sum()) == pytest.approx(total.item(), rel=1e-12)

    def test_per_position_gradcheck(self, rng):
        targets = np.array([[1, 0], [2, 3]])
        w = np.abs(arr(rng, 4)) + 0.5
        fn = lambda t: ad.tsum(ad.mul(
            ad.smoothed_nll_per_position(t["x"], targets, smoothing=0.05)[0], Tensor(w)))
        assert gradcheck(fn, {"x": arr(rng, 2, 2, 5)}) < TOL

    def test_all_ignored_raises(self, rng):
        with pytest.raises(AllIgnored):
            ad.smoothed_nll_sum(Tensor(arr(rng, 1, 2, 4)), np.array([[7, 7]]),
                                ignore_id=7)

    def test_bad_smoothing(self, rng):
        with pytest.raises(InvalidProbability):
            ad.smoothed_nll_sum(Tensor(arr(rng, 1, 1, 4)), np.array([[0]]),
                                smoothing=1.0)


class TestEngine:
    def test_diamond_reuse(self):
        x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        y = ad.add(ad.mul(x, x), x)  # x^2 + x
        backward(ad.tsum(y))
        assert np.allclose(x.grad, 2 * x.data + 1)

    def test_backward_twice_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        loss = ad.tsum(ad.mul(x, x))
        backward(loss)
        first = x.grad.copy()
        backward(loss)
        assert np.allclose(x.grad, 2 * first)

    def test_interior_grads_not_retained(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        mid = ad.mul(x, x)
        backward(ad.tsum(mid))
        assert mid.grad is None and x.grad is not None

    def test_separate_graphs_accumulate(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        backward(ad.tsum(ad.scale(x, 3.0)))
        backward(ad.tsum(ad.scale(x, 4.0)))
        assert np.allclose(x.grad, 7.0)

    def test_no_grad_detaches(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad
        with pytest.raises(DetachedGraph):
            backward(y)

    def test_non_scalar_backward_rejected(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with pytest.raises(ShapeMismatch):
            backward(ad.mul(x, x))

    def test_constant_leaf_untouched(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        c = Tensor(np.array([5.0]))
        backward(ad.tsum(ad.mul(x, c)))
        assert c.grad is None and np.allclose(x.grad, 5.0)

    def test_zero_grads(self):
        p = Parameter(np.ones(3), name="p")
        backward(ad.tsum(ad.mul(p, p)))
        ad.zero_grads([p])
        assert p.grad is None

    def test_parameter_metadata(self):
        p = Parameter(np.zeros((2, 2)), name="blk.w")
        assert p.name == "blk.w" and p.trainable and p.requires_grad

    def test_operator_sugar(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        y = ad.tsum((x + 1.0) * 2.0 - x)
        backward(y)
        assert np.allclose(x.grad, 1.0)
        assert y.item() == pytest.approx((2 * (1 + 1) - 1) + (2 * (-2 + 1) + 2))


class TestDropout:
    def test_eval_mode_is_identity(self, rng):
        x = Tensor(arr(rng, 4, 4))
        assert ad.dropout(x, 0.5, train_mode=False) is x
        assert ad.dropout(x, 0.0, train_mode=True) is x

    def test_train_mode_mask_and_scale(self, rng):
        x = Tensor(np.ones((200, 200)), requires_grad=True)
        y = ad.dropout(x, 0.25, train_mode=True, rng=np.random.default_rng(3))
        vals = np.unique(np.round(y.data, 6))
        assert set(vals.tolist()) <= {0.0, round(1 / 0.75, 6)}
        drop_rate = float((y.data == 0).mean())
        assert abs(drop_rate - 0.25) < 0.02
        backward(ad.tsum(y))
        assert np.array_equal(x.grad != 0, y.data != 0)

    def test_needs_rng_in_train_mode(self, rng):
        with pytest.raises(ValueError):
            ad.dropout(Tensor(arr(rng, 2)), 0.5, train_mode=True)

    def test_invalid_probability(self, rng):
        with pytest.raises(InvalidProbability):
            ad.dropout(Tensor(arr(rng, 2)), 1.0, train_mode=True,
                       rng=np.random.default_rng(0))


@given(hnp.arrays(np.float64, (3, 7),
                  elements=st.floats(-30, 30, allow_nan=False)))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_are_distributions(x):
    out = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0) and np.all(out <= 1)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-9)


@given(hnp.arrays(np.float64, (2, 9),
                  elements=st.floats(-5, 5, allow_nan=False)).filter(
                      lambda a: np.std(a, axis=-1).min() > 0.1))
@settings(max_examples=60, deadline=None)
def test_layer_norm_standardizes(x):
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(9)), Tensor(np.zeros(9))).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-2)
