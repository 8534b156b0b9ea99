import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ltlm import autodiff as ad
from ltlm.errors import DisconnectedLoss, NonFiniteValue, ShapeMismatch
from ltlm.model import _block_params, attention

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def grads_of(f, params):
    with ad.Tape() as tape:
        loss = f()
    return ad.backward(tape, loss)


def attention_setup(seed=0, d=16, heads=2, arcs=8):
    rng = np.random.default_rng(seed)
    raw = _block_params(rng, d, 2 * d, "b")
    for k in ("bq", "bk", "bv", "bo"):
        raw[f"b.{k}"] = rng.normal(0, 0.1, d)
    p = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    x = ad.Tensor(rng.normal(size=(1, arcs, d)), requires_grad=True)
    mask = np.ones((1, 1, 1, arcs), dtype=bool)
    mask[..., arcs - 2:] = False
    w = rng.normal(size=(1, arcs, d))

    def f():
        return ad.reduce_sum(ad.mul(attention(x, p, "b", mask, heads), w))

    return f, p, x


class TestOps:
    def test_uniform_softmax(self):
        out = ad.softmax(ad.Tensor(np.zeros(3)), np.ones(3, dtype=bool)).data
        np.testing.assert_allclose(out, [1 / 3] * 3)

    def test_masked_softmax_gives_zero_weight(self):
        out = ad.softmax(ad.Tensor(np.array([5.0, 1.0, 2.0])), np.array([False, True, True])).data
        assert out[0] == 0.0 and out.sum() == pytest.approx(1.0)

    def test_bce_at_zero_logit(self):
        assert ad.bce_with_logits(ad.Tensor(np.zeros(1)), np.ones(1)).item() == pytest.approx(math.log(2))

    def test_layer_norm_of_constant(self):
        out = ad.layer_norm(ad.Tensor(np.full((2, 5), 3.0)), ad.Tensor(np.ones(5)), ad.Tensor(np.zeros(5))).data
        np.testing.assert_array_equal(out, 0.0)

    def test_matmul_shape_check(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_debug_mode_catches_nonfinite(self):
        ad.set_debug(True)
        try:
            with pytest.raises(NonFiniteValue), np.errstate(invalid="ignore"):
                ad.mul(ad.Tensor(np.array([np.inf])), ad.Tensor(np.array([0.0])))
        finally:
            ad.set_debug(False)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_property_softmax_rows_sum_to_one(self, x):
        out = ad.softmax(ad.Tensor(x)).data
        np.testing.assert_allclose(out.sum(-1), 1.0)
        assert (out >= 0).all()


class TestBackward:
    def test_sum_gradient(self):
        x = ad.Tensor(np.arange(4.0), requires_grad=True)
        g = grads_of(lambda: ad.reduce_sum(x), [x])
        np.testing.assert_array_equal(g[x], np.ones(4))

    def test_sigmoid_dot(self):
        w = ad.Tensor(np.array([[0.3], [-0.7]]), requires_grad=True)
        xv = np.array([[1.5, 2.0]])
        g = grads_of(lambda: ad.reduce_sum(ad.sigmoid(ad.Tensor(xv) @ w)), [w])
        s = 1 / (1 + math.exp(-(xv @ w.data).item()))
        np.testing.assert_allclose(g[w], s * (1 - s) * xv.T)

    def test_disconnected_loss(self):
        with ad.Tape() as tape:
            pass
        with pytest.raises(DisconnectedLoss):
            ad.backward(tape, ad.Tensor(1.0))

    def test_non_scalar_loss(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.scale(x, 2.0)
        with pytest.raises(ShapeMismatch):
            ad.backward(tape, y)

    def test_mlp_against_finite_differences(self, rng):
        w1 = ad.Tensor(rng.normal(size=(5, 7)), requires_grad=True)
        w2 = ad.Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        xv = rng.normal(size=(4, 5))
        target = rng.integers(0, 3, size=4)

        def f():
            h = ad.sigmoid(ad.Tensor(xv) @ w1)
            return ad.cross_entropy(h @ w2, target)

        assert ad.grad_check(f, [w1, w2]) < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
    def test_property_broadcast_add_gradients(self, a, b):
        ta = ad.Tensor(a, requires_grad=True)
        tb = ad.Tensor(b, requires_grad=True)
        g = grads_of(lambda: ad.reduce_sum(ta + tb), [ta, tb])
        np.testing.assert_array_equal(g[ta], np.ones((2, 3)))
        np.testing.assert_array_equal(g[tb], np.full(3, 2.0))


class TestGradCheck:
    def test_quadratic(self, rng):
        w = ad.Tensor(rng.normal(size=6), requires_grad=True)
        assert ad.grad_check(lambda: ad.reduce_sum(ad.mul(w, w)), [w]) < 1e-9

    def test_attention_block(self):
        f, p, x = attention_setup()
        # bk shifts every score of a query equally, so softmax cancels it: its gradient is exactly zero
        g = grads_of(f, list(p.values()))
        assert np.abs(g[p["b.bk"]]).max() < 1e-12
        checked = [t for k, t in p.items() if k.split(".")[1] in ("wq", "wk", "wv", "wo", "bq", "bv", "bo")]
        assert ad.grad_check(f, checked + [x], eps=1e-3, stencil=4) < 1e-6

    def test_detects_wrong_gradient(self, rng):
        w = ad.Tensor(rng.normal(size=3), requires_grad=True)

        def f():
            # forward computes sum(w^2) but the recorded backward claims gradient w
            return ad._record(np.array((w.data ** 2).sum()), (w,), lambda g: (g * w.data,))

        assert ad.grad_check(f, [w]) > 0.1

    def test_bad_stencil(self):
        w = ad.Tensor(np.ones(1), requires_grad=True)
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.reduce_sum(w), [w], stencil=3)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        state = ad.AdamState(lr=0.1)
        ad.adam_step(state, p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = {"w": ad.Tensor(np.array([1.0]), requires_grad=True)}
        ad.adam_step(ad.AdamState(lr=0.1), p, {"w": np.array([1.0])})
        assert p["w"].data[0] == pytest.approx(0.9, abs=1e-6)

    def test_quadratic_descends(self, rng):
        w = ad.Tensor(rng.normal(size=4) * 3, requires_grad=True)
        state = ad.AdamState(lr=0.05)
        losses = []
        for _ in range(100):
            losses.append(float((w.data ** 2).sum()))
            ad.adam_step(state, {"w": w}, {"w": 2 * w.data})
        decreases = sum(b < a for a, b in zip(losses, losses[1:]))
        assert decreases >= 95 * 99 / 100

    def test_warmup(self):
        state = ad.AdamState(lr=1.0, warmup=10)
        assert state.current_lr(5) == pytest.approx(0.5)
        assert state.current_lr(20) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.adam_step(ad.AdamState(), {"w": ad.Tensor(np.ones(2))}, {"w": np.ones(3)})
