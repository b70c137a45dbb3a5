import numpy as np
import pytest

from mlim.autodiff import (
    NumericsError, Tensor, add, check_finite, concat, div, embedding,
    gather_positions, index_select, layer_norm, log_softmax, matmul, mul,
    no_grad, relu, reshape, sigmoid, silu, softmax, softplus, square, sub,
    tmean, transpose, tsum,
)
from helpers import fd_check

R = np.random.default_rng(2024)


def away_from_zero(shape, lo=0.2, hi=1.5):
    # keeps relu/abs kinks far from the FD step size
    mag = R.uniform(lo, hi, size=shape)
    sign = np.where(R.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


class TestElementwise:
    def test_add_sub_mul_div(self):
        a = R.normal(size=(3, 4))
        b = R.uniform(0.5, 2.0, size=(3, 4))
        fd_check(lambda t: tsum(add(t["a"], t["b"])), {"a": a, "b": b})
        fd_check(lambda t: tsum(sub(t["a"], t["b"])), {"a": a, "b": b})
        fd_check(lambda t: tsum(mul(t["a"], t["b"])), {"a": a, "b": b})
        fd_check(lambda t: tsum(div(t["a"], t["b"])), {"a": a, "b": b})

    def test_broadcasting_grads(self):
        a = R.normal(size=(3, 1))
        b = R.normal(size=(1, 4))
        c = R.normal(size=(4,))
        fd_check(lambda t: tsum(mul(add(t["a"], t["b"]), t["c"])),
                 {"a": a, "b": b, "c": c})

    def test_square(self):
        fd_check(lambda t: tsum(square(t["x"])), {"x": R.normal(size=(5,))})

    def test_relu(self):
        fd_check(lambda t: tsum(relu(t["x"])), {"x": away_from_zero((4, 5))})

    def test_relu_zero_region_gets_zero_grad(self):
        x = Tensor(np.array([-2.0, -0.5, 0.5, 2.0]), requires_grad=True)
        tsum(relu(x)).backward()
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0, 1.0])

    def test_sigmoid_silu_softplus(self):
        x = R.normal(size=(3, 4)) * 2.0
        fd_check(lambda t: tsum(sigmoid(t["x"])), {"x": x})
        fd_check(lambda t: tsum(silu(t["x"])), {"x": x})
        fd_check(lambda t: tsum(softplus(t["x"])), {"x": x})

    def test_sigmoid_softplus_stable_in_tails(self):
        x = Tensor(np.array([-800.0, 800.0]))
        s = sigmoid(x).data
        assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0
        sp = softplus(x).data
        assert np.all(np.isfinite(sp)) and sp[0] == 0.0 and sp[1] == 800.0


class TestMatmulShape:
    def test_matmul_2d(self):
        fd_check(lambda t: tsum(matmul(t["a"], t["b"])),
                 {"a": R.normal(size=(3, 4)), "b": R.normal(size=(4, 2))})

    def test_matmul_batched(self):
        fd_check(lambda t: tsum(matmul(t["a"], t["b"])),
                 {"a": R.normal(size=(2, 3, 4)), "b": R.normal(size=(2, 4, 5))})

    def test_matmul_broadcast_rhs(self):
        # shared projection applied across the batch axis
        fd_check(lambda t: tsum(matmul(t["a"], t["b"])),
                 {"a": R.normal(size=(2, 3, 4)), "b": R.normal(size=(4, 5))})

    def test_reshape_transpose(self):
        a = R.normal(size=(2, 3, 4))
        fd_check(lambda t: tsum(square(reshape(t["a"], (6, 4)))), {"a": a})
        fd_check(lambda t: tsum(square(reshape(t["a"], (2, -1)))), {"a": a})
        fd_check(lambda t: tsum(square(transpose(t["a"], (2, 0, 1)))), {"a": a})

    def test_concat(self):
        fd_check(
            lambda t: tsum(square(concat([t["a"], t["b"]], axis=1))),
            {"a": R.normal(size=(2, 3)), "b": R.normal(size=(2, 2))},
        )

    def test_index_select_repeated_rows_accumulate(self):
        a = R.normal(size=(5, 3))
        fd_check(lambda t: tsum(square(index_select(t["a"], 0, [1, 1, 4, 0]))),
                 {"a": a})

    def test_gather_positions(self):
        a = R.normal(size=(2, 4, 3))
        fd_check(
            lambda t: tsum(square(gather_positions(t["a"], [0, 0, 1], [1, 3, 2]))),
            {"a": a},
        )

    def test_embedding(self):
        table = R.normal(size=(6, 4))
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        fd_check(lambda t: tsum(square(embedding(t["w"], ids))), {"w": table})


class TestReductionsNorm:
    def test_tsum_axes(self):
        a = R.normal(size=(2, 3, 4))
        fd_check(lambda t: tsum(t["a"]), {"a": a})
        fd_check(lambda t: tsum(square(tsum(t["a"], axis=1))), {"a": a})
        fd_check(lambda t: tsum(square(tsum(t["a"], axis=(0, 2)))), {"a": a})
        fd_check(lambda t: tsum(square(tsum(t["a"], axis=-1, keepdims=True))),
                 {"a": a})

    def test_tmean(self):
        a = R.normal(size=(3, 4))
        assert np.isclose(tmean(Tensor(a)).data, a.mean())
        fd_check(lambda t: tmean(square(t["a"]), axis=None), {"a": a})
        fd_check(lambda t: tsum(square(tmean(t["a"], axis=0))), {"a": a})

    def test_softmax_log_softmax(self):
        a = R.normal(size=(3, 5)) * 3.0
        w = R.normal(size=(3, 5))
        fd_check(lambda t: tsum(mul(softmax(t["a"]), Tensor(w))), {"a": a})
        fd_check(lambda t: tsum(mul(log_softmax(t["a"]), Tensor(w))), {"a": a})
        y = softmax(Tensor(a)).data
        assert np.allclose(y.sum(axis=-1), 1.0)
        assert np.allclose(np.exp(log_softmax(Tensor(a)).data), y)

    def test_softmax_shift_invariance_and_overflow(self):
        a = np.array([[1e4, 1e4 + 1.0, 1e4 - 2.0]])
        y = softmax(Tensor(a)).data
        assert np.all(np.isfinite(y))
        assert np.allclose(y, softmax(Tensor(a - 1e4)).data)

    def test_layer_norm(self):
        x = R.normal(size=(2, 3, 6))
        gamma = R.uniform(0.5, 1.5, size=(6,))
        beta = R.normal(size=(6,))
        fd_check(
            lambda t: tsum(square(layer_norm(t["x"], t["g"], t["b"]))),
            {"x": x, "g": gamma, "b": beta},
        )

    def test_layer_norm_output_standardized(self):
        x = Tensor(R.normal(size=(4, 8)) * 5.0 + 3.0)
        ones, zeros = Tensor(np.ones(8)), Tensor(np.zeros(8))
        y = layer_norm(x, ones, zeros).data
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)


class TestGraphMechanics:
    def test_reused_node_accumulates(self):
        x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
        y = tsum(add(mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
        y.backward()
        assert np.allclose(x.grad, [5.0, -5.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            add(x, x).backward()

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad and y._backward is None
        z = mul(x, x)  # re-enabled after the context
        assert z.requires_grad

    def test_constant_leaves_get_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.full(3, 2.0))
        tsum(mul(x, c)).backward()
        assert c.grad is None and np.allclose(x.grad, 2.0)

    def test_operator_sugar(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = tsum((2.0 * x + 1.0 - x) / 2.0 + (-x) + (3.0 - x))
        y.backward()
        # d/dx [ (x+1)/2 - x + 3 - x ] = 0.5 - 2
        assert np.allclose(x.grad, -1.5)
        assert np.allclose(y.data, 2.0 + 0.5)

    def test_check_finite(self):
        ok = Tensor(np.ones(4))
        assert check_finite(ok, "x") is ok
        bad = Tensor(np.array([1.0, np.nan, np.inf]))
        with pytest.raises(NumericsError, match="loss"):
            check_finite(bad, "loss")
