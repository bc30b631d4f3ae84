import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from homodistil import numerics as nx
from homodistil.numerics import NonFiniteError, ShapeError, Tensor

from gradcheck import check_entries


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.5, -2.0], [0.25, 7.0]])
        assert np.array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_hand_case(self):
        out = nx.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        assert np.array_equal(out.data, [[3], [7]])

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_zero_dim_rejected(self):
        a, b = Tensor.__new__(Tensor), Tensor.__new__(Tensor)
        a.data, b.data = np.zeros((3, 0)), np.zeros((0, 2))
        with pytest.raises(ShapeError):
            nx.matmul(a, b)

    def test_zero_size_tensor_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((3, 0)))

    def test_gradients_accumulate_to_both_inputs(self):
        a, b = leaf([[1.0, 2.0]]), leaf([[3.0], [4.0]])
        nx.backward(nx.sum_all(nx.matmul(a, b)))
        assert np.array_equal(a.grad, [[3.0, 4.0]])
        assert np.array_equal(b.grad, [[1.0], [2.0]])


class TestSoftmax:
    def test_symmetric(self):
        assert np.allclose(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_closed_form(self):
        p = nx.softmax(Tensor([math.log(3.0), 0.0])).data
        assert p == pytest.approx([0.75, 0.25], abs=1e-15)

    def test_no_overflow(self):
        p = nx.softmax(Tensor([1000.0, 0.0])).data
        assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        p = nx.softmax(Tensor(x), axis=-1).data
        assert np.all(p >= 0)
        assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        th = leaf([1.0, -2.0, 5.0])
        nx.backward(nx.sum_all(th))
        assert np.array_equal(th.grad, np.ones(3))

    def test_half_sum_of_squares(self):
        th = leaf([1.0, 2.0, 3.0])
        nx.backward(nx.scale(nx.sum_all(nx.mul(th, th)), 0.5))
        assert np.allclose(th.grad, [1.0, 2.0, 3.0], rtol=0, atol=1e-15)

    def test_non_scalar_root(self):
        th = leaf([1.0, 2.0])
        with pytest.raises(ShapeError):
            nx.backward(nx.scale(th, 2.0))

    def test_accumulates_without_zeroing(self):
        th = leaf([1.0, 2.0])
        loss = nx.sum_all(th)
        nx.backward(loss)
        nx.backward(loss)
        assert np.array_equal(th.grad, [2.0, 2.0])

    def test_shared_subexpression_visited_once(self):
        x = leaf([3.0])
        y = nx.mul(x, x)
        z = nx.add(y, y)  # d/dx 2x^2 = 4x
        nx.backward(nx.sum_all(z))
        assert np.array_equal(x.grad, [12.0])

    def test_topological_order_parents_first(self):
        x = leaf([1.0])
        y = nx.scale(x, 2.0)
        z = nx.add(y, x)
        order = nx.topological_order(nx.sum_all(z))
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a0, b0 = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        grads = []
        for _ in range(2):
            a, b = leaf(a0), leaf(b0)
            out = nx.softmax(nx.matmul(a, b))
            nx.backward(nx.sum_all(nx.mul(out, out)))
            grads.append((a.grad.tobytes(), b.grad.tobytes()))
        assert grads[0] == grads[1]


class TestFiniteness:
    def test_nan_input_detected(self):
        with pytest.raises(NonFiniteError):
            nx.scale(Tensor([np.nan, 1.0]), 1.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflow_detected(self):
        with pytest.raises(NonFiniteError):
            nx.mul(Tensor([1e200]), Tensor([1e200]))

    def test_bias_broadcast_only(self):
        with pytest.raises(ShapeError):
            nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def _fd_case(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    cases = {
        "matmul": ([rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))],
                   lambda a, b: nx.matmul(a, b)),
        "matmul_batched": ([rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))],
                           lambda a, b: nx.matmul(a, b)),
        "add_bias": ([rng.normal(size=(3, 4)), rng.normal(size=4)], lambda a, b: nx.add(a, b)),
        "sub": ([rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], lambda a, b: nx.sub(a, b)),
        "mul": ([rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], lambda a, b: nx.mul(a, b)),
        "softmax": ([rng.normal(size=(3, 5))], lambda a: nx.softmax(a)),
        "log_softmax": ([rng.normal(size=(3, 5))], lambda a: nx.log_softmax(a)),
        "gelu": ([rng.normal(size=(4, 4)) * 2], lambda a: nx.gelu(a)),
        "layernorm": ([rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)],
                      lambda x, g, b: nx.layernorm(x, g, b, 1e-12)),
        "layernorm_masked": ([rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)],
                             lambda x, g, b: nx.layernorm(x, g, b, 1e-12, np.array([1, 0, 1, 1, 0, 1.0]))),
        "transpose": ([rng.normal(size=(2, 3, 4))], lambda a: nx.transpose(a)),
        "sum_axis": ([rng.normal(size=(2, 3, 4))], lambda a: nx.sum_axis(a, 1)),
        "mean_axis": ([rng.normal(size=(2, 3, 4))], lambda a: nx.mean_axis(a, 0)),
        "embedding": ([rng.normal(size=(6, 3))], lambda t: nx.embedding(t, np.array([[0, 2, 2], [5, 0, 1]]))),
        "gather_rows": ([rng.normal(size=(5, 3))], lambda a: nx.gather_rows(a, np.array([4, 1, 1]))),
        "head_split": ([rng.normal(size=(2, 3, 5))], lambda a: nx.head_split(a, np.array([0, 0, 1, 2, 2]), 3)),
        "repeat_axis": ([rng.normal(size=(2, 1, 3))], lambda a: nx.repeat_axis(a, 1, 4)),
        "cross_entropy": ([rng.normal(size=(4, 6))], lambda a: nx.cross_entropy(a, np.array([0, 5, 2, 2]))),
        "mse": ([rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], lambda a, b: nx.mse(a, b)),
        "kl": ([rng.normal(size=(4, 5)), rng.normal(size=(4, 5))], lambda p, q: nx.kl_divergence(p, q, 2.0)),
    }
    return cases[name]


FD_OPS = ["matmul", "matmul_batched", "add_bias", "sub", "mul", "softmax", "log_softmax", "gelu",
          "layernorm", "layernorm_masked", "transpose", "sum_axis", "mean_axis", "embedding",
          "gather_rows", "head_split", "repeat_axis", "cross_entropy", "mse", "kl"]


@pytest.mark.parametrize("name", FD_OPS)
def test_op_gradient_matches_finite_differences(name):
    arrays_, op = _fd_case(name)
    weights = np.random.default_rng(99)

    def build():
        ins = [Tensor(a, requires_grad=True) for a in arrays_]
        out = op(*ins)
        w = weights_for(out.shape)
        return ins, nx.sum_all(nx.mul(out, Tensor(w))) if out.ndim else out

    w_cache = {}

    def weights_for(shape):
        if shape not in w_cache:
            w_cache[shape] = weights.normal(size=shape)
        return w_cache[shape]

    ins, loss = build()
    nx.backward(loss)

    def f():
        return build()[1].item()

    for arr, t in zip(arrays_, ins):
        idx = [tuple(i) for i in np.ndindex(arr.shape)]
        bad = check_entries(f, arr, t.grad, idx)
        assert not bad, bad[:3]
