import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from talkforge.errors import ContractError, DeterminismError, NaNError, ShapeError
from talkforge.tensor import (
    Tape,
    Tensor,
    _node,
    backward,
    gather_cols,
    grad_check,
    log_softmax,
    matmul,
    no_grad,
    rng,
    softmax,
    take_rows,
)


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_arithmetic(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)

    def test_gradients_vs_finite_differences(self):
        r = rng(7)
        a = Tensor(r.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(r.normal(size=(5, 3)), requires_grad=True)

        err_a = grad_check(lambda t: (matmul(t, b) * matmul(t, b)).sum(), a)
        err_b = grad_check(lambda t: (matmul(a, t) * matmul(a, t)).sum(), b)
        assert err_a < 1e-6
        assert err_b < 1e-6

    def test_batched_matmul_gradient(self):
        r = rng(8)
        a = Tensor(r.normal(size=(3, 4, 5)), requires_grad=True)
        b = Tensor(r.normal(size=(5, 2)), requires_grad=True)
        assert grad_check(lambda t: matmul(t, b).sum(), a) < 1e-6
        assert grad_check(lambda t: (matmul(a, t) ** 2.0).sum(), b) < 1e-5

    @given(st.integers(0, 6), st.data())
    @settings(max_examples=25, deadline=None)
    def test_associative_and_distributive_on_small_ints(self, seed, data):
        r = rng(seed)
        a = Tensor(r.integers(-3, 4, size=(3, 3)).astype(float))
        b = Tensor(r.integers(-3, 4, size=(3, 3)).astype(float))
        c = Tensor(r.integers(-3, 4, size=(3, 3)).astype(float))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        assert np.array_equal(left, right)
        dist = matmul(a, b + c).data
        assert np.array_equal(dist, matmul(a, b).data + matmul(a, c).data)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] > 1.0 - 1e-12
        assert out.data[1] < 1e-12

    def test_sums_to_one(self):
        out = softmax(Tensor(rng(3).normal(size=7)))
        assert abs(out.data.sum() - 1.0) < 1e-12
        assert np.all(out.data >= 0.0)

    @given(st.integers(0, 100))
    @settings(max_examples=30, deadline=None)
    def test_sum_property(self, seed):
        x = rng(seed).normal(scale=5.0, size=(4, 6))
        out = softmax(Tensor(x), axis=-1)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_nan_input_raises(self):
        with pytest.raises(NaNError):
            softmax(Tensor([1.0, float("nan")]))
        with pytest.raises(NaNError):
            log_softmax(Tensor([float("nan")]))

    def test_gradient(self):
        x = Tensor(rng(5).normal(size=(3, 4)), requires_grad=True)
        err = grad_check(lambda t: (softmax(t, axis=-1) ** 2.0).sum(), x)
        assert err < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(rng(1).normal(size=(2, 3)), requires_grad=True)
        backward(x.sum())
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = Tensor(rng(2).normal(size=5), requires_grad=True)
        backward((x * x).sum() * 0.5)
        assert np.allclose(x.grad, x.data, atol=1e-15)

    def test_mlp_loss_vs_finite_differences(self):
        r = rng(11)
        w1 = Tensor(r.normal(size=(4, 8)), requires_grad=True)
        w2 = Tensor(r.normal(size=(8, 2)), requires_grad=True)
        x = Tensor(r.normal(size=(3, 4)))

        def loss(t):
            h = matmul(x, w1).tanh()
            y = matmul(h, w2)
            return (y * y).mean()

        assert grad_check(loss, w1) < 1e-4
        assert grad_check(loss, w2) < 1e-4

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = x.sum()
        backward(loss)
        backward(loss)
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_disconnected_tensor_keeps_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        backward((x * x).sum())
        assert unused.grad is None

    def test_shared_subexpression_counted_once(self):
        # diamond graph: y = s + s with s shared; dy/dx must be 2, not 4
        x = Tensor([3.0], requires_grad=True)
        s = x * 1.0
        backward((s + s).sum())
        assert np.array_equal(x.grad, [2.0])


class TestTape:
    def test_topological_order_and_uniqueness(self):
        x = Tensor([1.0], requires_grad=True)
        s = x * 2.0
        y = (s + s) * s
        tape = Tape.trace(y)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        assert len(pos) == len(tape.nodes)  # each op recorded exactly once
        for node in tape.nodes:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]


class TestGradCheck:
    def test_sum_is_exact(self):
        x = Tensor(rng(4).normal(size=6))
        assert grad_check(lambda t: t.sum(), x) < 1e-9

    def test_one_layer_cross_entropy(self):
        r = rng(21)
        w = Tensor(r.normal(size=(5, 7)), requires_grad=True)
        x = Tensor(r.normal(size=(4, 5)))
        targets = np.array([1, 0, 6, 3])

        def loss(t):
            ls = log_softmax(matmul(x, t), axis=-1)
            return -gather_cols(ls, targets).mean()

        assert grad_check(loss, w, eps=1e-5) < 1e-4

    def test_wrong_backward_rule_is_flagged(self):
        # negative control: square with a deliberately wrong derivative (3x)
        def bad_square(t):
            def bwd(out):
                t._accum(out.grad * 3.0 * t.data)

            return _node(t.data ** 2, (t,), bwd).sum()

        x = Tensor(rng(6).normal(size=4))
        assert grad_check(bad_square, x) > 1e-2

    def test_nondeterministic_function_rejected(self):
        state = {"n": 0.0}

        def f(t):
            state["n"] += 1.0
            return (t * state["n"]).sum()

        with pytest.raises(DeterminismError):
            grad_check(f, Tensor([1.0]))

    def test_eps_contract(self):
        with pytest.raises(ContractError):
            grad_check(lambda t: t.sum(), Tensor([1.0]), eps=0.5)


class TestPrimitiveGradients:
    @pytest.mark.parametrize(
        "fn",
        [
            lambda t: t.exp().sum(),
            lambda t: (t * t + 1.0).log().sum(),
            lambda t: t.tanh().sum(),
            lambda t: t.erf().sum(),
            lambda t: t.relu().sum(),
            lambda t: (t ** 3.0).sum(),
            lambda t: t.reshape((6,)).sum(),
            lambda t: (t.transpose((1, 0)) * 2.0).sum(),
            lambda t: log_softmax(t, axis=-1).sum(),
            lambda t: t.mean(axis=0).sum(),
            lambda t: (t.mean() * t.sum(axis=-1)).sum(),
        ],
    )
    def test_primitive(self, fn):
        x = Tensor(rng(13).normal(size=(2, 3)) + 0.1)
        assert grad_check(fn, x) < 1e-4

    def test_take_rows_scatter(self):
        w = Tensor(rng(9).normal(size=(6, 3)), requires_grad=True)
        backward(take_rows(w, [2, 5, 2]).sum())
        expected = np.zeros((6, 3))
        expected[2] = 2.0
        expected[5] = 1.0
        assert np.array_equal(w.grad, expected)

    def test_suffix_broadcast_add(self):
        x = Tensor(rng(10).normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng(12).normal(size=3), requires_grad=True)
        backward((x + b).sum())
        assert np.array_equal(b.grad, [4.0, 4.0, 4.0])
        with pytest.raises(ShapeError):
            Tensor(np.zeros((4, 3))) + Tensor(np.zeros((4, 2)))


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._backward is None
        assert not y.requires_grad
