import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from visground import tensor as T
from visground.errors import ContractError, DimensionError, NumericError
from visground.tensor import Tape, Tensor, backward, finite_difference_check


def leaf(data, dtype=np.float64):
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.eye(3))).data, a)

    def test_zero(self):
        a = np.random.default_rng(1).normal(size=(3, 4))
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.zeros((4, 2)))).data, np.zeros((3, 2)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-12)

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
            T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))

    def test_adjoints(self):
        rng = np.random.default_rng(3)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        g = rng.normal(size=(3, 2))
        with Tape() as tape:
            loss = (T.matmul(a, b) * g).sum()
        backward(loss, tape)
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_gradient_only_where_positive(self):
        x = leaf([-1.0, 0.0, 2.0])
        with Tape() as tape:
            y = T.relu(x).sum()
        backward(y, tape)
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_extreme_inputs_finite(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_exp_gradient_at_one(self):
        x = leaf([1.0])
        with Tape() as tape:
            y = T.exp(x).sum()
        backward(y, tape)
        assert x.grad[0] == pytest.approx(math.e, rel=1e-15)
        h = 1e-6
        fd = (math.exp(1 + h) - math.exp(1 - h)) / (2 * h)
        assert abs(x.grad[0] - fd) / fd < 1e-8

    def test_broadcast_error(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_broadcast_adjoint_sums(self):
        x = leaf(np.ones((2, 3)))
        s = leaf(np.ones((2, 1)))
        with Tape() as tape:
            y = (x * s).sum()
        backward(y, tape)
        np.testing.assert_array_equal(s.grad, [[3.0], [3.0]])

    def test_scale(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = T.scale(x, 3.0).sum()
        backward(y, tape)
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_ln3(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)

    def test_large_logits(self):
        out = T.softmax(Tensor([1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [0.5, 0.5])

    def test_mask_excludes_entries(self):
        out = T.softmax(Tensor([1.0, 5.0, 2.0]), mask=np.array([True, False, True])).data
        assert out[1] == 0.0
        np.testing.assert_allclose(out[[0, 2]], T.softmax(Tensor([1.0, 2.0])).data)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax(Tensor(x), axis=-1).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_input_is_zero(self):
        x = Tensor(np.full((2, 4), 3.0))
        out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
        np.testing.assert_array_equal(out, 0.0)

    def test_already_normalised(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [1, -1], rtol=1e-5)

    def test_biased_variance_and_eps(self):
        x = np.array([1.0, 2.0, 4.0])
        expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
        out = T.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out, expected, rtol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = leaf(rng.normal(size=(4, 8))), leaf(rng.normal(size=8)), leaf(rng.normal(size=8))
        w = rng.normal(size=(4, 8))
        err = finite_difference_check(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b], h=1e-4)
        assert err <= 1e-4


class TestL2Normalize:
    def test_345(self):
        np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])

    def test_zero_vector(self):
        np.testing.assert_array_equal(T.l2_normalize(Tensor(np.zeros(3))).data, 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=8))
        w = rng.normal(size=8)
        assert finite_difference_check(lambda: (T.l2_normalize(x) * w).sum(), x, h=1e-4) <= 1e-4

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-100, 100)))
    def test_norm_at_most_one(self, x):
        norms = np.linalg.norm(T.l2_normalize(Tensor(x)).data, axis=-1)
        assert np.all(norms <= 1 + 1e-12)
        big = np.linalg.norm(x, axis=-1) >= 1e-12
        np.testing.assert_allclose(norms[big], 1.0, rtol=1e-12)


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        with Tape() as tape:
            y = x * x
        backward(y, tape)
        assert x.grad == 6.0

    def test_disconnected_leaf_gets_zero(self):
        x, z = leaf([1.0, 2.0]), leaf([5.0])
        with Tape() as tape:
            _ = z * 2.0
            y = (x * x).sum()
        backward(y, tape)
        np.testing.assert_array_equal(z.grad, [0.0])

    def test_non_scalar_rejected(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_unrecorded_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(leaf(1.0) * 2.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_softmax_matmul_composite(self, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 5)))
        w = rng.normal(size=(3, 5))
        err = finite_difference_check(lambda: (T.softmax(T.matmul(a, b), axis=-1) * w).sum(), [a, b], h=1e-4)
        assert err <= 1e-4

    def test_accumulation_is_exactly_additive(self):
        rng = np.random.default_rng(7)
        x, w = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))

        def run():
            with Tape() as tape:
                h = T.matmul(x, w)
                y = (T.sigmoid(h) * h).sum() + (x * x).sum()
            backward(y, tape)

        run()
        g1 = x.grad.copy()
        x.grad = None
        run()
        g2 = x.grad.copy()
        run()
        np.testing.assert_array_equal(x.grad, g2 + g1)

    def test_reverse_order_traversal(self):
        x = leaf(2.0)
        with Tape() as tape:
            a = x * 3.0
            b = T.exp(a)
            c = b.sum()
        assert tape.ops == ["mul", "exp", "sum"]
        order = []
        for node in tape.nodes:
            fn = node.vjp
            node.vjp = (lambda f, op: (lambda g: (order.append(op), f(g))[1]))(fn, node.op)
        backward(c, tape)
        assert order == ["sum", "exp", "mul"]

    def test_clear_releases_bindings(self):
        x = leaf(2.0)
        with Tape() as tape:
            y = x * x
        assert len(tape) == 1
        tape.clear()
        assert len(tape) == 0 and y.is_leaf

    def test_no_recording_outside_tape(self):
        x = leaf(2.0)
        y = x * x
        assert y.is_leaf and not y.requires_grad

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
        r1 = T.softmax(T.matmul(Tensor(a), Tensor(b))).data
        r2 = T.softmax(T.matmul(Tensor(a), Tensor(b))).data
        assert r1.tobytes() == r2.tobytes()


class TestFiniteDifferenceCheck:
    def test_linear_function_exact(self):
        x = leaf(np.random.default_rng(0).normal(size=6))
        w = np.arange(6.0)
        assert finite_difference_check(lambda: (x * w).sum(), x, h=1e-4) < 1e-9

    def test_sum_of_squares(self):
        x = leaf(np.random.default_rng(1).normal(size=6))
        assert finite_difference_check(lambda: (x * x).sum(), x, h=1e-4) <= 1e-6

    def test_detects_wrong_adjoint(self):
        x = leaf(np.random.default_rng(2).normal(size=(2, 4)))
        g, b = leaf(np.ones(4)), leaf(np.zeros(4))
        w = np.random.default_rng(3).normal(size=(2, 4))
        T.ADJOINT_FAULTS["layer_norm"] = 1.01
        try:
            err = finite_difference_check(lambda: (T.layer_norm(x, g, b) * w).sum(), x)
        finally:
            T.ADJOINT_FAULTS.clear()
        assert err > 1e-3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self):
        x = leaf([1.0])
        with pytest.raises(NumericError):
            finite_difference_check(lambda: T.exp(x * 1e6).sum(), x)

    def test_requires_float64(self):
        x = leaf([1.0], dtype=np.float32)
        with pytest.raises(ContractError):
            finite_difference_check(lambda: (x * x).sum(), x)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize(
    "fn",
    [
        lambda x: T.sigmoid(x),
        lambda x: T.exp(T.scale(x, 0.5)),
        lambda x: x * x - x,
        lambda x: T.maximum(x, T.scale(x, -0.5)),
        lambda x: T.absolute(x) + T.minimum(x, 0.3),
        lambda x: x / (T.exp(x) + 1.0),
        lambda x: T.concat([x, T.scale(x, 2.0)], axis=-1).reshape(-1)[1:7],
        lambda x: T.transpose(x, (1, 0)).mean(axis=0),
    ],
    ids=["sigmoid", "exp", "poly", "maximum", "abs_min", "div", "concat_index", "transpose_mean"],
)
def test_op_gradients(fn, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(3, 4)))
    w = rng.normal(size=fn(Tensor(x.data)).shape)
    assert finite_difference_check(lambda: (fn(x) * w).sum(), x, h=1e-4) <= 1e-4


def test_embedding_adjoint_accumulates_repeats():
    table = leaf(np.arange(12.0).reshape(4, 3))
    with Tape() as tape:
        y = T.embedding(table, np.array([[1, 1, 3]])).sum()
    backward(y, tape)
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1])


def test_gather_last():
    x = leaf(np.arange(12.0).reshape(1, 3, 4))
    idx = np.array([[3, 0, 1], [0, 1, 2], [2, 3, 0]])
    with Tape() as tape:
        out = T.gather_last(x, idx)
        y = (out * np.arange(9.0).reshape(3, 3)).sum()
    np.testing.assert_array_equal(out.data[0, 0], [3, 0, 1])
    backward(y, tape)
    np.testing.assert_array_equal(x.grad[0, 0], [1, 2, 0, 0])
