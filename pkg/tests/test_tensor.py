import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import max_rel_error
from smoothcert import tensor as T
from smoothcert.tensor import Tensor, backward, forward_op, no_grad

TOL = 1e-6
rng = np.random.default_rng(1234)


def away_from_zero(shape, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.3, x)


# ---------------------------------------------------------------- worked examples


def test_relu_example():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_matmul_identity():
    a = rng.standard_normal((3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_conv2d_ones_center_is_nine():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 0, 1, 1] == 9.0
    # corners only see 4 ones under zero padding
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv2d_matches_direct_loop():
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 4, 5, 5))
    for n in range(2):
        for f in range(4):
            for i in range(5):
                for j in range(5):
                    want[n, f, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[f]).sum()
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_grad_of_sum_is_ones():
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    T.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_grad_of_half_square():
    x = Tensor([3.0, -2.0], requires_grad=True)
    T.scale(T.sum_(T.mul(x, x)), 0.5).backward()
    assert np.array_equal(x.grad, [3.0, -2.0])


def test_mlp_three_layers_fd():
    r = np.random.default_rng(5)
    x = r.standard_normal((4, 5))
    ws = [r.standard_normal((5, 6)), r.standard_normal((6, 6)), r.standard_normal((6, 3))]
    labels = [0, 2, 1, 2]

    def f(x, w1, w2, w3):
        h = T.relu(T.matmul(x, w1))
        h = T.relu(T.matmul(h, w2))
        return T.cross_entropy(T.matmul(h, w3), labels)

    assert max_rel_error(f, [x] + ws) < TOL


# ---------------------------------------------------------------- finite differences per op


@pytest.mark.parametrize("seed", range(3))
def test_fd_elementwise(seed):
    a, b = away_from_zero((3, 4), seed), away_from_zero((3, 4), seed + 10)
    assert max_rel_error(T.add, [a, b]) < TOL
    assert max_rel_error(T.mul, [a, b]) < TOL
    assert max_rel_error(T.neg, [a]) < TOL
    assert max_rel_error(lambda t: T.scale(t, -2.5), [a]) < TOL
    assert max_rel_error(T.relu, [a]) < TOL
    assert max_rel_error(T.log, [np.abs(a) + 0.5]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_fd_broadcast_add(seed):
    r = np.random.default_rng(seed)
    assert max_rel_error(T.add, [r.standard_normal((4, 3)), r.standard_normal((3,))]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_fd_reductions_and_shapes(seed):
    a = np.random.default_rng(seed).standard_normal((2, 3, 4))
    assert max_rel_error(T.sum_, [a]) < TOL
    assert max_rel_error(lambda t: T.sum_(t, axis=1), [a]) < TOL
    assert max_rel_error(T.mean, [a]) < TOL
    assert max_rel_error(lambda t: T.mean(t, axis=2), [a]) < TOL
    assert max_rel_error(lambda t: T.reshape(t, (6, 4)), [a]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_fd_matmul(seed):
    r = np.random.default_rng(seed)
    assert max_rel_error(T.matmul, [r.standard_normal((3, 4)), r.standard_normal((4, 2))]) < TOL


@pytest.mark.parametrize("padding", [0, 1])
def test_fd_conv2d(padding):
    r = np.random.default_rng(padding)
    x, w = r.standard_normal((2, 2, 4, 4)), r.standard_normal((3, 2, 3, 3))
    assert max_rel_error(lambda a, b: T.conv2d(a, b, padding=padding), [x, w]) < TOL


def test_fd_mean_pool():
    assert max_rel_error(T.mean_pool2, [rng.standard_normal((2, 2, 4, 4))]) < TOL


def test_fd_batch_norm_batch_stats():
    r = np.random.default_rng(3)
    x = r.standard_normal((5, 3, 2, 2)) * 2 + 1
    g, b = r.standard_normal(3), r.standard_normal(3)
    assert max_rel_error(lambda x, g, b: T.batch_norm(x, g, b), [x, g, b]) < TOL
    assert max_rel_error(lambda x, g, b: T.batch_norm(x, g, b), [x[:, :, 0, 0], g, b]) < TOL


def test_fd_batch_norm_fixed_stats():
    r = np.random.default_rng(4)
    x = r.standard_normal((3, 3, 2, 2))
    g, b = r.standard_normal(3), r.standard_normal(3)
    m, v = r.standard_normal(3), r.uniform(0.5, 2.0, 3)
    assert max_rel_error(lambda x, g, b: T.batch_norm(x, g, b, m, v), [x, g, b]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_fd_probability_ops(seed):
    a = np.random.default_rng(seed).standard_normal((4, 5)) * 3
    assert max_rel_error(lambda t: T.softmax(t, axis=1), [a]) < TOL
    assert max_rel_error(lambda t: T.log_softmax(t, axis=1), [a]) < TOL
    assert max_rel_error(lambda t: T.logsumexp(t, axis=1), [a]) < TOL
    assert max_rel_error(lambda t: T.cross_entropy(t, [0, 4, 2, 1]), [a]) < TOL
    assert max_rel_error(lambda t: T.cross_entropy(t, [0, 4, 2, 1], reduction="sum"), [a]) < TOL


def test_fd_stack_select():
    r = np.random.default_rng(9)
    a, b = r.standard_normal((3, 4)), r.standard_normal((3, 4))
    assert max_rel_error(lambda x, y: T.stack([x, y], axis=0), [a, b]) < TOL
    assert max_rel_error(lambda x: T.select(x, [1, 3, 0]), [a]) < TOL


def test_fd_reused_node():
    # a value consumed twice must receive both gradient contributions
    a = away_from_zero((3,), 7)
    assert max_rel_error(lambda t: T.mul(T.relu(t), T.add(t, T.relu(t))), [a]) < TOL


# ---------------------------------------------------------------- errors and invariants


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises():
    with pytest.raises(FloatingPointError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(FloatingPointError):
        T.mul(Tensor([1e200]), Tensor([1e200]))


def test_backward_non_scalar_and_consumed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(T.relu(x))
    loss = T.sum_(x)
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.sum_(T.mul(x, x))
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        y.backward()


def test_forward_op_dispatch():
    a = Tensor(rng.standard_normal((2, 2)))
    assert np.array_equal(forward_op("relu", a).data, T.relu(a).data)
    with pytest.raises(ValueError):
        forward_op("nope", a)


def test_cross_entropy_numerically_stable():
    logits = Tensor([[1000.0, 0.0], [-1000.0, 0.0]])
    ce = T.cross_entropy(logits, [0, 1], reduction="none").data
    np.testing.assert_allclose(ce, [0.0, 0.0], atol=1e-12)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 7)), elements=finite))
def test_softmax_rows_sum_to_one(a):
    s = T.softmax(Tensor(a), axis=1).data
    assert np.all(np.abs(s.sum(axis=1) - 1.0) <= 1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 7)), elements=finite), st.data())
def test_cross_entropy_nonnegative(a, data):
    labels = data.draw(st.lists(st.integers(0, a.shape[1] - 1), min_size=a.shape[0], max_size=a.shape[0]))
    assert np.all(T.cross_entropy(Tensor(a), labels, reduction="none").data >= 0.0)


def test_determinism_bit_identical():
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()
