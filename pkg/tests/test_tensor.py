import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmodnet import tensor as T
from xmodnet.tensor import RunningStats, ShapeError, Tensor


def param(data, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# conv2d


def test_conv_delta_kernel_is_identity(rng):
    x = Tensor(rng.normal(size=(1, 3, 3, 1)))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 1.0
    out = T.conv2d(x, Tensor(k), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_all_ones_counts_window_overlap():
    x = Tensor(np.ones((1, 3, 3, 1)))
    out = T.conv2d(x, Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1))).data[0, :, :, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == 6.0


def test_conv_zero_kernel_gives_zero(rng):
    x = Tensor(rng.normal(size=(2, 5, 5, 3)))
    out = T.conv2d(x, Tensor(np.zeros((3, 3, 3, 4))), Tensor(np.zeros(4)))
    assert out.shape == (2, 5, 5, 4)
    assert not out.data.any()


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 4, 5, 3))
    k = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    expected = np.zeros((2, 4, 5, 2))
    for i in range(4):
        for j in range(5):
            window = padded[:, i : i + 3, j : j + 3, :]
            expected[:, i, j, :] = np.einsum("bhwc,hwco->bo", window, k) + b
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b))
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_conv_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 2, 4))), Tensor(np.zeros(4)))


def test_conv_rejects_non_3x3():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 4, 4, 1))), Tensor(np.zeros((5, 5, 1, 1))), Tensor(np.zeros(1)))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 4, 4, 2), elements=st.floats(-10, 10)))
def test_conv_delta_identity_property(x):
    k = np.zeros((3, 3, 2, 2))
    k[1, 1] = np.eye(2)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x)


# ---------------------------------------------------------------------------
# batch norm


def test_batch_norm_constant_input_goes_to_zero():
    x = Tensor(np.full((2, 3, 3, 4), 7.0, dtype=np.float32))
    out = T.batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), "train", RunningStats.fresh(4))
    assert np.abs(out.data).max() <= 7.0 * 1e-5


def test_batch_norm_standardized_input_is_near_identity(rng):
    x = rng.normal(size=(8, 5, 5, 3))
    x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), "batch")
    np.testing.assert_allclose(out.data, x, atol=1e-4)


def test_batch_norm_zero_gamma_outputs_beta(rng):
    beta = np.array([0.5, -1.0, 2.0])
    out = T.batch_norm(Tensor(rng.normal(size=(2, 3, 3, 3))), Tensor(np.zeros(3)), Tensor(beta), "batch")
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta, out.shape))


def test_batch_norm_running_stats_update(rng):
    x = rng.normal(3.0, 2.0, size=(4, 4, 4, 2))
    state = RunningStats.fresh(2, np.float64)
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), "train", state)
    np.testing.assert_allclose(state.mean, 0.1 * x.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.var(axis=(0, 1, 2)))
    assert state.updates == 1


def test_batch_norm_batch_mode_leaves_state_alone(rng):
    state = RunningStats.fresh(2, np.float64)
    T.batch_norm(Tensor(rng.normal(size=(2, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), "batch", state)
    assert state.updates == 0 and not state.mean.any()


def test_batch_norm_eval_uses_running_stats():
    state = RunningStats(np.array([1.0]), np.array([4.0]), updates=1)
    x = Tensor(np.full((1, 1, 1, 1), 5.0))
    out = T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), "eval", state)
    np.testing.assert_allclose(out.data, 4.0 / np.sqrt(4.0 + 1e-5))


def test_batch_norm_eval_without_updates_raises():
    with pytest.raises(RuntimeError, match="running statistics"):
        T.batch_norm(Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), "eval", RunningStats.fresh(1))


# ---------------------------------------------------------------------------
# small ops


def test_relu_examples():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_relu_gradient_at_zero_is_zero():
    x = param([-1.0, 0.0, 2.0])
    T.backward(T.tsum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_max_pool_single_window():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert T.max_pool_2x2(x).data.reshape(-1).tolist() == [4.0]


def test_max_pool_tie_routes_to_first_index():
    x = param(np.ones((1, 2, 2, 1)))
    T.backward(T.tsum(T.max_pool_2x2(x)))
    np.testing.assert_array_equal(x.grad.reshape(-1), [1, 0, 0, 0])


def test_max_pool_odd_dims():
    with pytest.raises(ShapeError):
        T.max_pool_2x2(Tensor(np.zeros((1, 5, 5, 1))))
    out = T.max_pool_2x2(Tensor(np.arange(25.0).reshape(1, 5, 5, 1)), truncate=True)
    np.testing.assert_array_equal(out.data[0, :, :, 0], [[6, 8], [16, 18]])


def test_global_avg_pool_and_concat():
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    np.testing.assert_array_equal(T.global_avg_pool(x).data, [[3.0, 4.0]])
    cat = T.concat_channels(Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(cat.data, [[1, 0, 0, 0]] * 2)


def test_affine_matches_numpy(rng):
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    np.testing.assert_allclose(T.affine(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b)


def test_softmax_closed_form():
    out = T.softmax(Tensor(np.array([[np.log(2.0), 0.0]])))
    np.testing.assert_allclose(out.data, [[2 / 3, 1 / 3]], atol=1e-12)


def test_softmax_is_stable_for_large_inputs():
    out = T.softmax(Tensor(np.array([[1000.0, 1000.0]])))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_are_distributions(x):
    out = T.softmax(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_cast_round_trips_gradient_dtype():
    x = param([1.0, 2.0], dtype=np.float32)
    y = T.cast(x, np.float64)
    assert y.dtype == np.float64
    T.backward(T.tsum(y * y))
    assert x.grad.dtype == np.float32
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_non_finite_forward_is_an_error():
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        T.log(Tensor(np.array([0.0])))


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones():
    x = param([1.0, 2.0, 3.0])
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_square():
    x = param([1.0, 2.0])
    T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_twice_doubles():
    x = param([1.0, -2.0, 0.5])
    loss = T.tsum(T.exp(x) * x)
    tape = T.Tape.record(loss)
    T.backward(loss, tape)
    first = x.grad.copy()
    T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_backward_non_scalar_raises():
    x = param([1.0, 2.0])
    with pytest.raises(ShapeError):
        T.backward(x * x)


def test_tape_is_topological():
    a = param([1.0])
    b = a * a
    c = b + a
    loss = T.tsum(c * b)
    nodes = T.Tape.record(loss).nodes
    pos = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert len(pos) == len(nodes)


def test_shared_subexpression_gradient():
    x = param([3.0])
    y = x * x
    T.backward(T.tsum(y + y * x))  # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [6.0 + 27.0])


def test_no_grad_builds_no_graph():
    x = param([1.0])
    with T.no_grad():
        y = x * x
    assert not y.requires_grad and y._parents == ()


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 6, 6, 3)).astype(np.float32)
    k = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    outs = [T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(4, np.float32))).data for _ in range(2)]
    np.testing.assert_array_equal(*outs)


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_sum_of_squares(rng):
    x = param(rng.normal(size=(3, 4)))
    assert T.grad_check(lambda t: T.tsum(t * t), x) < 1e-4


def test_grad_check_linear(rng):
    w = Tensor(rng.normal(size=(3, 4)))
    x = param(rng.normal(size=(3, 4)))
    assert T.grad_check(lambda t: T.tsum(t * w), x) < 1e-6


def test_grad_check_detects_wrong_gradient(rng):
    x = param(rng.normal(size=4))

    def bad(t):
        # forward t^2, backward claims 3t
        return T.tsum(T._make(t.data**2, (t,), lambda g: (g * 3 * t.data,), "bad"))

    assert T.grad_check(bad, x) > 0.1


def test_grad_check_restores_input(rng):
    data = rng.normal(size=5)
    x = param(data.copy())
    T.grad_check(lambda t: T.tsum(t * t), x)
    np.testing.assert_array_equal(x.data, data)
    assert x.grad is None
