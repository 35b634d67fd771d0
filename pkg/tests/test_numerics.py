import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastmvs import numerics as nx
from contrastmvs.gradsuite import CASES
from contrastmvs.numerics import Tensor


def test_add_componentwise():
    np.testing.assert_array_equal(nx.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data,
                                  [4.0, 6.0])


def test_mul_by_zero_annihilates_value_and_gradient():
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    out = nx.elementwise("mul", x, Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)
    nx.tsum(out).backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_log_half_matches_math_library():
    assert nx.elementwise("log", Tensor([0.5])).data[0] == pytest.approx(math.log(0.5), abs=1e-15)
    assert nx.log(Tensor([0.5])).data[0] == pytest.approx(-0.693147, abs=1e-6)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_log_rejects_non_positive(bad):
    with pytest.raises(nx.DomainError):
        nx.log(Tensor([1.0, bad]))


def test_shape_mismatch_raises():
    with pytest.raises(nx.ShapeError):
        nx.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_unknown_elementwise_kind():
    with pytest.raises(ValueError):
        nx.elementwise("tanh", Tensor([1.0]))


def test_relu_and_pow2_values():
    x = Tensor([-1.0, 0.5, 2.0])
    np.testing.assert_array_equal(nx.elementwise("relu", x).data, [0.0, 0.5, 2.0])
    np.testing.assert_array_equal(nx.elementwise("pow2", x).data, [1.0, 0.25, 4.0])


def test_mean_all_axes():
    assert nx.reduce("mean", Tensor([1.0, 3.0])).data == 2.0


def test_softmax_output_sums_to_one():
    p = nx.softmax(Tensor(np.random.default_rng(0).normal(size=7)), axis=0)
    assert abs(nx.reduce("sum", p).data - 1.0) < 1e-12


def test_max_with_argmax():
    val, idx = nx.reduce("max", Tensor([0.1, 0.7, 0.2]), 0)
    assert val.data == 0.7 and idx == 1


def test_max_gradient_goes_to_argmax_only():
    x = Tensor([[0.1, 0.7, 0.2], [0.9, 0.0, 0.3]], requires_grad=True)
    val, idx = nx.max_with_argmax(x, 1)
    nx.tsum(val).backward()
    np.testing.assert_array_equal(idx, [1, 0])
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_empty_reduction_raises():
    with pytest.raises(nx.ShapeError):
        nx.tsum(Tensor(np.zeros((0, 3))), axis=0)
    with pytest.raises(nx.ShapeError):
        nx.mean(Tensor(np.zeros((2, 0))), axis=1)


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(4)), 0).data, [0.25] * 4, atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, math.log(3.0)]), 0).data, [0.25, 0.75],
                               atol=1e-15)


def test_softmax_is_stable_for_large_scores():
    p = nx.softmax(Tensor([1000.0, 1000.0 + math.log(3.0)]), 0).data
    np.testing.assert_allclose(p, [0.25, 0.75], atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(nx.NonFiniteError):
        nx.softmax(Tensor([0.0, np.inf]), 0)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=5)
    rep = nx.gradcheck(lambda x: nx.tsum(nx.softmax(x, 0) * w), [rng.normal(size=5)])
    assert rep.worst <= 1e-6


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 5, 6))
    w = np.zeros((2, 2, 1, 1))
    w[0, 0] = w[1, 1] = 1.0
    np.testing.assert_array_equal(nx.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv2d_all_ones_on_constant():
    out = nx.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data[0, 2, 2] == 9.0
    assert out.data[0, 0, 0] == 4.0  # zero padding at the corner


def test_conv2d_gradient_small():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 5, 5))
    rep = nx.gradcheck(lambda x, k: nx.tsum(nx.conv2d(x, k) * w),
                       [rng.normal(size=(1, 5, 5)), rng.normal(size=(2, 1, 3, 3))])
    assert rep.worst <= 1e-6


def test_conv2d_matches_direct_cross_correlation():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6, 7))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = nx.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 3, 4))
    for o in range(3):
        for i in range(3):
            for j in range(4):
                ref[o, i, j] = (xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_conv_errors():
    with pytest.raises(nx.ShapeError):
        nx.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))
    with pytest.raises(nx.ShapeError):
        nx.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding=0)


def test_gradcheck_square_example():
    rep = nx.gradcheck(lambda x: nx.tsum(x * x), [np.array([1.0, 2.0])])
    assert rep.worst <= 1e-8
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.tsum(x * x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_gradcheck_constant_function_has_zero_gradient():
    x = Tensor(np.random.default_rng(0).normal(size=6), requires_grad=True)
    nx.tsum(nx.softmax(x, 0)).backward()
    assert np.abs(x.grad).max() < 1e-15
    rep = nx.gradcheck(lambda x: nx.tsum(nx.softmax(x, 0)), [x.data])
    # no gradient scale to be relative to: both sides must vanish absolutely
    assert rep.max_abs_err["x0"] <= 1e-9


def test_gradcheck_flags_wrong_gradient():
    def bad_square(a):
        # value a^2, gradient reported as a
        return nx.tsum(nx.mul(a, a.detach()) * 1.0)

    assert nx.gradcheck(bad_square, [np.array([1.0, 2.0, -3.0])]).worst > 0.1


def test_gradcheck_non_finite_raises():
    with pytest.raises(nx.NonFiniteError):
        nx.gradcheck(lambda a: nx.tsum(a * np.inf), [np.ones(2)])


def test_gradcheck_shrinks_step_across_kinks():
    # relu kink within h of the input: the step must shrink, not pollute the result
    x = np.array([3e-6, -1.0, 2.0])
    rep = nx.gradcheck(lambda a: nx.tsum(nx.relu(a)), [x])
    assert rep.step_shrinks > 0
    assert rep.worst <= 1e-8


def test_backward_is_deterministic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))

    def grads():
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        nx.tsum(nx.pow2(nx.relu(nx.conv2d(xt, kt, stride=2)))).backward()
        return xt.grad, kt.grad

    a, b = grads(), grads()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_backward_populates_all_reachable_leaves():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    c = Tensor([5.0, 6.0])
    nx.tsum(a * b + a * c).backward()
    np.testing.assert_array_equal(a.grad, [8.0, 10.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])
    assert c.grad is None


def test_no_grad_builds_no_graph():
    a = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        out = a * 2.0
    assert not out.requires_grad


def test_deep_graph_does_not_overflow_recursion():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 1e-3
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_bilinear_sample_mask_and_zero_fill():
    src = Tensor(np.arange(12.0).reshape(1, 3, 4))
    u = np.array([0.0, 3.0, 3.0001, -0.1, 1.5])
    v = np.array([0.0, 2.0, 1.0, 1.0, 0.5])
    out, mask = nx.bilinear_sample(src, u, v)
    np.testing.assert_array_equal(mask, [True, True, False, False, True])
    np.testing.assert_allclose(out.data[0], [0.0, 11.0, 0.0, 0.0, 3.5])


def test_resize_bilinear_constant_and_identity():
    x = np.random.default_rng(0).normal(size=(2, 5, 6))
    np.testing.assert_allclose(nx.resize_bilinear(Tensor(x), (5, 6)).data, x, atol=1e-15)
    np.testing.assert_allclose(nx.resize_bilinear(Tensor(np.full((3, 4), 2.5)), (6, 8)).data, 2.5)


# ---------------------------------------------------------------- properties

ELEMENTWISE = ["add", "sub", "mul", "div", "neg", "log", "sqrt", "exp", "pow2", "relu", "abs",
               "clamp", "sum", "mean", "max", "softmax", "take", "upsample_nearest2",
               "resize_bilinear", "bilinear_sample", "soft_normalize"]


@pytest.mark.parametrize("name", ELEMENTWISE)
@settings(max_examples=20, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**31 - 1))
def test_op_gradients_match_finite_differences(name, seed):
    f, inputs, max_coords = CASES[name](np.random.default_rng(seed))
    assert nx.gradcheck(f, inputs, max_coords=max_coords).worst <= 1e-5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(values):
    p = nx.softmax(Tensor(values), 0).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert abs(p.sum() - 1.0) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
def test_broadcast_gradient_unbroadcasts(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(rows, cols)), requires_grad=True)
    b = Tensor(rng.normal(size=(cols,)), requires_grad=True)
    nx.tsum(a * b).backward()
    assert b.grad.shape == (cols,)
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0), atol=1e-12)


def test_relu_propagates_nan():
    out = nx.relu(Tensor([np.nan, -1.0, 2.0])).data
    assert np.isnan(out[0]) and out[1] == 0.0 and out[2] == 2.0


def test_no_grad_is_per_thread():
    import threading

    barrier = threading.Barrier(2)
    seen = []

    def worker():
        with nx.no_grad():
            barrier.wait()  # both threads inside no_grad at once
            seen.append(nx.grad_enabled())
            barrier.wait()

    threads = [threading.Thread(target=worker) for _ in range(2)]
    with nx.no_grad():
        pass
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert seen == [False, False]
    assert nx.grad_enabled()
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
