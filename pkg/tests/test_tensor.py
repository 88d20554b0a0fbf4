import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfattn import tensor as T
from sfattn.tensor import Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    with T.precision("float64"):
        yield


# ---------------------------------------------------------------- creation

def test_zeros():
    t = T.zeros((2, 2))
    assert t.shape == (2, 2)
    assert np.all(t.data == 0)


def test_constant_fill():
    t = T.full((3,), 1.0)
    np.testing.assert_array_equal(t.data, [1, 1, 1])


def test_uniform_deterministic():
    a = T.uniform((2,), -1, 1, seed=7)
    b = T.uniform((2,), -1, 1, seed=7)
    np.testing.assert_array_equal(a.data, b.data)


def test_from_data_length_mismatch():
    with pytest.raises(T.ShapeError):
        T.from_data((2, 2), [1.0, 2.0, 3.0])


def test_bad_extent():
    with pytest.raises(T.ShapeError):
        T.zeros((0, 3))


def test_requires_grad_defaults_false():
    assert not T.zeros((2,)).requires_grad


# ------------------------------------------------------------- elementwise

def test_sigmoid_midpoint():
    out = T.sigmoid(T.zeros((4,)))
    np.testing.assert_allclose(out.data, 0.5)


def test_tanh_odd():
    assert T.tanh(T.zeros((1,))).data[0] == 0.0


def test_mul_scalar_broadcast():
    out = T.mul(T.tensor([1.0, 2.0, 3.0]), T.tensor([2.0]))
    np.testing.assert_array_equal(out.data, [2, 4, 6])


def test_incompatible_shapes():
    with pytest.raises(T.ShapeError):
        T.add(T.zeros((3,)), T.zeros((2,)))


def test_broadcast_backward_sums():
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = T.tensor([10.0, 20.0], requires_grad=True)
    out = T.reduce("sum", T.reduce("sum", T.mul(a, b), axis=0), axis=1,
                   keepdims=False)
    T.backward(out)
    np.testing.assert_array_equal(b.grad, [4.0, 6.0])  # column sums of a


def test_elementwise_dispatch():
    out = T.elementwise("add", T.ones((2,)), T.ones((2,)))
    np.testing.assert_array_equal(out.data, [2, 2])
    with pytest.raises(ValueError):
        T.elementwise("frobnicate", T.ones((2,)))


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    x = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(T.tensor(np.eye(2)), x)
    np.testing.assert_array_equal(out.data, x.data)


def test_matmul_hand_dot():
    out = T.matmul(T.tensor([[1.0, 2.0]]), T.tensor([[3.0], [4.0]]))
    assert out.data[0, 0] == 11.0


def test_matmul_inner_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))


def test_matmul_grad_vs_fd():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((3, 4))
    b = Tensor(rng.standard_normal((4, 2)))

    def f(a):
        return T.reduce("sum", T.reshape(T.matmul(a, b), (6, 1)), axis=0,
                        keepdims=False)

    a = Tensor(a0.copy(), requires_grad=True)
    T.backward(f(a))
    fd = T.finite_diff_gradient(f, Tensor(a0))
    assert T.max_rel_error(a.grad, fd) < 1e-6


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 2, 4))
    w = rng.standard_normal((4, 5))
    out = T.matmul(Tensor(a), Tensor(w))
    for i in range(3):
        np.testing.assert_allclose(out.data[i], a[i] @ w)


# -------------------------------------------------------------- reductions

def test_mean_of_constant():
    out = T.reduce("mean", T.full((5, 3), 2.5), axis=0)
    np.testing.assert_allclose(out.data, 2.5)


def test_max_tie_break_lowest_index():
    x = T.tensor([1.0, 5.0, 5.0], requires_grad=True)
    T.backward(T.reduce("max", x, axis=0, keepdims=False))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_masked_mean_excludes_pads():
    out = T.reduce("mean", T.tensor([2.0, 4.0, 999.0]), axis=0,
                   mask=[True, True, False], keepdims=False)
    assert out.item() == 3.0


def test_masked_max_ignores_invalid():
    out = T.reduce("max", T.tensor([1.0, 99.0, 2.0]), axis=0,
                   mask=[True, False, True], keepdims=False)
    assert out.item() == 2.0


def test_degenerate_mask():
    with pytest.raises(T.DegenerateMaskError):
        T.reduce("mean", T.tensor([1.0, 2.0]), axis=0, mask=[False, False])


def test_masked_reduction_never_reads_masked():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((4, 3))
    mask = [True, False, True, True]

    def run(arr):
        x = Tensor(arr, requires_grad=True)
        s = T.add(T.reduce("mean", x, axis=0, mask=mask),
                  T.reduce("max", x, axis=0, mask=mask))
        out = T.reduce("sum", s, axis=1, keepdims=False)
        out2 = T.reduce("sum", out, axis=0, keepdims=False)
        T.backward(out2)
        return out2.data.copy(), x.grad.copy()

    v1, g1 = run(base.copy())
    perturbed = base.copy()
    perturbed[1, :] += 1e6
    v2, g2 = run(perturbed)
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


# ----------------------------------------------------------------- softmax

def test_softmax_symmetry():
    out = T.softmax(T.tensor([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_direct_values():
    out = T.softmax(T.tensor([1.0, 0.0]), axis=0)
    e = np.e
    np.testing.assert_allclose(out.data, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)


def test_softmax_no_overflow():
    out = T.softmax(T.tensor([1000.0, 1000.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6),
       st.floats(-50, 50))
def test_softmax_shift_invariance_and_normalization(vals, c):
    x = np.array(vals)
    a = T.softmax(Tensor(x), axis=0).data
    b = T.softmax(Tensor(x + c), axis=0).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert abs(a.sum() - 1.0) < 1e-9
    assert np.all((a > 0) & (a < 1))


# ---------------------------------------------------------- concat / stack

def test_concat_shape_law():
    out = T.concat([T.zeros((4, 3)), T.zeros((4, 2))], axis=1)
    assert out.shape == (4, 5)


def test_concat_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.concat([T.zeros((4, 3)), T.zeros((5, 2))], axis=1)


def test_stack_content_and_shape():
    x = T.tensor([[1.0, 2.0]])
    out = T.stack([x, x, x])
    assert out.shape == (3, 1, 2)
    for i in range(3):
        np.testing.assert_array_equal(out.data[i], x.data)


def test_stack_backward_ones():
    xs = [Tensor(np.ones((2, 3)), requires_grad=True) for _ in range(3)]
    s = T.stack(xs)
    flat = T.reshape(s, (s.size, 1))
    total = T.reduce("sum", flat, axis=0, keepdims=False)
    T.backward(T.reduce("sum", total, axis=0, keepdims=False))
    for x in xs:
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_take_and_transpose_roundtrip():
    rng = np.random.default_rng(5)
    arr = rng.standard_normal((2, 3, 4))
    x = Tensor(arr, requires_grad=True)
    y = T.transpose(x, (1, 0, 2))
    row = T.take(y, 1, axis=0)
    np.testing.assert_array_equal(row.data, arr[:, 1, :])


# ---------------------------------------------------------------- backward

def _scalar(x):
    flat = T.reshape(x, (x.size, 1))
    s = T.reduce("sum", flat, axis=0, keepdims=False)
    return T.reduce("sum", s, axis=0, keepdims=False)


def test_backward_linear():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(_scalar(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    T.backward(_scalar(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_non_scalar_rejected():
    x = T.ones((3,), requires_grad=True)
    with pytest.raises(T.GraphError):
        T.backward(T.mul(x, x))


def test_double_backward_rejected():
    x = T.ones((2,), requires_grad=True)
    loss = _scalar(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(T.GraphError):
        T.backward(loss)


def test_no_silent_accumulation():
    x = T.ones((2,), requires_grad=True)
    T.backward(_scalar(T.mul(x, x)))
    with pytest.raises(T.GraphError):
        T.backward(_scalar(T.mul(x, x)))
    x.zero_grad()
    T.backward(_scalar(T.mul(x, x)))  # fine after reset


def test_multiple_consumers_sum():
    x = T.tensor([3.0], requires_grad=True)
    y = T.add(T.mul(x, x), T.mul(x, x))
    T.backward(T.reduce("sum", y, axis=0, keepdims=False))
    np.testing.assert_allclose(x.grad, [12.0])


def _random_composite(seed):
    """A composite graph touching most ops, as a function of one input."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((4, 3)))
    c = Tensor(rng.standard_normal((5, 3)))

    def f(x):
        h = T.tanh(T.matmul(x, w))
        g = T.sigmoid(T.add(h, c))
        m = T.softmax(T.mul(g, h), axis=1)
        cat = T.concat([m, g], axis=1)
        red = T.add(T.reduce("mean", cat, axis=0),
                    T.reduce("max", cat, axis=1))
        return _scalar(T.mul(red, red))

    return f, rng.standard_normal((5, 4))


@pytest.mark.parametrize("seed", range(20))
def test_composite_grads_match_fd(seed):
    f, x0 = _random_composite(seed)
    x = Tensor(x0.copy(), requires_grad=True)
    T.backward(f(x))
    fd = T.finite_diff_gradient(f, Tensor(x0))
    assert T.max_rel_error(x.grad, fd) < 1e-5


def test_determinism_same_seed():
    def run():
        f, x0 = _random_composite(11)
        x = Tensor(x0.copy(), requires_grad=True)
        loss = f(x)
        T.backward(loss)
        return loss.data.copy(), x.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


# ----------------------------------------------------------- fd oracle

def test_fd_of_sum_is_ones():
    fd = T.finite_diff_gradient(_scalar, Tensor(np.arange(4.0)))
    np.testing.assert_allclose(fd, np.ones(4), atol=1e-9)


def test_fd_of_tanh_at_zero():
    fd = T.finite_diff_gradient(lambda x: _scalar(T.tanh(x)), T.zeros((3,)))
    np.testing.assert_allclose(fd, np.ones(3), atol=1e-9)


def test_fd_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.finite_diff_gradient(_scalar, T.zeros((2,)), eps=0.0)


# ----------------------------------------------------------- precision

def test_precision_switch():
    with T.precision("float32"):
        assert T.zeros((1,)).data.dtype == np.float32
    assert T.zeros((1,)).data.dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("float16")


def test_detach_cuts_graph():
    x = T.ones((2,), requires_grad=True)
    y = T.mul(x, x).detach()
    assert not y.requires_grad and y.node is None
