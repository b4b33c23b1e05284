import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dispfuse import tensor as T
from dispfuse.tensor import Tensor, grad_check


def test_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1, 0)
    np.testing.assert_array_equal(y.data, x)


def test_ones_counting():
    y = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), 1, 0)
    assert y.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(y.data, 9.0)


def test_conv_shape_and_fd(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    assert T.conv2d(Tensor(x), w, 2, 1).shape == (2, 4, 4, 4)
    assert grad_check(lambda t: T.conv2d(t, w, 2, 1).sum(), x) <= 1e-6


def _conv_loop(x, w, stride, pad):
    """Direct nested-loop cross-correlation."""
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, co, ho, wo))
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o])
    return out


@settings(max_examples=25, deadline=None)
@given(ci=st.integers(1, 5), co=st.integers(1, 5), k=st.sampled_from([1, 3, 4]), stride=st.integers(1, 2),
       pad=st.integers(0, 1), h=st.integers(4, 7), seed=st.integers(0, 2**16))
def test_conv_matches_loop(ci, co, k, stride, pad, h, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, ci, h, h + 1))
    w = r.normal(size=(co, ci, k, k))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride, pad).data, _conv_loop(x, w, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ValueError, match="channels"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="larger"):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ValueError, match="stride"):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=0)


def test_backward_linear_and_quadratic():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad.data, np.ones((2, 2)))
    y = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad.data, [2.0, 4.0, 6.0])


def test_mean_sigmoid_fd(rng):
    assert grad_check(lambda t: t.sigmoid().mean(), rng.normal(size=(3, 4))) <= 1e-6


def test_backward_needs_scalar():
    with pytest.raises(ValueError, match="scalar"):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_grad_check_sum_is_exact(rng):
    assert grad_check(lambda t: t.sum(), rng.normal(size=(5, 2))) < 1e-8


def test_grad_check_detects_planted_fault(rng):
    def scaled_square(t):
        def backward(g, needs):
            return (1.1 * 2 * t.data * g,)

        return T.custom_op(t.data**2, (t,), backward, "bad_square").sum()

    x = rng.uniform(0.5, 2.0, size=6)
    assert grad_check(scaled_square, x) == pytest.approx(0.1, abs=1e-4)


def test_grad_check_propagates_nan():
    assert np.isnan(grad_check(lambda t: (t * np.nan).sum(), np.ones(3)))


# -- every registered op against finite differences -------------------------------

def _positive(r, shape):
    return r.uniform(0.5, 1.5, size=shape) * r.choice([-1.0, 1.0], size=shape)


def _cases(r):
    """(op name, function of one tensor, input) for a random instance."""
    a = r.normal(size=(2, 3))
    c = Tensor(r.normal(size=(2, 3)))
    row = Tensor(r.normal(size=(3,)))
    g4 = r.normal(size=(2, 3, 4, 5))
    w33 = Tensor(r.normal(size=(2, 3, 3, 3)))
    w_t = Tensor(r.normal(size=(3, 2, 4, 4)))
    gy = Tensor(r.normal(size=(2, 2, 2, 3)))
    gain = Tensor(r.uniform(0.5, 1.5, size=3))
    shift = Tensor(r.normal(size=3))
    probe = r.normal(size=(2, 3, 4, 5))
    return [
        ("add", lambda t: (T.add(t, row) * c).sum(), a),
        ("mul", lambda t: T.mul(t, t * c).sum(), a),
        ("neg", lambda t: (T.neg(t) * c).sum(), a),
        ("reciprocal", lambda t: (T.reciprocal(t) * c).sum(), _positive(r, (2, 3))),
        ("power", lambda t: (T.power(t, 3.0) * c).sum(), a),
        ("exp", lambda t: (T.exp(t) * c).sum(), a),
        ("log", lambda t: (T.log(t) * c).sum(), r.uniform(0.5, 2.0, (2, 3))),
        ("abs", lambda t: (T.tabs(t) * c).sum(), _positive(r, (2, 3))),
        ("relu", lambda t: (T.relu(t) * c).sum(), _positive(r, (2, 3))),
        ("sigmoid", lambda t: (T.sigmoid(t) * c).sum(), 3 * a),
        ("sum", lambda t: (T.tsum(t, axis=1) * row[:2]).sum(), a),
        ("mean", lambda t: (T.mean(t, axis=0) ** 2).sum(), a),
        ("reshape", lambda t: (T.reshape(t, (3, 2)) * Tensor(np.arange(6.0).reshape(3, 2))).sum(), a),
        ("broadcast_to", lambda t: (T.broadcast_to(t, (4, 2, 3)) ** 2).sum(), a),
        ("getitem", lambda t: (T.getitem(t, (slice(None), slice(1, 3))) ** 2).sum(), a),
        ("concat", lambda t: (T.concat([t, t * 2.0, c], axis=0) ** 2).sum(), a),
        ("l2_norm", lambda t: (T.l2_norm(t, axis=1) * Tensor([1.0, 2.0])).sum(), a),
        ("conv2d", lambda t: (T.conv2d(t, w33, 1, 1) ** 2).sum(), g4),
        ("conv_transpose2d", lambda t: (T.conv_transpose2d(t, w_t, 2, 1, (4, 6)) ** 2).sum(), gy.data.repeat(3, 1)[:, :3]),
        ("conv2d_weight", lambda t: (T.conv2d_weight(Tensor(g4), t, 1, 1, (3, 3)) ** 2).sum(),
         r.normal(size=(2, 2, 4, 5))),
        ("batch_norm_train", lambda t: (T.batch_norm_train(t, gain, shift)[0] * Tensor(probe)).sum(), g4),
    ]


def test_every_op_has_a_case():
    assert {name for name, _, _ in _cases(np.random.default_rng(0))} == set(T.OPS)


@settings(max_examples=4, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_registered_ops_match_finite_differences(seed):
    for name, f, x in _cases(np.random.default_rng(seed)):
        assert grad_check(f, x) <= 1e-5, name


def test_second_order_through_conv_and_sigmoid(rng):
    w = Tensor(rng.normal(size=(2, 1, 3, 3)))
    x0 = rng.normal(size=(1, 1, 5, 5))

    def f(wt):
        x = Tensor(x0, requires_grad=True)
        y = T.conv2d(x, wt, 1, 1).sigmoid().mean()
        (g,) = T.grad(y, [x], create_graph=True)
        return ((T.l2_norm(g, axis=(1, 2, 3)) - 1.0) ** 2.0).sum()

    assert grad_check(f, w.data) <= 1e-5


def test_first_order_ops_refuse_create_graph(rng):
    x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
    y = T.batch_norm_train(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))[0]
    with pytest.raises(RuntimeError, match="does not support differentiating"):
        T.grad((y * y).sum(), [x], create_graph=True)


def test_accumulation_is_additive(rng):
    x0 = rng.normal(size=(3, 4))
    c = rng.normal(size=(3, 4))

    def a(t):
        return (t * t * c).sum()

    def b(t):
        return t.sigmoid().sum()

    x = Tensor(x0, requires_grad=True)
    (a(x) + b(x)).backward()
    both = x.grad.data.copy()
    y = Tensor(x0, requires_grad=True)
    a(y).backward()
    b(y).backward()
    np.testing.assert_allclose(both, y.grad.data, rtol=1e-14, atol=1e-14)


def test_backward_reaches_each_leaf_once_per_call(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    y = x * 2.0
    (y + y + x).sum().backward()
    np.testing.assert_array_equal(x.grad.data, np.full(4, 5.0))


def test_forward_backward_bitwise_deterministic(rng):
    x0 = rng.normal(size=(2, 3, 8, 8))
    w0 = rng.normal(size=(4, 3, 3, 3))

    def run():
        x = Tensor(x0, requires_grad=True)
        w = Tensor(w0, requires_grad=True)
        y = T.conv2d(x, w, 2, 1).relu().sigmoid().mean()
        y.backward()
        return y.data.tobytes() + x.grad.data.tobytes() + w.grad.data.tobytes()

    assert run() == run()


def test_precision_switch():
    with T.precision("f32"):
        assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("f16")


def test_no_grad_builds_no_graph(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
