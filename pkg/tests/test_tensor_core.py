import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cinet.autograd import DomainError, GraphError, NonFiniteError, ShapeError, Tensor, conv2d, grad_check, ops


def naive_conv(x, k, b, stride, dilation, groups):
    """Direct loop convolution with "same" padding, written without numpy tricks."""
    cin, h, w = x.shape
    cout, cin_g, kh, kw = k.shape
    pad = ((kh - 1) * dilation) // 2
    oh = (h + 2 * pad - ((kh - 1) * dilation + 1)) // stride + 1
    ow = (w + 2 * pad - ((kw - 1) * dilation + 1)) // stride + 1
    out = np.zeros((cout, oh, ow))
    per_group = cout // groups
    for o in range(cout):
        g = o // per_group
        for i in range(oh):
            for j in range(ow):
                acc = b[o] if b is not None else 0.0
                for c in range(cin_g):
                    for u in range(kh):
                        for v in range(kw):
                            r = i * stride + u * dilation - pad
                            s = j * stride + v * dilation - pad
                            if 0 <= r < h and 0 <= s < w:
                                acc += k[o, c, u, v] * x[g * cin_g + c, r, s]
                out[o, i, j] = acc
    return out


def test_elementwise_examples():
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(ops.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    x = Tensor(3.0, requires_grad=True)
    ops.mul(x, x).backward()
    assert x.grad == 6.0


def test_elementwise_dispatch_rejects_unknown_kind():
    with pytest.raises(ValueError):
        ops.elementwise("tanh", Tensor(1.0))


def test_matmul_examples():
    b = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    assert ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    w = rng.normal(size=(5, 3))
    assert grad_check(lambda t: ops.sum(ops.mul(ops.matmul(t, Tensor(b)), w)), a) < 1e-6
    assert grad_check(lambda t: ops.sum(ops.mul(ops.matmul(Tensor(a), t), w)), b) < 1e-6


def test_conv_identity_and_zero_kernels():
    x = np.random.default_rng(1).normal(size=(1, 5, 5))
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    out = conv2d(Tensor(x), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(2)))
    assert not out.data.any()


@pytest.mark.parametrize(
    "cin,cout,k,stride,dilation,groups",
    [(1, 1, 3, 1, 2, 1), (2, 3, 3, 1, 1, 1), (3, 4, 3, 2, 1, 1), (4, 4, 3, 1, 1, 4), (4, 6, 3, 1, 2, 2)],
)
def test_conv_matches_loop_reference(cin, cout, k, stride, dilation, groups):
    rng = np.random.default_rng(cin * 10 + cout)
    x = rng.normal(size=(cin, 8, 8))
    kern = rng.normal(size=(cout, cin // groups, k, k))
    b = rng.normal(size=cout)
    got = conv2d(Tensor(x), Tensor(kern), Tensor(b), stride=stride, dilation=dilation, groups=groups).data
    np.testing.assert_allclose(got, naive_conv(x, kern, b, stride, dilation, groups), rtol=0, atol=1e-12)


def test_depthwise_conv_is_per_channel():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 6, 6))
    kern = rng.normal(size=(3, 1, 3, 3))
    whole = conv2d(Tensor(x), Tensor(kern), groups=3).data
    for c in range(3):
        single = conv2d(Tensor(x[c:c + 1]), Tensor(kern[c:c + 1])).data
        np.testing.assert_array_equal(whole[c], single[0])


def test_conv_rejects_bad_group_split():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))), groups=2)


def test_structural_examples():
    up = ops.upsample2x(Tensor(np.full((2, 3, 4), 1.7))).data
    assert up.shape == (2, 6, 8)
    np.testing.assert_allclose(up, 1.7, rtol=0, atol=1e-15)
    assert ops.concat_channels([Tensor(np.ones((2, 4, 4))), Tensor(np.ones((3, 4, 4)))]).shape == (5, 4, 4)
    assert ops.avgpool2(Tensor([[[1.0, 3.0], [5.0, 7.0]]])).data.tolist() == [[[4.0]]]
    assert ops.structural("avgpool2", Tensor(np.ones((1, 2, 2)))).shape == (1, 1, 1)
    np.testing.assert_array_equal(ops.nearest_downsample(np.arange(16).reshape(4, 4), 2), [[5, 7], [13, 15]])


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_sigmoid_single_weight_gradient():
    x = 0.7
    w = Tensor(-1.3, requires_grad=True)
    ops.sigmoid(ops.scale(w, x)).backward()
    s = 1 / (1 + np.exp(1.3 * 0.7))
    assert w.grad == pytest.approx(s * (1 - s) * x, rel=1e-14)


def test_shared_subexpression_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = ops.mul(x, x)
    ops.add(y, y).backward()
    assert x.grad == 8.0


def test_second_backward_on_consumed_graph_fails():
    x = Tensor(1.0, requires_grad=True)
    y = ops.exp(x)
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ops.exp(x).backward()


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ops.exp(Tensor(800.0))
    with pytest.raises(DomainError):
        ops.div(Tensor(1.0), Tensor(0.0))


def test_grad_check_quadratic_is_exact():
    x = np.random.default_rng(3).normal(size=10)
    assert grad_check(lambda t: ops.sum(ops.square(t)), x) < 1e-8


def test_grad_check_detects_a_wrong_derivative(monkeypatch):
    monkeypatch.setattr(ops, "_sigmoid_grad", lambda out, g: g * out)
    x = np.random.default_rng(4).normal(size=5)
    assert grad_check(lambda t: ops.sum(ops.sigmoid(t)), x) > 1e-2


def test_grad_check_step_bounds():
    with pytest.raises(ValueError):
        grad_check(lambda t: ops.sum(t), np.ones(2), h=1e-1)


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x, k = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = conv2d(Tensor(x), Tensor(k), dilation=2).data
    b = conv2d(Tensor(x), Tensor(k), dilation=2).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 6), elements=st.floats(-3, 3)))
def test_smooth_ops_pass_grad_check(x):
    f = lambda t: ops.sum(ops.mul(ops.sigmoid(t), ops.exp(ops.scale(t, 0.5))))  # noqa: E731
    assert grad_check(f, x) < 1e-6


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_log_softmax_normalises(x):
    p = np.exp(ops.log_softmax(Tensor(x), axis=-1).data)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
