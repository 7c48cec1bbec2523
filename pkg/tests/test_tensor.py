import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segancat.errors import ShapeError
from segancat.tensor import (
    Parameter,
    Tensor,
    activation,
    batch_norm,
    concat_channels,
    conv2d,
    elementwise_mul,
    grad_check,
    grads_disabled,
    leaky_relu,
    no_grad,
    relu,
    sigmoid,
    upsample_bilinear2x,
    upsample_conv3x3,
)


# independent oracles ----------------------------------------------------------------

def direct_conv(x, w, b, stride, padding):
    """Nested-loop cross-correlation with TF-style 'same' padding (extra at bottom/right)."""
    n, h, wd, c = x.shape
    kh, kw, _, k = w.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-wd // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - wd, 0)
        top, left = ph // 2, pw // 2
    else:
        ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
        top = left = 0
    out = np.zeros((n, ho, wo, k))
    for bi in range(n):
        for i in range(ho):
            for j in range(wo):
                for f in range(k):
                    s = 0.0 if b is None else b[f]
                    for di in range(kh):
                        for dj in range(kw):
                            r, q = i * stride + di - top, j * stride + dj - left
                            if 0 <= r < h and 0 <= q < wd:
                                s += float(np.dot(x[bi, r, q, :], w[di, dj, :, f]))
                    out[bi, i, j, f] = s
    return out


def bilinear_oracle(x):
    """Per-pixel bilinear 2x upsampling, sample centres at (o + 0.5) / 2 - 0.5, edges clamped."""
    h, w = x.shape[:2]

    def taps(o, n):
        src = max((o + 0.5) / 2 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        return [(i0, 1 - t), (i1, t)]

    out = np.zeros((2 * h, 2 * w) + x.shape[2:])
    for oi in range(2 * h):
        for oj in range(2 * w):
            for (i, a) in taps(oi, h):
                for (j, bw) in taps(oj, w):
                    out[oi, oj] += a * bw * x[i, j]
    return out


# conv2d ------------------------------------------------------------------------------

def test_conv_zero_input_passes_bias():
    x = Tensor(np.zeros((8, 8, 1)))
    w = Tensor(np.random.default_rng(0).normal(size=(3, 3, 1, 1)))
    out = conv2d(x, w, Tensor(np.array([0.7])), 1, "same")
    np.testing.assert_allclose(out.data, 0.7)


def test_conv_ramp_matches_loop_oracle():
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    w = np.ones((4, 4, 1, 1))
    out = conv2d(Tensor(x), Tensor(w), None, 2, "same").data
    assert out.shape == (1, 2, 2, 1)
    np.testing.assert_allclose(out, direct_conv(x, w, None, 2, "same"))
    # padding 1 on every side: windows cover rows 0..2 and 1..3
    np.testing.assert_allclose(out[0, :, :, 0], [[45, 54], [81, 90]])


def test_conv_desk_shape():
    x = Tensor(np.zeros((160, 160, 4), np.float32))
    w = Tensor(np.zeros((4, 4, 4, 64), np.float32))
    assert conv2d(x, w, None, 2, "same").shape == (80, 80, 64)


@pytest.mark.parametrize("h,w,k,s,pad", [(5, 7, 4, 2, "same"), (6, 6, 3, 1, "same"), (7, 5, 3, 2, "same"),
                                          (6, 7, 3, 1, "valid"), (9, 8, 4, 2, "valid"), (5, 5, 3, 3, "same"),
                                          (1, 1, 4, 2, "same"), (2, 3, 3, 1, "same")])
def test_conv_random_matches_loop_oracle(h, w, k, s, pad):
    rng = np.random.default_rng(h * 100 + w)
    x = rng.normal(size=(2, h, w, 3))
    wt = rng.normal(size=(k, k, 3, 2))
    b = rng.normal(size=2)
    out = conv2d(Tensor(x), Tensor(wt), Tensor(b), s, pad).data
    np.testing.assert_allclose(out, direct_conv(x, wt, b, s, pad), rtol=1e-10, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 256), w=st.integers(1, 256), s=st.integers(1, 3), k=st.sampled_from([1, 2, 3, 4]))
def test_same_padding_extent(h, w, s, k):
    x = Tensor(np.zeros((1, h, w, 1), np.float32))
    out = conv2d(x, Tensor(np.zeros((k, k, 1, 1), np.float32)), None, s, "same")
    assert out.shape == (1, -(-h // s), -(-w // s), 1)


def test_conv_errors():
    x = Tensor(np.zeros((4, 4, 3)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((3, 3, 2, 1))))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((3, 3, 3, 1))), stride=0)
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


# upsampling --------------------------------------------------------------------------

def test_upsample_constant():
    x = np.full((3, 5, 2), 1.25)
    np.testing.assert_array_equal(upsample_bilinear2x(Tensor(x)).data, 1.25)


def test_upsample_single_pixel():
    out = upsample_bilinear2x(Tensor(np.array([[[3.5]]]))).data
    np.testing.assert_array_equal(out, np.full((2, 2, 1), 3.5))


def test_upsample_2x2_oracle():
    x = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    out = upsample_bilinear2x(Tensor(x)).data
    np.testing.assert_allclose(out, bilinear_oracle(x), atol=1e-12)
    np.testing.assert_allclose(out[..., 0], [[0, 0.25, 0.75, 1], [0.5, 0.75, 1.25, 1.5],
                                             [1.5, 1.75, 2.25, 2.5], [2, 2.25, 2.75, 3]])


@pytest.mark.parametrize("h,w", [(1, 3), (3, 4), (5, 2)])
def test_upsample_random_oracle(h, w):
    x = np.random.default_rng(h + w).normal(size=(h, w, 2))
    np.testing.assert_allclose(upsample_bilinear2x(Tensor(x)).data, bilinear_oracle(x), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), c=st.floats(-5, 5, allow_nan=False))
def test_upsample_then_subsample_constant(h, w, c):
    up = upsample_bilinear2x(Tensor(np.full((1, h, w, 1), c))).data
    np.testing.assert_allclose(up[:, ::2, ::2], c, rtol=0, atol=1e-12 * max(1.0, abs(c)))


@pytest.mark.parametrize("h,w", [(1, 1), (1, 4), (2, 2), (3, 5), (6, 4)])
def test_fused_upsample_conv_matches_composition(h, w):
    rng = np.random.default_rng(h * 7 + w)
    x = rng.normal(size=(2, h, w, 3))
    wt, b = rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    fused = upsample_conv3x3(Tensor(x), Tensor(wt), Tensor(b)).data
    ref = direct_conv(bilinear_oracle(x.transpose(1, 2, 0, 3)).transpose(2, 0, 1, 3), wt, b, 1, "same")
    np.testing.assert_allclose(fused, ref, rtol=1e-10, atol=1e-10)


# batch norm ----------------------------------------------------------------------------

def _bn(x, gamma=1.0, beta=0.0, training=True, mean=None, var=None):
    c = x.shape[-1]
    rm = np.zeros(c) if mean is None else mean
    rv = np.ones(c) if var is None else var
    out = batch_norm(Tensor(x), Tensor(np.full(c, gamma)), Tensor(np.full(c, beta)), rm, rv, training)
    return out.data, rm, rv


def test_bn_constant_input():
    out, _, _ = _bn(np.full((2, 3, 3, 2), 4.0))
    np.testing.assert_allclose(out, 0.0)
    out, _, _ = _bn(np.full((2, 3, 3, 2), 4.0), beta=5.0)
    np.testing.assert_allclose(out, 5.0)


def test_bn_two_values():
    out, rm, rv = _bn(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    np.testing.assert_allclose(out.ravel(), [-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)], rtol=1e-12)
    np.testing.assert_allclose(rm, [0.2])
    np.testing.assert_allclose(rv, [0.9 * 1 + 0.1 * 1.0])  # biased batch variance of {1, 3} is 1


def test_bn_infer_uses_running_stats_and_is_deterministic():
    x = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
    mean, var = np.array([0.5, -1.0]), np.array([2.0, 0.25])
    a, m1, v1 = _bn(x, training=False, mean=mean.copy(), var=var.copy())
    b, _, _ = _bn(x, training=False, mean=mean.copy(), var=var.copy())
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, (x - mean) / np.sqrt(var + 1e-5))
    np.testing.assert_array_equal(m1, mean)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), h=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_bn_train_normalises(n, h, seed):
    if n * h * h < 16:
        h = 4
    x = np.random.default_rng(seed).normal(3.0, 2.0, size=(n, h, h, 3))
    out, _, _ = _bn(x)
    assert np.all(np.abs(out.mean(axis=(0, 1, 2))) < 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 1, 2)) - 1) < 1e-3)


def test_bn_channel_mismatch():
    with pytest.raises(ShapeError):
        batch_norm(Tensor(np.zeros((2, 2, 2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                   np.zeros(2), np.ones(2), True)


# activations, concat, masking -------------------------------------------------------------

def test_activations():
    assert leaky_relu(Tensor(np.array([-1.0]))).item() == pytest.approx(-0.3)
    assert sigmoid(Tensor(np.array([0.0]))).item() == 0.5
    np.testing.assert_array_equal(relu(Tensor(np.array([-2.0, 2.0]))).data, [0, 2])
    s = sigmoid(Tensor(np.array([-1e4, 1e4], np.float32))).data
    assert 0 < s[0] and s[1] < 1


def test_activation_derivatives_at_zero():
    x = Tensor(np.zeros(1), requires_grad=True)
    leaky_relu(x).sum().backward()
    assert x.grad[0] == pytest.approx(0.3)
    x = Tensor(np.zeros(1), requires_grad=True)
    relu(x).sum().backward()
    assert x.grad[0] == 0.0
    with pytest.raises(ValueError):
        activation(x, "tanh")


def test_concat():
    a = Tensor(np.ones((3, 3, 4)), requires_grad=True)
    b = Tensor(np.zeros((3, 3, 1)), requires_grad=True)
    out = concat_channels([a, b])
    assert out.shape == (3, 3, 5)
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones((3, 3, 4)))
    assert concat_channels([a]) is a
    with pytest.raises(ShapeError):
        concat_channels([a, Tensor(np.zeros((2, 3, 1)))])


def test_elementwise_mul():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    m = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None]
    np.testing.assert_array_equal(elementwise_mul(Tensor(a), Tensor(m)).data[..., 0], [[0, 2], [3, 0]])
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 4))
    assert np.array_equal(elementwise_mul(Tensor(x), Tensor(np.ones((2, 3, 3, 1)))).data, x)
    np.testing.assert_array_equal(elementwise_mul(Tensor(x), Tensor(np.zeros((2, 3, 3, 1)))).data, 0)
    with pytest.raises(ShapeError):
        elementwise_mul(Tensor(x), Tensor(np.ones((2, 3, 2, 1))))


# autodiff machinery -------------------------------------------------------------------------

def test_grad_check_examples():
    rng = np.random.default_rng(3)
    assert grad_check(lambda x: sigmoid(x).sum(), [rng.normal(size=(3, 3))]).max_error < 1e-6
    w = rng.normal(size=(3, 3, 2, 2))
    f = lambda x: relu(conv2d(conv2d(x, Tensor(w), None, 1, "same"), Tensor(w), None, 2, "same")).sum()
    assert grad_check(f, [rng.normal(size=(1, 5, 5, 2))]).max_error < 1e-5
    lin = lambda x: (x * 3.0).sum()
    assert grad_check(lin, [rng.normal(size=(4,))]).max_error < 1e-9
    with pytest.raises(ShapeError):
        grad_check(lambda x: x * 2.0, [np.ones(3)])


def test_backward_visits_each_node_once():
    calls = []
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    orig = y._backward

    def counting(g):
        calls.append(1)
        return orig(g)

    y._backward = counting
    z = y + y + y * 2.0
    z.sum().backward()
    assert len(calls) == 1
    np.testing.assert_allclose(x.grad, [4 * 2.0 * 2.0])


def test_no_grad_and_grads_disabled():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    p = Parameter("a/b", np.ones(2))
    with grads_disabled([p]):
        assert not p.tensor.requires_grad
    assert p.tensor.requires_grad


def test_grad_shape_matches_data():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    ((x * x).sum(axis=1).mean()).backward()
    assert x.grad.shape == x.shape


def test_parameter_clamp_and_freeze():
    p = Parameter("D/in/conv/w", np.array([0.2, -0.2, 0.01]), clip=(-0.05, 0.05))
    p.clamp_()
    np.testing.assert_array_equal(p.data, [0.05, -0.05, 0.01])
    q = Parameter("D/enc1/conv/w", np.array([0.2]), clip=(-0.05, 0.05))
    q.set_frozen(True)
    q.clamp_()
    assert q.data[0] == 0.2 and not q.tensor.requires_grad
