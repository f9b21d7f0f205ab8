import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdecnn import conv
from pdecnn import layers as L
from pdecnn.conv import ConvBlock
from pdecnn.tensor import ShapeError, make_rng

from conftest import rel


def _sym(r, c, norm=True):
    nw = L.NormWeights(1 + 0.1 * r.standard_normal(c), 0.1 * r.standard_normal(c)) if norm else None
    return L.SymLayerWeights(ConvBlock(r.uniform(-1, 1, (c, c, 3, 3))), nw)


# --- sym layer -----------------------------------------------------------------

def test_sym_zero_conv_gives_zero(rng):
    y = rng.standard_normal((2, 3, 4, 4))
    for act in ("relu", "tanh"):
        w = L.SymLayerWeights(ConvBlock(np.zeros((3, 3, 3, 3))), L.NormWeights.identity(3))
        assert np.array_equal(L.sym_layer(w, y, act), np.zeros_like(y))


def test_sym_identity_linear_is_negation(rng):
    y = rng.standard_normal((2, 1, 4, 4))
    w = L.SymLayerWeights(ConvBlock(np.ones((1, 1, 1, 1))))
    assert np.array_equal(L.sym_layer(w, y, "identity"), -y)


def test_sym_matches_composition(rng):
    w = _sym(rng, 2)
    y = rng.standard_normal((3, 2, 4, 4))
    u = conv.apply(w.conv, y)
    n = L.tv_norm(w.norm, u)
    expect = conv.apply_transpose(w.conv, -1.0 * np.maximum(n, 0))
    assert np.allclose(L.sym_layer(w, y), expect, atol=1e-14)


def test_sym_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        L.sym_layer(_sym(rng, 2), np.zeros((1, 3, 4, 4)))


# --- general layer -----------------------------------------------------------

def test_general_reduces_to_sym(rng):
    w = _sym(rng, 3)
    k2 = ConvBlock(-np.flip(w.conv.weight, axis=(2, 3)).transpose(1, 0, 2, 3))
    g = L.GeneralLayerWeights(w.conv, k2, w.norm)
    y = rng.standard_normal((2, 3, 5, 5))
    assert np.allclose(L.general_layer(g, y), L.sym_layer(w, y), atol=1e-14)


def test_general_zero_stencils(rng):
    g = L.GeneralLayerWeights(ConvBlock(np.zeros((2, 2, 3, 3))), ConvBlock(np.zeros((2, 2, 3, 3))),
                              L.NormWeights(np.ones(2), np.ones(2)))
    assert np.array_equal(L.general_layer(g, rng.standard_normal((1, 2, 4, 4))), np.zeros((1, 2, 4, 4)))


def test_general_matches_composition(rng):
    g = L.GeneralLayerWeights(ConvBlock(rng.standard_normal((4, 2, 3, 3))),
                              ConvBlock(rng.standard_normal((3, 4, 3, 3))), L.NormWeights.identity(4))
    y = rng.standard_normal((2, 2, 4, 4))
    expect = conv.apply(g.conv2, np.maximum(L.tv_norm(g.norm, conv.apply(g.conv1, y)), 0))
    assert np.allclose(L.general_layer(g, y), expect, atol=1e-14)


# --- normalizations ----------------------------------------------------------

def test_batch_norm_constant_channel_gives_bias():
    nw = L.NormWeights(np.array([2.0, 3.0]), np.array([0.5, -1.0]))
    y = np.ones((4, 2, 3, 3)) * np.array([7.0, -2.0])[None, :, None, None]
    out = L.batch_norm(nw, y)
    assert np.allclose(out[:, 0], 0.5) and np.allclose(out[:, 1], -1.0)


def test_batch_norm_standardized_input_passes_through(rng):
    y = rng.standard_normal((8, 3, 4, 4))
    y = (y - y.mean(axis=(0, 2, 3), keepdims=True)) / y.std(axis=(0, 2, 3), keepdims=True)
    out = L.batch_norm(L.NormWeights.identity(3), y)
    assert np.allclose(out, y, atol=1e-4)


def test_batch_norm_moments(rng):
    y = 3 + 2 * rng.standard_normal((10, 4, 5, 5))
    out = L.batch_norm(L.NormWeights.identity(4), y)
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(out.std(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batch_norm_running_stats_and_eval(rng):
    st = L.BatchNormState.fresh(2)
    y = rng.standard_normal((4, 2, 3, 3)) + 5
    L.batch_norm_forward(L.NormWeights.identity(2), y, "train", st)
    assert np.allclose(st.mean, 0.1 * y.mean(axis=(0, 2, 3)))
    out = L.batch_norm(L.NormWeights.identity(2), y, "eval", st)
    assert np.allclose(out, (y - st.mean[None, :, None, None]) / np.sqrt(st.var + L.EPS_BN)[None, :, None, None])
    with pytest.raises(ValueError):
        L.batch_norm(L.NormWeights.identity(2), np.zeros((0, 2, 3, 3)))
    with pytest.raises(ValueError):
        L.batch_norm(L.NormWeights.identity(2), y, "eval")


def test_tv_examples():
    y = np.full((1, 1, 2, 2), 5.0)
    assert np.allclose(L.tv_norm(None, y, eps=1e-14), 1.0)
    assert np.array_equal(L.tv_norm(None, np.zeros((1, 3, 2, 2))), np.zeros((1, 3, 2, 2)))
    y = np.zeros((1, 2, 1, 1))
    y[0, :, 0, 0] = [3, 4]
    assert np.allclose(L.tv_norm(None, y, eps=1e-14).ravel(), [0.6, 0.8])
    with pytest.raises(ValueError):
        L.tv_norm(None, y, eps=0.0)


def test_tv_scale_and_bias(rng):
    y = rng.standard_normal((2, 3, 4, 4))
    nw = L.NormWeights(np.array([1.0, 2.0, 3.0]), np.array([0.0, 1.0, -1.0]))
    v = L.tv_norm(None, y)
    assert np.allclose(L.tv_norm(nw, y), v * nw.scale[None, :, None, None] + nw.bias[None, :, None, None])


# --- pooling / opening / classifier -------------------------------------------

def test_opening_shape_reference_sizes(rng):
    w = L.ConvBnWeights(ConvBlock(rng.standard_normal((16, 3, 3, 3)) * 0.1), L.NormWeights.identity(16))
    out = L.opening_layer(w, rng.standard_normal((2, 3, 96, 96)))
    assert out.shape == (2, 16, 96, 96) and np.all(np.isfinite(out)) and np.all(out >= 0)


def test_opening_zero_conv_zero_bias():
    w = L.ConvBnWeights(ConvBlock(np.zeros((4, 3, 3, 3))), L.NormWeights.identity(4))
    assert np.array_equal(L.opening_layer(w, np.ones((2, 3, 6, 6))), np.zeros((2, 4, 6, 6)))


def test_connecting_shape_reference_sizes(rng):
    w = L.ConvBnWeights(ConvBlock(rng.standard_normal((32, 16, 1, 1))), L.NormWeights.identity(32))
    assert L.connecting_layer(w, rng.standard_normal((2, 16, 96, 96))).shape == (2, 32, 48, 48)


def test_pool_examples(rng):
    assert np.allclose(L.avg_pool2(np.full((1, 2, 4, 4), 3.0)), 3.0)
    x = rng.standard_normal((2, 3, 4, 6))
    p = L.avg_pool2(x)
    assert np.isclose(p[1, 2, 1, 2], x[1, 2, 2:4, 4:6].mean())
    with pytest.raises(ShapeError):
        L.avg_pool2(np.zeros((1, 1, 3, 4)))


def test_classifier_examples(rng):
    y = rng.standard_normal((3, 4, 5, 5))
    b = np.array([1.0, -2.0])
    cw = L.ClassifierWeights(np.zeros((2, 4)), b)
    assert np.array_equal(L.global_average_and_classify(cw, y), np.tile(b, (3, 1)))
    sel = np.zeros((2, 4))
    sel[0, 1] = sel[1, 3] = 1
    s = L.global_average_and_classify(L.ClassifierWeights(sel, np.zeros(2)), y)
    assert np.allclose(s, y.mean(axis=(2, 3))[:, [1, 3]])
    cw = L.ClassifierWeights(rng.standard_normal((2, 4)), rng.standard_normal(2))
    flat = y.reshape(3, 4, 25).mean(axis=2)
    assert np.allclose(L.global_average_and_classify(cw, y), flat @ cw.W.T + cw.mu)
    with pytest.raises(ShapeError):
        L.global_average_and_classify(cw, np.zeros((1, 3, 2, 2)))


def test_cross_entropy_examples(rng):
    loss, _ = L.softmax_cross_entropy(np.zeros((3, 5)), np.array([0, 1, 4]))
    assert np.isclose(loss, np.log(5))
    s = np.zeros((1, 3))
    s[0, 2] = 800.0
    assert L.softmax_cross_entropy(s, np.array([2]))[0] < 1e-300
    s = rng.standard_normal((6, 4))
    lab = rng.integers(0, 4, 6)
    sl = s.astype(np.longdouble)
    oracle = np.mean(np.log(np.exp(sl).sum(axis=1)) - sl[np.arange(6), lab])
    assert abs(L.softmax_cross_entropy(s, lab)[0] - float(oracle)) < 1e-14
    with pytest.raises(ValueError):
        L.softmax_cross_entropy(s, np.array([0, 1, 2, 3, 4, 0]))


# --- Jacobian structure ---------------------------------------------------------

def test_linear_sym_jacobian_is_negative_semidefinite(rng):
    k = ConvBlock(rng.standard_normal((2, 2, 3, 3)))
    a = conv.dense_matrix(k, 4, 4)
    jac = -a.T @ a
    assert np.allclose(jac, jac.T)
    assert np.max(np.linalg.eigvalsh(jac)) <= 1e-12


def test_linear_sym_is_homogeneous(rng):
    w = L.SymLayerWeights(ConvBlock(rng.standard_normal((2, 2, 3, 3))))
    y = rng.standard_normal((1, 2, 4, 4))
    assert np.allclose(L.sym_layer(w, 3 * y, "relu"), 3 * L.sym_layer(w, y, "relu"))


# --- backward passes ---------------------------------------------------------

def _fd_layer(forward, backward, params, y, r, h=1e-6):
    """Check input and parameter gradients of <forward(params, y), g>."""
    out = forward(params, y)
    g = r.standard_normal(out.shape)
    dy, grads = backward(g)
    f = lambda p, yy: float(np.sum(forward(p, yy) * g))
    d = r.standard_normal(y.shape)
    errs = [rel(np.sum(dy * d), (f(params, y + h * d) - f(params, y - h * d)) / (2 * h))]
    for k in grads:
        dp = {kk: np.zeros_like(v) for kk, v in params.items()}
        dp[k] = r.standard_normal(params[k].shape)
        plus = {kk: v + h * dp[kk] for kk, v in params.items()}
        minus = {kk: v - h * dp[kk] for kk, v in params.items()}
        errs.append(rel(np.sum(grads[k] * dp[k]), (f(plus, y) - f(minus, y)) / (2 * h)))
    return max(errs)


def sym_fd_error(r, act="relu", norm=True, c=3, size=5):
    w0 = _sym(r, c, norm)
    params = {"conv": w0.conv.weight}
    if norm:
        params["norm.scale"], params["norm.bias"] = w0.norm.scale, w0.norm.bias

    def make(p):
        nw = L.NormWeights(p["norm.scale"], p["norm.bias"]) if norm else None
        return L.SymLayerWeights(ConvBlock(p["conv"]), nw)

    y = r.standard_normal((2, c, size, size))
    _, cache = L.sym_layer_forward(w0, y, act)
    return _fd_layer(lambda p, yy: L.sym_layer(make(p), yy, act),
                     lambda g: L.sym_layer_backward(cache, g), params, y, r)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["relu", "tanh", "identity"]), st.booleans())
def test_sym_backward_fd(seed, act, norm):
    assert sym_fd_error(make_rng(seed), act, norm) <= 1e-6


def test_general_backward_fd(rng):
    p0 = {"conv1": rng.standard_normal((4, 2, 3, 3)), "conv2": rng.standard_normal((3, 4, 1, 1)),
          "norm.scale": 1 + rng.standard_normal(4) * 0.1, "norm.bias": rng.standard_normal(4) * 0.1}
    make = lambda p: L.GeneralLayerWeights(ConvBlock(p["conv1"]), ConvBlock(p["conv2"]),
                                           L.NormWeights(p["norm.scale"], p["norm.bias"]))
    y = rng.standard_normal((2, 2, 4, 4))
    _, cache = L.general_layer_forward(make(p0), y, "tanh")
    err = _fd_layer(lambda p, yy: L.general_layer(make(p), yy, "tanh"),
                    lambda g: L.general_layer_backward(cache, g), p0, y, rng)
    assert err <= 1e-6


@pytest.mark.parametrize("pool", [False, True])
def test_conv_bn_relu_backward_fd(rng, pool):
    p0 = {"conv": rng.standard_normal((3, 2, 3, 3)), "norm.scale": 1 + rng.standard_normal(3) * 0.1,
          "norm.bias": rng.standard_normal(3) * 0.1}
    make = lambda p: L.ConvBnWeights(ConvBlock(p["conv"]), L.NormWeights(p["norm.scale"], p["norm.bias"]))
    y = rng.standard_normal((3, 2, 4, 4))
    _, cache = L.conv_bn_relu_forward(make(p0), y, pool=pool)
    fwd = lambda p, yy: L.conv_bn_relu_forward(make(p), yy, pool=pool)[0]
    assert _fd_layer(fwd, lambda g: L.conv_bn_relu_backward(cache, g), p0, y, rng) <= 1e-6


def test_tv_and_bn_backward_fd(rng):
    y = rng.standard_normal((2, 3, 4, 4))
    p0 = {"scale": 1 + rng.standard_normal(3) * 0.1, "bias": rng.standard_normal(3)}
    nw = lambda p: L.NormWeights(p["scale"], p["bias"])
    _, c1 = L.tv_norm_forward(nw(p0), y)
    assert _fd_layer(lambda p, yy: L.tv_norm(nw(p), yy), lambda g: L.tv_norm_backward(c1, g), p0, y, rng) <= 1e-6
    _, c2 = L.batch_norm_forward(nw(p0), y)
    assert _fd_layer(lambda p, yy: L.batch_norm(nw(p), yy), lambda g: L.batch_norm_backward(c2, g), p0, y, rng) <= 1e-6


def test_classifier_backward_fd(rng):
    p0 = {"W": rng.standard_normal((3, 4)), "mu": rng.standard_normal(3)}
    y = rng.standard_normal((2, 4, 3, 3))
    cw = lambda p: L.ClassifierWeights(p["W"], p["mu"])
    _, cache = L.classify_forward(cw(p0), y)
    assert _fd_layer(lambda p, yy: L.global_average_and_classify(cw(p), yy),
                     lambda g: L.classify_backward(cache, g), p0, y, rng) <= 1e-6


def test_cross_entropy_gradient_fd(rng):
    s = rng.standard_normal((5, 4))
    lab = rng.integers(0, 4, 5)
    _, g = L.softmax_cross_entropy(s, lab)
    d = rng.standard_normal(s.shape)
    fd = (L.softmax_cross_entropy(s + 1e-6 * d, lab)[0] - L.softmax_cross_entropy(s - 1e-6 * d, lab)[0]) / 2e-6
    assert rel(np.sum(g * d), fd) <= 1e-7


def test_linear_sym_backward_closed_form(rng):
    # out = -A^T A y  =>  dL/dy = -A^T A g for a symmetric operator
    w = L.SymLayerWeights(ConvBlock(rng.standard_normal((2, 2, 3, 3))))
    y = rng.standard_normal((1, 2, 4, 4))
    g = rng.standard_normal(y.shape)
    _, cache = L.sym_layer_forward(w, y, "identity")
    dy, _ = L.sym_layer_backward(cache, g)
    a = conv.dense_matrix(w.conv, 4, 4)
    assert np.allclose(dy.ravel(), -a.T @ a @ g.ravel(), atol=1e-12)


def test_zero_upstream_gives_zero_grads(rng):
    w = _sym(rng, 2)
    y = rng.standard_normal((1, 2, 4, 4))
    _, cache = L.sym_layer_forward(w, y)
    dy, grads = L.sym_layer_backward(cache, np.zeros_like(y))
    assert not np.any(dy) and all(not np.any(v) for v in grads.values())


def test_backward_rejects_stale_shape(rng):
    w = _sym(rng, 2)
    _, cache = L.sym_layer_forward(w, rng.standard_normal((1, 2, 4, 4)))
    with pytest.raises(L.StaleCacheError):
        L.sym_layer_backward(cache, np.zeros((2, 2, 4, 4)))
