"""Layers used by the PDE-inspired ResNets, each with a hand-written backward pass.

Every ``*_forward`` function returns ``(output, cache)``; the matching
``*_backward(cache, g)`` takes the upstream gradient ``g`` (same shape as the
output) and returns ``(input_gradient, weight_gradients)``. The plain-named
functions (``sym_layer``, ``tv_norm``, ...) are forward-only conveniences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import conv
from .conv import ConvBlock
from .tensor import DTYPE, ShapeError

EPS_BN = 1e-5
EPS_TV = 1e-3
BN_MOMENTUM = 0.9


class StaleCacheError(RuntimeError):
    """Upstream gradient does not belong to the cached forward call."""


# --- activations -----------------------------------------------------------

def _relu(x):
    return np.maximum(x, 0.0)


def _relu_prime(x):
    # subgradient 0 at the kink
    return (x > 0).astype(DTYPE)


def _tanh_prime(x):
    t = np.tanh(x)
    return 1.0 - t * t


ACTIVATIONS = {
    "relu": (_relu, _relu_prime),
    "tanh": (np.tanh, _tanh_prime),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# --- weights ---------------------------------------------------------------

@dataclass
class NormWeights:
    """Per-channel scale and bias applied after normalization."""

    scale: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.scale.shape != self.bias.shape or self.scale.ndim != 1:
            raise ShapeError(f"scale/bias must be matching vectors, got {self.scale.shape} and {self.bias.shape}")

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    @classmethod
    def identity(cls, c: int) -> "NormWeights":
        return cls(np.ones(c), np.zeros(c))


@dataclass
class SymLayerWeights:
    """One symmetric residual layer; ``norm=None`` means no normalization."""

    conv: ConvBlock
    norm: NormWeights | None = None

    def __post_init__(self):
        if self.norm is not None and self.norm.channels != self.conv.c_out:
            raise ShapeError(f"norm has {self.norm.channels} channels, conv produces {self.conv.c_out}")


@dataclass
class GeneralLayerWeights:
    conv1: ConvBlock
    conv2: ConvBlock
    norm: NormWeights | None = None


@dataclass
class ClassifierWeights:
    W: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.mu.shape != (self.W.shape[0],):
            raise ShapeError(f"classifier W {self.W.shape} and mu {self.mu.shape} disagree")


@dataclass
class BatchNormState:
    """Running statistics for eval-mode batch normalization."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, c: int) -> "BatchNormState":
        return cls(np.zeros(c), np.ones(c))


def _channels(y: np.ndarray, expected: int, what: str) -> None:
    if y.ndim != 4 or y.shape[1] != expected:
        raise ShapeError(f"{what} expects {expected} channels, got tensor of shape {y.shape}")


def _check_upstream(cache_shape, g: np.ndarray) -> None:
    if g.shape != cache_shape:
        raise StaleCacheError(f"upstream gradient shape {g.shape} does not match cached output {cache_shape}")


def _per_channel(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None]


# --- TV normalization ------------------------------------------------------

class _TvCache(NamedTuple):
    nw: NormWeights | None
    u: np.ndarray
    denom: np.ndarray
    v: np.ndarray


def tv_norm_forward(nw: NormWeights | None, y: np.ndarray, eps: float = EPS_TV):
    """Divide each pixel's channel vector by ``sqrt(sum_c y^2 + eps)``, then scale and shift.

    ``nw=None`` skips the trainable scale/bias.
    """
    if not eps > 0:
        raise ValueError(f"TV normalization needs eps > 0, got {eps}")
    if nw is not None:
        _channels(y, nw.channels, "tv_norm")
    denom = np.sqrt(np.sum(y * y, axis=1, keepdims=True) + eps)
    v = y / denom
    out = v if nw is None else _per_channel(nw.scale) * v + _per_channel(nw.bias)
    return out, _TvCache(nw, y, denom, v)


def tv_norm_backward(cache: _TvCache, g: np.ndarray):
    _check_upstream(cache.u.shape, g)
    nw, u, denom, v = cache
    grads = {}
    if nw is not None:
        grads["scale"] = np.sum(g * v, axis=(0, 2, 3))
        grads["bias"] = np.sum(g, axis=(0, 2, 3))
        g = g * _per_channel(nw.scale)
    proj = np.sum(g * u, axis=1, keepdims=True)
    du = g / denom - u * proj / denom**3
    return du, grads


def tv_norm(nw: NormWeights | None, y: np.ndarray, eps: float = EPS_TV) -> np.ndarray:
    return tv_norm_forward(nw, y, eps)[0]


# --- batch normalization ---------------------------------------------------

class _BnCache(NamedTuple):
    nw: NormWeights
    xhat: np.ndarray
    inv_std: np.ndarray
    train: bool


def batch_norm_forward(nw: NormWeights, y: np.ndarray, mode: str = "train",
                       stats: BatchNormState | None = None, update_stats: bool = True):
    """Per-channel standardization over (batch, height, width), then scale and bias.

    Train mode uses batch moments and, if ``stats`` is given and
    ``update_stats`` is set, folds them into the running averages with momentum
    ``BN_MOMENTUM``. Eval mode normalizes with ``stats``.
    """
    _channels(y, nw.channels, "batch_norm")
    if y.shape[0] == 0 or y.size == 0:
        raise ValueError("batch_norm needs a non-empty batch")
    if mode == "train":
        mean = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        if stats is not None and update_stats:
            stats.mean = BN_MOMENTUM * stats.mean + (1 - BN_MOMENTUM) * mean
            stats.var = BN_MOMENTUM * stats.var + (1 - BN_MOMENTUM) * var
    elif mode == "eval":
        if stats is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mean, var = stats.mean, stats.var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + EPS_BN)
    xhat = (y - _per_channel(mean)) * _per_channel(inv_std)
    out = _per_channel(nw.scale) * xhat + _per_channel(nw.bias)
    return out, _BnCache(nw, xhat, inv_std, mode == "train")


def batch_norm_backward(cache: _BnCache, g: np.ndarray):
    _check_upstream(cache.xhat.shape, g)
    nw, xhat, inv_std, train = cache
    grads = {"scale": np.sum(g * xhat, axis=(0, 2, 3)), "bias": np.sum(g, axis=(0, 2, 3))}
    dxhat = g * _per_channel(nw.scale)
    if not train:
        return dxhat * _per_channel(inv_std), grads
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    s1 = np.sum(dxhat, axis=(0, 2, 3), keepdims=True)
    s2 = np.sum(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
    dx = _per_channel(inv_std) * (dxhat - s1 / m - xhat * s2 / m)
    return dx, grads


def batch_norm(nw, y, mode="train", stats=None):
    return batch_norm_forward(nw, y, mode, stats)[0]


# --- symmetric and general residual layers ---------------------------------

class _SymCache(NamedTuple):
    w: SymLayerWeights
    act: str
    y: np.ndarray
    cols: np.ndarray
    norm_cache: _TvCache | None
    a: np.ndarray
    s: np.ndarray


def sym_layer_forward(w: SymLayerWeights, y: np.ndarray, act: str = "relu", eps: float = EPS_TV):
    """``-K^T sigma(N(K y))`` with N the TV normalization (or identity when ``w.norm`` is None)."""
    _channels(y, w.conv.c_in, "sym_layer")
    sigma, _ = activation(act)
    cols = conv.patches(y, w.conv.kernel)
    u = conv.apply(w.conv, y, cols)
    if w.norm is None:
        a, nc = u, None
    else:
        a, nc = tv_norm_forward(w.norm, u, eps)
    s = sigma(a)
    out = -conv.apply_transpose(w.conv, s)
    return out, _SymCache(w, act, y, cols, nc, a, s)


def sym_layer_backward(cache: _SymCache, g: np.ndarray):
    _check_upstream(cache.y.shape, g)
    w, act, y, cols, nc, a, s = cache
    _, dsigma = activation(act)
    gcols = conv.patches(g, w.conv.kernel)
    kg = conv.apply(w.conv, g, gcols)
    # out = -K^T s  =>  <out, g> = -<s, K g>
    dk = -conv.stencil_gradient(w.conv, g, s, gcols)
    da = -kg * dsigma(a)
    grads = {}
    if nc is None:
        du = da
    else:
        du, ng = tv_norm_backward(nc, da)
        grads["norm.scale"] = ng["scale"]
        grads["norm.bias"] = ng["bias"]
    dk = dk + conv.stencil_gradient(w.conv, y, du, cols)
    grads["conv"] = dk
    return conv.apply_transpose(w.conv, du), grads


def sym_layer(w: SymLayerWeights, y: np.ndarray, act: str = "relu", eps: float = EPS_TV) -> np.ndarray:
    return sym_layer_forward(w, y, act, eps)[0]


class _GenCache(NamedTuple):
    w: GeneralLayerWeights
    act: str
    y: np.ndarray
    norm_cache: _TvCache | None
    a: np.ndarray
    s: np.ndarray
    out_shape: tuple


def general_layer_forward(w: GeneralLayerWeights, y: np.ndarray, act: str = "relu", eps: float = EPS_TV):
    """``K2 sigma(N(K1 y))`` with independent stencil grids."""
    _channels(y, w.conv1.c_in, "general_layer")
    if w.conv2.c_in != w.conv1.c_out:
        raise ShapeError(f"K2 takes {w.conv2.c_in} channels but K1 produces {w.conv1.c_out}")
    sigma, _ = activation(act)
    u = conv.apply(w.conv1, y)
    if w.norm is None:
        a, nc = u, None
    else:
        a, nc = tv_norm_forward(w.norm, u, eps)
    s = sigma(a)
    out = conv.apply(w.conv2, s)
    return out, _GenCache(w, act, y, nc, a, s, out.shape)


def general_layer_backward(cache: _GenCache, g: np.ndarray):
    _check_upstream(cache.out_shape, g)
    w, act, y, nc, a, s, _ = cache
    _, dsigma = activation(act)
    grads = {"conv2": conv.stencil_gradient(w.conv2, s, g)}
    da = conv.apply_transpose(w.conv2, g) * dsigma(a)
    if nc is None:
        du = da
    else:
        du, ng = tv_norm_backward(nc, da)
        grads["norm.scale"] = ng["scale"]
        grads["norm.bias"] = ng["bias"]
    grads["conv1"] = conv.stencil_gradient(w.conv1, y, du)
    return conv.apply_transpose(w.conv1, du), grads


def general_layer(w: GeneralLayerWeights, y: np.ndarray, act: str = "relu", eps: float = EPS_TV) -> np.ndarray:
    return general_layer_forward(w, y, act, eps)[0]


# --- opening / connecting layers -------------------------------------------

@dataclass
class ConvBnWeights:
    """Convolution followed by batch norm and ReLU (opening and connecting layers)."""

    conv: ConvBlock
    norm: NormWeights
    stats: BatchNormState = field(default=None)

    def __post_init__(self):
        if self.stats is None:
            self.stats = BatchNormState.fresh(self.conv.c_out)


class _ConvBnCache(NamedTuple):
    w: ConvBnWeights
    x: np.ndarray
    bn_cache: _BnCache
    pre: np.ndarray
    pooled: bool
    out_shape: tuple


def avg_pool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 average pooling needs even spatial size, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def conv_bn_relu_forward(w: ConvBnWeights, x: np.ndarray, mode: str = "train",
                         pool: bool = False, update_stats: bool = True):
    _channels(x, w.conv.c_in, "conv-bn-relu")
    u = conv.apply(w.conv, x)
    b, bc = batch_norm_forward(w.norm, u, mode, w.stats, update_stats)
    out = _relu(b)
    if pool:
        out = avg_pool2(out)
    return out, _ConvBnCache(w, x, bc, b, pool, out.shape)


def conv_bn_relu_backward(cache: _ConvBnCache, g: np.ndarray):
    _check_upstream(cache.out_shape, g)
    w, x, bc, pre, pooled, _ = cache
    if pooled:
        g = avg_pool2_backward(g)
    db = g * _relu_prime(pre)
    du, ng = batch_norm_backward(bc, db)
    grads = {"conv": conv.stencil_gradient(w.conv, x, du), "norm.scale": ng["scale"], "norm.bias": ng["bias"]}
    return conv.apply_transpose(w.conv, du), grads


def opening_layer(w: ConvBnWeights, y: np.ndarray, mode: str = "train") -> np.ndarray:
    """3x3 convolution to the first block width, batch norm, ReLU."""
    return conv_bn_relu_forward(w, y, mode, pool=False)[0]


def connecting_layer(w: ConvBnWeights, y: np.ndarray, mode: str = "train", pool: bool = True) -> np.ndarray:
    """1x1 convolution, batch norm, ReLU, then 2x2 average pooling."""
    return conv_bn_relu_forward(w, y, mode, pool=pool)[0]


# --- classifier and loss ---------------------------------------------------

def classify_forward(cw: ClassifierWeights, y: np.ndarray):
    """Channel-wise spatial mean followed by the affine map ``W feat + mu``."""
    if y.ndim != 4 or y.shape[1] != cw.W.shape[1]:
        raise ShapeError(f"classifier expects {cw.W.shape[1]} channels, got tensor of shape {y.shape}")
    feat = y.mean(axis=(2, 3))
    scores = feat @ cw.W.T + cw.mu
    return scores, (cw, feat, y.shape)


def classify_backward(cache, g: np.ndarray):
    cw, feat, in_shape = cache
    _check_upstream((in_shape[0], cw.W.shape[0]), g)
    grads = {"W": g.T @ feat, "mu": g.sum(axis=0)}
    dfeat = g @ cw.W
    n, c, h, w = in_shape
    dy = np.broadcast_to((dfeat / (h * w))[:, :, None, None], in_shape).copy()
    return dy, grads


def global_average_and_classify(cw: ClassifierWeights, y: np.ndarray) -> np.ndarray:
    return classify_forward(cw, y)[0]


def softmax_cross_entropy(scores: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient with respect to the scores."""
    labels = np.asarray(labels)
    n, m = scores.shape
    if labels.shape != (n,):
        raise ShapeError(f"need one label per example: {labels.shape} vs {n} scores")
    if labels.size and (labels.min() < 0 or labels.max() >= m or not np.issubdtype(labels.dtype, np.integer)):
        raise ValueError(f"labels must be integers in [0, {m})")
    z = scores - scores.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), labels] -= 1.0
    return loss, p / n
