"""Reverse-mode derivatives of the networks and finite-difference verification.

Two strategies are available for the hyperbolic families:

* ``stored``: the forward pass keeps every state; the backward sweep reads them.
* ``reversible``: the forward pass keeps only the final states of each block;
  the backward sweep rebuilds earlier states by running the integrator
  backwards, reusing each layer evaluation for both the reconstruction and
  the adjoint. Peak state storage per block is constant in N.

The parabolic family is not reversible and always uses stored states.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .dynamics import Trajectory
from .network import ForwardRecord, Network, WeightVector


class NotReversibleError(ValueError):
    pass


def backprop_layer(kind: str, cache, g: np.ndarray):
    """Dispatch to the backward pass of one layer type.

    ``kind`` is one of ``sym``, ``general``, ``tv_norm``, ``batch_norm``,
    ``conv_bn_relu`` or ``classifier``. Returns ``(input_grad, weight_grads)``.
    """
    table = {
        "sym": L.sym_layer_backward,
        "general": L.general_layer_backward,
        "tv_norm": L.tv_norm_backward,
        "batch_norm": L.batch_norm_backward,
        "conv_bn_relu": L.conv_bn_relu_backward,
        "classifier": L.classify_backward,
    }
    if kind not in table:
        raise ValueError(f"unknown layer kind {kind!r}")
    return table[kind](cache, g)


def _accumulate(grads: WeightVector, prefix: str, layer_grads: dict) -> None:
    for k, v in layer_grads.items():
        grads[f"{prefix}.{k}"] += v


class _Peak:
    """Tracks the largest number of block states held at once."""

    def __init__(self):
        self.value = 0

    def see(self, n: int):
        self.value = max(self.value, n)


# --- per-family block adjoints -----------------------------------------------

def _parabolic_backward(net, b, traj: Trajectory, g, grads, peak):
    if not traj.stored or len(traj.ys) != traj.n_steps + 1:
        raise ValueError("parabolic backprop needs the full stored trajectory")
    s = net.spec
    weights = net.block_weights(b)
    peak.see(len(traj.ys))
    for j in reversed(range(traj.n_steps)):
        if traj.caches is not None:
            cache = traj.caches[j]
        else:
            cache = L.sym_layer_forward(weights[j], traj.ys[j], s.activation, s.tv_eps)[1]
        dy, lg = L.sym_layer_backward(cache, s.dt * g)
        _accumulate(grads, f"block{b}.step{j}", lg)
        g = g + dy
    return g


def _hamiltonian_step_backward(net, b, j, w1, w2, c1, c2, gy, gz, grads):
    """Adjoint of one Verlet step given layer caches at Y_{j+1} (c2) and Z_j (c1)."""
    dt = net.spec.dt
    dy, lg = L.sym_layer_backward(c2, -dt * gz)
    _accumulate(grads, f"block{b}.step{j}.z", lg)
    gy = gy + dy
    dz, lg = L.sym_layer_backward(c1, dt * gy)
    _accumulate(grads, f"block{b}.step{j}.y", lg)
    return gy, gz + dz


def _hamiltonian_backward(net, b, traj: Trajectory, gy, gz, grads, peak, strategy):
    s = net.spec
    kw = (s.activation, s.tv_eps)
    weights = net.block_weights(b)
    if strategy == "stored":
        if len(traj.ys) != traj.n_steps + 1:
            raise ValueError("stored hamiltonian backprop needs the full trajectory")
        peak.see(len(traj.ys) + len(traj.zs))
        for j in reversed(range(traj.n_steps)):
            w1, w2 = weights[j]
            c2 = L.sym_layer_forward(w2, traj.ys[j + 1], *kw)[1]
            c1 = L.sym_layer_forward(w1, traj.zs[j], *kw)[1]
            gy, gz = _hamiltonian_step_backward(net, b, j, w1, w2, c1, c2, gy, gz, grads)
        return gy, gz
    y, z = traj.y_final, traj.z_final
    peak.see(2)
    for j in reversed(range(traj.n_steps)):
        w1, w2 = weights[j]
        f2, c2 = L.sym_layer_forward(w2, y, *kw)
        z = z + s.dt * f2
        f1, c1 = L.sym_layer_forward(w1, z, *kw)
        y = y - s.dt * f1
        gy, gz = _hamiltonian_step_backward(net, b, j, w1, w2, c1, c2, gy, gz, grads)
    return gy, gz


def _second_order_backward(net, b, traj: Trajectory, g, grads, peak, strategy):
    s = net.spec
    dt2 = s.dt * s.dt
    weights = net.block_weights(b)
    n = traj.n_steps
    g_next, g_cur = g, np.zeros_like(g)  # total grad of Y_{j+1}, partial grad of Y_j
    if strategy == "stored":
        if len(traj.ys) != n + 1:
            raise ValueError("stored second-order backprop needs the full trajectory")
        peak.see(len(traj.ys))
        for j in reversed(range(n)):
            cache = L.sym_layer_forward(weights[j], traj.ys[j], s.activation, s.tv_eps)[1]
            dy, lg = L.sym_layer_backward(cache, dt2 * g_next)
            _accumulate(grads, f"block{b}.step{j}", lg)
            g_next, g_cur = g_cur + 2 * g_next + dy, -g_next
        # Y_{-1} = Y_0
        return g_next + g_cur
    if len(traj.ys) < 2 and n > 0:
        raise ValueError("reversible second-order backprop needs (Y_{N-1}, Y_N)")
    nxt, y = traj.ys[-1], traj.ys[-2]
    peak.see(2)
    for j in reversed(range(n)):
        f, cache = L.sym_layer_forward(weights[j], y, s.activation, s.tv_eps)
        dy, lg = L.sym_layer_backward(cache, dt2 * g_next)
        _accumulate(grads, f"block{b}.step{j}", lg)
        g_next, g_cur = g_cur + 2 * g_next + dy, -g_next
        nxt, y = y, 2 * y - nxt + dt2 * f
    return g_next + g_cur


# --- whole network ---------------------------------------------------------

@dataclass
class BackpropInfo:
    peak_states: list = field(default_factory=list)


def backprop_network(net: Network, rec: ForwardRecord, g_scores: np.ndarray,
                     info: BackpropInfo | None = None) -> WeightVector:
    """Gradients of ``<scores, g_scores>`` with respect to every weight."""
    s = net.spec
    strategy = rec.strategy
    if strategy == "reversible" and s.family == "parabolic":
        raise NotReversibleError("the parabolic family cannot be run backwards; use stored backprop")
    grads = net.weights.zeros_like()
    g, lg = L.classify_backward(rec.cls_cache, g_scores)
    _accumulate(grads, "cls", lg)
    for b in reversed(range(len(s.widths))):
        g, lg = L.conv_bn_relu_backward(rec.conn_caches[b], g)
        _accumulate(grads, f"conn{b}", lg)
        traj = rec.blocks[b]
        peak = _Peak()
        if s.family == "parabolic":
            g = _parabolic_backward(net, b, traj, g, grads, peak)
        elif s.family == "hamiltonian":
            half = g.shape[1] // 2
            gy, gz = _hamiltonian_backward(net, b, traj, g[:, :half], g[:, half:], grads, peak, strategy)
            g = np.concatenate([gy, gz], axis=1)
        else:
            g = _second_order_backward(net, b, traj, g, grads, peak, strategy)
        if info is not None:
            info.peak_states.insert(0, peak.value)
    _, lg = L.conv_bn_relu_backward(rec.open_cache, g)
    _accumulate(grads, "open", lg)
    return grads


def backprop_network_stored(net: Network, rec: ForwardRecord, g_scores, info=None) -> WeightVector:
    if any(not t.stored for t in rec.blocks):
        raise ValueError("forward record lacks stored trajectories; run forward with strategy='stored'")
    rec = ForwardRecord(rec.scores, rec.open_cache, rec.blocks, rec.conn_caches, rec.cls_cache, "stored")
    return backprop_network(net, rec, g_scores, info)


def backprop_network_reversible(net: Network, rec: ForwardRecord, g_scores, info=None) -> WeightVector:
    if net.spec.family == "parabolic":
        raise NotReversibleError("the parabolic family cannot be run backwards; use stored backprop")
    rec = ForwardRecord(rec.scores, rec.open_cache, rec.blocks, rec.conn_caches, rec.cls_cache, "reversible")
    return backprop_network(net, rec, g_scores, info)


def loss_and_grad(net: Network, x, labels, mode="train", strategy="reversible"):
    """Mean cross-entropy of the network on ``(x, labels)`` and its weight gradient."""
    rec = net.forward(x, mode, strategy, update_stats=False)
    loss, g = L.softmax_cross_entropy(rec.scores, labels)
    return loss, backprop_network(net, rec, g)


# --- finite differences ----------------------------------------------------

@dataclass
class FdCheckReport:
    """Directional-derivative comparison.

    ``rel_error = |analytic - fd| / (|analytic| + |fd| + 1e-12)``, which is
    symmetric in its two arguments.
    """

    analytic: float
    fd: float
    h: float
    rel_error: float
    groups: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"step            {self.h:.3e}",
               f"analytic        {self.analytic: .12e}",
               f"finite-diff     {self.fd: .12e}",
               f"rel_error       {self.rel_error:.3e}"]
        for k, v in self.groups.items():
            out.append(f"  {k:<28s} {v:.3e}")
        return out


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / (abs(a) + abs(b) + 1e-12)


def fd_check(f, grad, w: np.ndarray, direction: np.ndarray, h: float = 1e-6) -> FdCheckReport:
    """Compare ``<grad, direction>`` with a central difference of scalar ``f`` at ``w``."""
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    w = np.asarray(w, dtype=float)
    d = np.asarray(direction, dtype=float)
    analytic = float(np.dot(np.ravel(grad), d.ravel()))
    fd = (f(w + h * d) - f(w - h * d)) / (2 * h)
    return FdCheckReport(analytic, float(fd), h, rel_error(analytic, fd))


def network_fd_check(net: Network, x, labels, rng, h: float = 1e-6, strategy: str = "stored",
                     per_group: bool = False) -> FdCheckReport:
    """Finite-difference check of the full network loss along a random unit direction.

    Batch norm runs in train mode with frozen running statistics, so the loss
    is a deterministic function of the weights.
    """
    base = net.weights.copy()
    loss, grads = loss_and_grad(net, x, labels, "train", strategy)
    flat0 = base.flat()

    def f(flat):
        net.weights.set_flat(flat)
        val = net.forward(x, "train", strategy, update_stats=False).scores
        return L.softmax_cross_entropy(val, labels)[0]

    # unit directions make h the actual step length
    direction = rng.standard_normal(flat0.size)
    direction /= np.linalg.norm(direction)
    try:
        report = fd_check(f, grads.flat(), flat0, direction, h)
        if per_group:
            for key in base:
                d = base.zeros_like()
                d[key][...] = rng.standard_normal(d[key].shape)
                dflat = d.flat()
                r = fd_check(f, grads.flat(), flat0, dflat / np.linalg.norm(dflat), h)
                report.groups[key] = r.rel_error
    finally:
        net.weights.set_flat(flat0)
    return report
