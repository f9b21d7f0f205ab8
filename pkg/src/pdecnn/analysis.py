"""Stability and classification diagnostics.

The stability measurements work at the level of ResNet-block features: the
input of a block is perturbed by Gaussian noise scaled to a fixed Frobenius
norm, both copies are propagated through the block, and the ratio of output
to input perturbation norms is recorded. The largest ratio over the trials is
the empirical stability constant at the block's horizon T = N dt. It is a
finite-horizon measurement only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import conv
from . import dynamics as dyn
from .layers import EPS_TV, SymLayerWeights, activation, softmax_cross_entropy
from .tensor import frobenius_norm, inner_product, make_rng

POWER_TOL = 1e-8
POWER_MAX_ITER = 500


# --- Jacobian spectrum -------------------------------------------------------

@dataclass
class SpectrumEstimate:
    eigenvalue: float
    residual: float
    iterations: int
    converged: bool


def sym_jacobian_matvec(w: SymLayerWeights, y: np.ndarray, act: str = "relu", eps: float = EPS_TV):
    """Return ``v -> J v`` for the feature Jacobian of the symmetric layer at ``y``.

    Without normalization ``J = -K^T diag(sigma'(K y)) K``, which is symmetric.
    With TV normalization the exact Jacobian is used (no longer symmetric).
    """
    _, dsigma = activation(act)
    u = conv.apply(w.conv, y)
    if w.norm is None:
        d = dsigma(u)

        def matvec(v):
            return -conv.apply_transpose(w.conv, d * conv.apply(w.conv, v))
        return matvec

    denom = np.sqrt(np.sum(u * u, axis=1, keepdims=True) + eps)
    a = w.norm.scale[None, :, None, None] * u / denom + w.norm.bias[None, :, None, None]
    d = dsigma(a)
    scale = w.norm.scale[None, :, None, None]

    def matvec(v):
        kv = conv.apply(w.conv, v)
        jn = scale * (kv / denom - u * np.sum(u * kv, axis=1, keepdims=True) / denom**3)
        return -conv.apply_transpose(w.conv, d * jn)
    return matvec


def power_iteration(matvec, shape, iterations: int = POWER_MAX_ITER, tol: float = POWER_TOL,
                    seed: int = 0, shift: float = 0.0) -> SpectrumEstimate:
    """Dominant eigenvalue of ``A - shift*I`` (returned shifted back) by power iteration.

    Stops when ``||A v - lam v|| <= tol * max(1, |lam|)``.
    """
    v = make_rng(seed).standard_normal(shape)
    v /= frobenius_norm(v)
    lam, res = 0.0, np.inf
    for it in range(1, iterations + 1):
        av = matvec(v) - shift * v
        lam = inner_product(v, av)
        res = frobenius_norm(av - lam * v)
        if res <= tol * max(1.0, abs(lam)):
            return SpectrumEstimate(lam + shift, res, it, True)
        nrm = frobenius_norm(av)
        if nrm == 0.0:
            return SpectrumEstimate(shift, 0.0, it, True)
        v = av / nrm
    return SpectrumEstimate(lam + shift, res, iterations, False)


def jacobian_spectrum(w: SymLayerWeights, y: np.ndarray, iterations: int = POWER_MAX_ITER,
                      tol: float = POWER_TOL, act: str = "relu", eps: float = EPS_TV,
                      seed: int = 0) -> SpectrumEstimate:
    """Largest-magnitude eigenvalue of the symmetric layer's feature Jacobian at ``y``.

    For a batch ``y`` the operator acts on the whole batch at once.
    """
    return power_iteration(sym_jacobian_matvec(w, y, act, eps), y.shape, iterations, tol, seed)


def jacobian_extremes(w, y, act="relu", eps=EPS_TV, iterations=POWER_MAX_ITER, tol=POWER_TOL, seed=0):
    """(lowest, highest) eigenvalue estimates of a symmetric, negative semidefinite Jacobian."""
    mv = sym_jacobian_matvec(w, y, act, eps)
    dom = power_iteration(mv, y.shape, iterations, tol, seed)
    other = power_iteration(mv, y.shape, iterations, tol, seed + 1, shift=dom.eigenvalue)
    return min(dom.eigenvalue, other.eigenvalue), max(dom.eigenvalue, other.eigenvalue)


def stability_margin(w, y, dt: float, act="relu", eps=EPS_TV, **kw) -> float:
    """``max_i |1 + dt lambda_i(J)|``; at most 1 means the forward Euler step is stable."""
    lo, hi = jacobian_extremes(w, y, act, eps, **kw)
    return max(abs(1 + dt * lo), abs(1 + dt * hi))


def admissible_dt(w: SymLayerWeights, shape, act: str = "relu", safety: float = 0.9) -> float:
    """Step size with ``dt * ||K||^2 * max sigma' <= 2 * safety``, so forward Euler is nonexpansive."""
    mv = lambda v: conv.apply_transpose(w.conv, conv.apply(w.conv, v))
    knorm2 = power_iteration(mv, shape, iterations=2000, tol=1e-10).eigenvalue
    lip = 1.0  # relu, tanh and identity all have sigma' <= 1
    return 2.0 * safety / (knorm2 * lip) if knorm2 > 0 else 1.0


# --- perturbation stability ----------------------------------------------------

@dataclass
class StabilityReport:
    ratios: list
    max_ratio: float
    step_eigenvalues: list = field(default_factory=list)
    bound_margin: list = field(default_factory=list)
    horizon: float = 0.0

    def rows(self):
        for i, r in enumerate(self.ratios):
            yield {"trial": i, "ratio": r}


def gaussian_perturbation(shape, norm: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Gaussian noise rescaled to Frobenius norm ``norm``."""
    e = rng.standard_normal(shape)
    return e * (norm / frobenius_norm(e))


def propagate_block(family: str, weights, y0: np.ndarray, dt: float = 1.0, act: str = "relu",
                    eps: float = EPS_TV) -> np.ndarray:
    """Final features of one block; Hamiltonian blocks split/concatenate channels."""
    if family == "parabolic":
        return dyn.forward_parabolic(weights, y0, dt, act, eps).y_final
    if family == "hamiltonian":
        h = y0.shape[1] // 2
        t = dyn.forward_hamiltonian(weights, y0[:, :h], y0[:, h:], dt, act, eps)
        return np.concatenate([t.y_final, t.z_final], axis=1)
    if family == "second_order":
        return dyn.forward_second_order(weights, y0, dt, act, eps).y_final
    raise ValueError(f"unknown family {family!r}")


def block_stability(family: str, weights, y0: np.ndarray, noise: float, trials: int,
                    rng: np.random.Generator, dt: float = 1.0, act: str = "relu", eps: float = EPS_TV,
                    spectra: bool = False) -> StabilityReport:
    """Perturbation growth through one ResNet block."""
    if trials < 1 or not noise > 0:
        raise ValueError("need trials >= 1 and noise > 0")
    clean = propagate_block(family, weights, y0, dt, act, eps)
    ratios = []
    for _ in range(trials):
        dy = gaussian_perturbation(y0.shape, noise, rng)
        pert = propagate_block(family, weights, y0 + dy, dt, act, eps)
        ratios.append(frobenius_norm(pert - clean) / frobenius_norm(dy))
    report = StabilityReport(ratios, max(ratios), horizon=len(weights) * dt)
    if spectra and family == "parabolic":
        traj = dyn.forward_parabolic(weights, y0, dt, act, eps)
        for w, y in zip(weights, traj.ys):
            lo, hi = jacobian_extremes(w, y, act, eps)
            report.step_eigenvalues.append(lo)
            report.bound_margin.append(max(abs(1 + dt * lo), abs(1 + dt * hi)))
    return report


def perturbation_stability(net, x: np.ndarray, noise: float, trials: int, rng: np.random.Generator,
                           block: int | None = None, spectra: bool = False) -> StabilityReport:
    """Empirical stability of a network's ResNet block(s) on features computed from ``x``.

    Block inputs come from an eval-mode pass. ``block=None`` measures the
    last block.
    """
    s = net.spec
    b_target = len(s.widths) - 1 if block is None else block
    from .layers import conv_bn_relu_forward
    y, _ = conv_bn_relu_forward(net.conv_bn_weights("open"), x, "eval")
    for b in range(b_target):
        out = net.block_output(net.run_block(b, y, store=False))
        y, _ = conv_bn_relu_forward(net.conv_bn_weights(f"conn{b}"), out, "eval", pool=True)
    return block_stability(s.family, net.block_weights(b_target), y, noise, trials, rng,
                           s.dt, s.activation, s.tv_eps, spectra)


# --- second-order energy ---------------------------------------------------------

@dataclass
class EnergyTrace:
    energy: np.ndarray
    energy_lin: np.ndarray

    def rows(self):
        for j, (e, el) in enumerate(zip(self.energy, self.energy_lin)):
            yield {"step": j, "energy": e, "energy_lin": el}


def _energies(w: SymLayerWeights, ys, dt, sigma):
    out = []
    pot = []
    for y in ys:
        ky = conv.apply(w.conv, y)
        pot.append(float(np.sum(ky * sigma(ky))))
    for j in range(len(ys) - 1):
        v = (ys[j + 1] - ys[j]) / dt
        out.append(0.5 * float(np.sum(v * v)) + 0.25 * (pot[j] + pot[j + 1]))
    return np.array(out)


def energy_trace(w: SymLayerWeights, y0: np.ndarray, n_steps: int, dt: float = 1.0,
                 act: str = "tanh") -> EnergyTrace:
    """Discrete energies of a second-order block with time-constant weights.

    Between ``t_j`` and ``t_{j+1}``: half the squared velocity
    ``(Y_{j+1} - Y_j)/dt`` plus half the mean of the two potential terms
    ``(K Y)^T sigma(K Y)``. The linear reference uses sigma = identity on the
    same Leapfrog scheme, i.e. the wave equation ``u'' = -K^T K u``.
    """
    if w.norm is not None:
        raise ValueError("energy trace is defined for layers without normalization")
    sigma, _ = activation(act)
    weights = [w] * n_steps
    ys = dyn.forward_second_order(weights, y0, dt, act, store=True).ys
    us = dyn.forward_second_order(weights, y0, dt, "identity", store=True).ys
    return EnergyTrace(_energies(w, ys, dt, sigma), _energies(w, us, dt, lambda a: a))


# --- classification diagnostics ----------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    accuracy: float
    loss: float

    def rows(self):
        for i, row in enumerate(self.counts):
            yield {"class": i, **{f"pred_{j}": int(c) for j, c in enumerate(row)}}


def confusion_from_scores(scores: np.ndarray, labels: np.ndarray, n_classes: int | None = None) -> ConfusionMatrix:
    """Rows are true classes, columns predicted classes; ``argmax`` ties go to the lowest index."""
    m = scores.shape[1] if n_classes is None else n_classes
    pred = np.argmax(scores, axis=1)
    counts = np.zeros((m, m), dtype=np.int64)
    np.add.at(counts, (labels, pred), 1)
    loss = softmax_cross_entropy(scores, labels)[0] if len(labels) else float("nan")
    acc = float(np.trace(counts)) / max(1, len(labels))
    return ConfusionMatrix(counts, acc, loss)


def confusion_matrix(net, x: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    return confusion_from_scores(net.predict(x), np.asarray(labels), net.spec.n_classes)
