"""Regularized learning problem, box-constrained SGD with momentum, and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .adjoint import backprop_network
from .network import DynamicsSpec, Network, WeightVector
from .tensor import make_rng

log = logging.getLogger(__name__)

BOX = 1.0


@dataclass(frozen=True)
class RegParams:
    """Weights of the time-TV and Tikhonov terms and the smoothing ``tau`` of ``sqrt(x^2 + tau)``."""

    alpha1: float = 4e-4
    alpha2: float = 1e-4
    tau: float = 1e-3

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("regularization weights must be nonnegative")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


STL10_REG = RegParams(4e-4, 1e-4)
CIFAR_REG = RegParams(2e-4, 2e-4)


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple = ((60, 0.1), (20, 0.02), (20, 0.004))
    momentum: float = 0.9
    batch_size: int = 125
    augment: bool = False
    seed: int = 0
    strategy: str = "reversible"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(e), float(lr)) for e, lr in self.stages))
        if not self.stages:
            raise ValueError("need at least one training stage")
        for epochs, lr in self.stages:
            if epochs < 1 or not lr > 0:
                raise ValueError(f"stage ({epochs}, {lr}) needs positive epochs and step size")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    @property
    def total_epochs(self) -> int:
        return sum(e for e, _ in self.stages)

    def lr_at(self, epoch: int) -> tuple[int, float]:
        """(stage index, step size) for a zero-based epoch."""
        end = 0
        for i, (e, lr) in enumerate(self.stages):
            end += e
            if epoch < end:
                return i, lr
        raise IndexError(f"epoch {epoch} beyond schedule of {end} epochs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d


STL10_SCHEDULE = ((60, 0.1), (20, 0.02), (20, 0.004))
CIFAR100_SCHEDULE = ((60, 0.1), (40, 0.02), (40, 0.004), (40, 0.0008), (20, 0.00016))


# --- regularizer -----------------------------------------------------------

def _step_groups(w: WeightVector, spec: DynamicsSpec) -> list[list[list[str]]]:
    """Keys of each block's per-step weights: ``groups[b][j]`` is a list of keys."""
    groups = []
    for b in range(len(spec.widths)):
        steps = []
        for j in range(spec.steps):
            prefix = f"block{b}.step{j}."
            steps.append([k for k in w if k.startswith(prefix)])
        groups.append(steps)
    return groups


def regularizer(w: WeightVector, spec: DynamicsSpec, rp: RegParams) -> tuple[float, WeightVector]:
    """Time-TV plus Tikhonov penalty on the block weights and classifier.

    Within each block, ``theta_j`` collects every weight of time step ``j``.
    The time derivative at step ``j`` is the forward difference
    ``(theta_{j+1} - theta_j) / dt`` and is zero at the last step, so the
    Riemann sum has ``N`` terms. The smoothed absolute value
    ``sqrt(x^2 + tau)`` is applied entrywise. No coupling crosses connectors.
    """
    dt = spec.dt
    grad = w.zeros_like()
    value = 0.0
    for block in _step_groups(w, spec):
        thetas = [np.concatenate([w[k].ravel() for k in keys]) for keys in block]
        n = len(thetas)
        tv_grads = [np.zeros_like(t) for t in thetas]
        tv = n * thetas[0].size * math.sqrt(rp.tau)  # zero derivative at the last step
        for j in range(n - 1):
            d = (thetas[j + 1] - thetas[j]) / dt
            phi = np.sqrt(d * d + rp.tau)
            tv += float(np.sum(phi)) - thetas[0].size * math.sqrt(rp.tau)
            dphi = d / phi  # d/dtheta of dt * phi((theta_{j+1} - theta_j)/dt)
            tv_grads[j + 1] += dphi
            tv_grads[j] -= dphi
        value += rp.alpha1 * dt * tv
        for j, keys in enumerate(block):
            value += 0.5 * rp.alpha2 * dt * float(np.dot(thetas[j], thetas[j]))
            i = 0
            for k in keys:
                size = w[k].size
                grad[k] += (rp.alpha1 * tv_grads[j][i:i + size] + rp.alpha2 * dt * thetas[j][i:i + size]).reshape(w[k].shape)
                i += size
    for k in ("cls.W", "cls.mu"):
        value += 0.5 * rp.alpha2 * float(np.sum(w[k] ** 2))
        grad[k] += rp.alpha2 * w[k]
    return value, grad


def objective(net: Network, x: np.ndarray, labels, rp: RegParams, strategy: str = "reversible",
              update_stats: bool = False):
    """Mean cross-entropy plus regularizer, with its gradient.

    Returns ``(value, grads, scores)``.
    """
    if x.shape[0] == 0:
        raise ValueError("objective needs a non-empty batch")
    rec = net.forward(x, "train", strategy, update_stats=update_stats)
    loss, g = L.softmax_cross_entropy(rec.scores, labels)
    grads = backprop_network(net, rec, g)
    rv, rg = regularizer(net.weights, net.spec, rp)
    for k in grads:
        grads[k] += rg[k]
    return loss + rv, grads, rec.scores


# --- optimizer -------------------------------------------------------------

def project_box(w: WeightVector, bound: float = BOX) -> None:
    for k in w.block_stencil_keys():
        np.clip(w[k], -bound, bound, out=w[k])


def sgd_step(w: WeightVector, velocity: WeightVector, grads: WeightVector, lr: float,
             momentum: float = 0.9, bound: float | None = BOX) -> None:
    """In place: ``v = momentum v + g``; ``w -= lr v``; clip block stencils to the box."""
    if not lr > 0:
        raise ValueError(f"step size must be positive, got {lr}")
    for k in w:
        v = velocity[k]
        v *= momentum
        v += grads[k]
        w[k] -= lr * v
    if bound is not None:
        project_box(w, bound)


# --- augmentation ----------------------------------------------------------

def augment_params(size: int) -> tuple[int, int]:
    """(pad per side, number of crop offsets per axis) for a square image."""
    pad = math.ceil(size / 16)
    return pad, 2 * pad + 1


def augment(image: np.ndarray, rng: np.random.Generator, flip: bool | None = None,
            offset: tuple[int, int] | None = None) -> np.ndarray:
    """Random horizontal flip, zero-pad by ceil(size/16) per side, random crop back.

    ``image`` is (channels, h, w) with h == w. ``flip`` and ``offset`` force the
    random decisions (offset (pad, pad) is the centered crop).
    """
    c, h, w = image.shape
    if h != w:
        raise ValueError(f"augmentation expects square images, got {h}x{w}")
    pad, n_off = augment_params(h)
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if offset is None:
        offset = (int(rng.integers(n_off)), int(rng.integers(n_off)))
    out = image[:, :, ::-1] if flip else image
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad))
    padded[:, pad:pad + h, pad:pad + w] = out
    r, q = offset
    return padded[:, r:r + h, q:q + w].copy()


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, rng) for img in x])


# --- training loop ---------------------------------------------------------

def accuracy_and_loss(net: Network, x: np.ndarray, labels: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Eval-mode accuracy, mean cross-entropy, and predicted classes (ties to lowest index)."""
    scores = net.predict(x)
    loss, _ = L.softmax_cross_entropy(scores, labels)
    pred = np.argmax(scores, axis=1)
    return float(np.mean(pred == labels)), loss, pred


def copy_bn(stats: dict) -> dict:
    return {k: L.BatchNormState(v.mean.copy(), v.var.copy()) for k, v in stats.items()}


def best_network(state: "TrainState") -> Network:
    """Network carrying the best-validation weights and their batch-norm statistics."""
    return Network(state.net.spec, state.best_weights.copy(), copy_bn(state.best_bn))


@dataclass
class TrainState:
    """Everything needed to resume training exactly."""

    net: Network
    velocity: WeightVector
    rng: np.random.Generator
    epoch: int = 0
    best_acc: float = -1.0
    best_loss: float = math.inf
    best_epoch: int = -1
    best_weights: WeightVector | None = None
    best_bn: dict | None = None
    history: list = field(default_factory=list)


def new_state(spec: DynamicsSpec, cfg: TrainConfig) -> TrainState:
    rng = make_rng(cfg.seed)
    init_seed = int(rng.integers(2**63))
    net = Network.create(spec, seed=init_seed)
    return TrainState(net, net.weights.zeros_like(), rng)


def train_epoch(state: TrainState, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, rp: RegParams) -> dict:
    _, lr = cfg.lr_at(state.epoch)
    net = state.net
    order = state.rng.permutation(x.shape[0])
    losses, correct, seen = [], 0, 0
    for i in range(0, len(order), cfg.batch_size):
        idx = order[i:i + cfg.batch_size]
        xb = x[idx]
        if cfg.augment:
            xb = augment_batch(xb, state.rng)
        value, grads, scores = objective(net, xb, y[idx], rp, cfg.strategy, update_stats=True)
        sgd_step(net.weights, state.velocity, grads, lr, cfg.momentum)
        losses.append(value * len(idx))
        correct += int(np.sum(np.argmax(scores, axis=1) == y[idx]))
        seen += len(idx)
    return {"lr": lr, "train_objective": sum(losses) / seen, "train_batch_acc": correct / seen}


def train(data, spec: DynamicsSpec, cfg: TrainConfig, rp: RegParams, state: TrainState | None = None,
          on_epoch=None, stop_after: int | None = None):
    """Run the staged schedule; keep the weights with the best validation accuracy.

    ``data`` needs ``x_train, y_train, x_val, y_val`` attributes. ``on_epoch``
    is called with the state after every epoch (used for checkpointing).
    ``stop_after`` ends the run early after that many epochs in total, leaving
    a state that can be resumed. Returns ``(best_weights, history, state)``.
    """
    if state is None:
        state = new_state(spec, cfg)
    end = cfg.total_epochs if stop_after is None else min(cfg.total_epochs, stop_after)
    while state.epoch < end:
        stage, _ = cfg.lr_at(state.epoch)
        row = {"epoch": state.epoch + 1, "stage": stage + 1}
        row.update(train_epoch(state, data.x_train, data.y_train, cfg, rp))
        tr_acc, tr_loss, _ = accuracy_and_loss(state.net, data.x_train, data.y_train)
        va_acc, va_loss, _ = accuracy_and_loss(state.net, data.x_val, data.y_val)
        row.update(train_loss=tr_loss, train_acc=tr_acc, val_loss=va_loss, val_acc=va_acc)
        if va_acc > state.best_acc or (va_acc == state.best_acc and va_loss < state.best_loss):
            state.best_acc, state.best_loss, state.best_epoch = va_acc, va_loss, state.epoch + 1
            state.best_weights = state.net.weights.copy()
            state.best_bn = copy_bn(state.net.bn_stats)
        state.history.append(row)
        state.epoch += 1
        log.info("epoch %d lr %.2g loss %.4f train %.3f val %.3f", row["epoch"], row["lr"],
                 tr_loss, tr_acc, va_acc)
        if on_epoch is not None:
            on_epoch(state)
    return state.best_weights, state.history, state


# --- checkpoint bridge -----------------------------------------------------

def _bn_pairs(stats: dict) -> dict:
    return {k: (v.mean, v.var) for k, v in stats.items()}


def _bn_states(pairs: dict) -> dict:
    return {k: L.BatchNormState(np.array(m), np.array(v)) for k, (m, v) in pairs.items()}


def state_to_checkpoint(state: TrainState, cfg: TrainConfig, rp: RegParams, data=None):
    from .checkpoint import Checkpoint
    return Checkpoint(
        spec=state.net.spec.to_dict(),
        weights=dict(state.net.weights),
        velocity=dict(state.velocity),
        bn=_bn_pairs(state.net.bn_stats),
        best_weights=dict(state.best_weights or {}),
        best_bn=_bn_pairs(state.best_bn or {}),
        rng_state=state.rng.bit_generator.state,
        epoch=state.epoch,
        best={"acc": state.best_acc, "loss": state.best_loss, "epoch": state.best_epoch},
        train_config=cfg.to_dict(),
        reg=asdict(rp),
        history=state.history,
        data_mean=None if data is None else data.mean,
        data_std=None if data is None else data.std,
    )


def state_from_checkpoint(cp) -> TrainState:
    spec = DynamicsSpec(**cp.spec)
    weights = WeightVector((k, np.array(v)) for k, v in cp.weights.items())
    net = Network(spec, weights, _bn_states(cp.bn))
    velocity = WeightVector((k, np.array(cp.velocity[k])) for k in weights) if cp.velocity else weights.zeros_like()
    rng = np.random.Generator(np.random.PCG64())
    if cp.rng_state is not None:
        rng.bit_generator.state = cp.rng_state
    best_w = WeightVector((k, np.array(cp.best_weights[k])) for k in weights) if cp.best_weights else None
    return TrainState(net, velocity, rng, cp.epoch, cp.best.get("acc", -1.0), cp.best.get("loss", math.inf),
                      cp.best.get("epoch", -1), best_w, _bn_states(cp.best_bn) if cp.best_bn else None,
                      list(cp.history))
