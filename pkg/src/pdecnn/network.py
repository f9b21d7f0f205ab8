"""Whole-network assembly: opening layer, ResNet blocks with connectors, classifier.

Layout for ``widths = (c_1, ..., c_B)``::

    image -> open(3x3 conv, BN, ReLU) -> c_1
          -> block_1 (N steps) -> connector_1 (1x1 conv, BN, ReLU, pool) -> c_2
          -> ...
          -> block_B (N steps) -> connector_B (1x1 conv, BN, ReLU) -> final_width
          -> channel means -> W feat + mu

Every block is followed by a connector; the last one keeps the width unless
``final_width`` says otherwise and does not pool (a 2x2 mean before a global
mean changes nothing). This layout reproduces the reference weight counts exactly.

Hamiltonian blocks split the ``c`` channels into ``Y`` (first half) and ``Z``
(second half); each step carries two ``c/2``-wide symmetric layers. The
connector after a Hamiltonian block consumes the concatenation ``(Y, Z)``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dynamics as dyn
from .conv import ConvBlock
from .layers import (EPS_TV, BatchNormState, ClassifierWeights, ConvBnWeights, NormWeights,
                     SymLayerWeights, classify_forward, conv_bn_relu_forward)
from .tensor import DTYPE, ShapeError


@dataclass(frozen=True)
class DynamicsSpec:
    family: str = "parabolic"
    widths: tuple = (16, 32)
    steps: int = 3
    dt: float = 1.0
    in_channels: int = 3
    image_size: int = 32
    n_classes: int = 10
    final_width: int | None = None
    activation: str = "relu"
    norm: str = "tv"
    tv_eps: float = EPS_TV

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.family not in dyn.FAMILIES:
            raise ValueError(f"family must be one of {dyn.FAMILIES}, got {self.family!r}")
        if self.steps < 1:
            raise ValueError(f"need at least one time step per block, got {self.steps}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.widths:
            raise ValueError("need at least one ResNet block")
        if self.norm not in ("tv", "none"):
            raise ValueError(f"block normalization must be 'tv' or 'none', got {self.norm!r}")
        if self.family == "hamiltonian" and any(w % 2 for w in self.widths):
            raise ValueError(f"hamiltonian blocks need even widths to split into (Y, Z), got {self.widths}")
        size = self.image_size
        for b in range(len(self.widths) - 1):
            if size % 2:
                raise ShapeError(f"image size {self.image_size} cannot be halved before block {b + 2} (odd size {size})")
            size //= 2

    @property
    def out_width(self) -> int:
        return self.final_width or self.widths[-1]

    def block_sizes(self) -> list[int]:
        return [self.image_size // 2**b for b in range(len(self.widths))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# reference architectures; only the widths/ladder differ
def stl10_spec(family: str) -> DynamicsSpec:
    return DynamicsSpec(family=family, widths=(16, 32, 64, 128), steps=3, image_size=96, n_classes=10)


def cifar10_spec(family: str) -> DynamicsSpec:
    return DynamicsSpec(family=family, widths=(32, 64, 112), steps=3, image_size=32, n_classes=10)


def cifar100_spec(family: str) -> DynamicsSpec:
    return DynamicsSpec(family=family, widths=(32, 64, 128), steps=3, image_size=32, n_classes=100,
                        final_width=256)


class WeightVector(OrderedDict):
    """Named float64 arrays holding every trainable weight, in a fixed order."""

    def copy(self) -> "WeightVector":
        return WeightVector((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "WeightVector":
        return WeightVector((k, np.zeros_like(v)) for k, v in self.items())

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()])

    def set_flat(self, x: np.ndarray) -> None:
        i = 0
        for v in self.values():
            v[...] = x[i:i + v.size].reshape(v.shape)
            i += v.size

    def block_stencil_keys(self) -> list[str]:
        """Keys of ResNet-block convolution stencils (the box-constrained weights)."""
        return [k for k in self if k.startswith("block") and k.endswith("conv")]

    def counts(self) -> dict:
        """Weight count per top-level layer (``open``, ``block0``, ``conn0``, ``cls``...)."""
        out = OrderedDict()
        for k, v in self.items():
            top = k.split(".")[0]
            out[top] = out.get(top, 0) + v.size
        return out


def _step_layer_names(spec: DynamicsSpec, b: int, j: int) -> list[str]:
    if spec.family == "hamiltonian":
        return [f"block{b}.step{j}.y", f"block{b}.step{j}.z"]
    return [f"block{b}.step{j}"]


def _layer_width(spec: DynamicsSpec, c: int) -> int:
    return c // 2 if spec.family == "hamiltonian" else c


def init_weights(spec: DynamicsSpec, rng: np.random.Generator) -> WeightVector:
    """Stencils ~ N(0, 1/(fan_in * k^2)); norm scale 1, bias 0; classifier zero.

    Block stencils are clipped to the box [-1, 1] from the start.
    """
    w = WeightVector()

    def stencil(c_out, c_in, k):
        return rng.standard_normal((c_out, c_in, k, k)) / np.sqrt(c_in * k * k)

    c1 = spec.widths[0]
    w["open.conv"] = stencil(c1, spec.in_channels, 3)
    w["open.norm.scale"] = np.ones(c1)
    w["open.norm.bias"] = np.zeros(c1)
    for b, c in enumerate(spec.widths):
        cl = _layer_width(spec, c)
        for j in range(spec.steps):
            for name in _step_layer_names(spec, b, j):
                w[f"{name}.conv"] = np.clip(stencil(cl, cl, 3), -1.0, 1.0)
                if spec.norm == "tv":
                    w[f"{name}.norm.scale"] = np.ones(cl)
                    w[f"{name}.norm.bias"] = np.zeros(cl)
        c_next = spec.widths[b + 1] if b + 1 < len(spec.widths) else spec.out_width
        w[f"conn{b}.conv"] = stencil(c_next, c, 1)
        w[f"conn{b}.norm.scale"] = np.ones(c_next)
        w[f"conn{b}.norm.bias"] = np.zeros(c_next)
    w["cls.W"] = np.zeros((spec.n_classes, spec.out_width))
    w["cls.mu"] = np.zeros(spec.n_classes)
    return w


def count_weights(spec: DynamicsSpec) -> int:
    """Trainable weight count without allocating anything large."""
    c1 = spec.widths[0]
    total = 9 * spec.in_channels * c1 + 2 * c1
    per_norm = 2 if spec.norm == "tv" else 0
    for b, c in enumerate(spec.widths):
        cl = _layer_width(spec, c)
        n_layers = spec.steps * len(_step_layer_names(spec, b, 0))
        total += n_layers * (9 * cl * cl + per_norm * cl)
        c_next = spec.widths[b + 1] if b + 1 < len(spec.widths) else spec.out_width
        total += c * c_next + 2 * c_next
    return total + spec.n_classes * (spec.out_width + 1)


@dataclass
class ForwardRecord:
    """What the backward pass needs from one forward evaluation."""

    scores: np.ndarray
    open_cache: object
    blocks: list
    conn_caches: list
    cls_cache: object
    strategy: str


@dataclass
class Network:
    """A parameterized PDE-ResNet: spec, weights, and batch-norm running statistics."""

    spec: DynamicsSpec
    weights: WeightVector
    bn_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.bn_stats:
            self.bn_stats = {"open": BatchNormState.fresh(self.spec.widths[0])}
            for b in range(len(self.spec.widths)):
                self.bn_stats[f"conn{b}"] = BatchNormState.fresh(self.weights[f"conn{b}.conv"].shape[0])

    @classmethod
    def create(cls, spec: DynamicsSpec, seed: int = 0) -> "Network":
        from .tensor import make_rng
        return cls(spec, init_weights(spec, make_rng(seed)))

    # weight views --------------------------------------------------------

    def sym_weights(self, name: str, w: WeightVector | None = None) -> SymLayerWeights:
        w = self.weights if w is None else w
        norm = None
        if self.spec.norm == "tv":
            norm = NormWeights(w[f"{name}.norm.scale"], w[f"{name}.norm.bias"])
        return SymLayerWeights(ConvBlock(w[f"{name}.conv"]), norm)

    def block_weights(self, b: int) -> list:
        """Per-step layer weights of block ``b``; pairs ``(theta1, theta2)`` for Hamiltonian."""
        out = []
        for j in range(self.spec.steps):
            names = _step_layer_names(self.spec, b, j)
            if self.spec.family == "hamiltonian":
                out.append((self.sym_weights(names[0]), self.sym_weights(names[1])))
            else:
                out.append(self.sym_weights(names[0]))
        return out

    def conv_bn_weights(self, name: str) -> ConvBnWeights:
        w = self.weights
        return ConvBnWeights(ConvBlock(w[f"{name}.conv"]),
                             NormWeights(w[f"{name}.norm.scale"], w[f"{name}.norm.bias"]),
                             self.bn_stats[name])

    def classifier_weights(self) -> ClassifierWeights:
        return ClassifierWeights(self.weights["cls.W"], self.weights["cls.mu"])

    # forward -------------------------------------------------------------

    def run_block(self, b: int, y0: np.ndarray, store: bool) -> dyn.Trajectory:
        s = self.spec
        kw = dict(dt=s.dt, act=s.activation, eps=s.tv_eps)
        weights = self.block_weights(b)
        if s.family == "parabolic":
            return dyn.forward_parabolic(weights, y0, keep_caches=store, **kw)
        if s.family == "hamiltonian":
            half = y0.shape[1] // 2
            return dyn.forward_hamiltonian(weights, y0[:, :half], y0[:, half:], store=store, **kw)
        return dyn.forward_second_order(weights, y0, store=store, **kw)

    def block_output(self, traj: dyn.Trajectory) -> np.ndarray:
        if traj.family == "hamiltonian":
            return np.concatenate([traj.y_final, traj.z_final], axis=1)
        return traj.y_final

    def forward(self, x: np.ndarray, mode: str = "train", strategy: str = "reversible",
                update_stats: bool = True) -> ForwardRecord:
        """Forward pass keeping what ``strategy`` ('stored' or 'reversible') needs."""
        if strategy not in ("stored", "reversible"):
            raise ValueError(f"strategy must be 'stored' or 'reversible', got {strategy!r}")
        s = self.spec
        if x.ndim != 4 or x.shape[1] != s.in_channels:
            raise ShapeError(f"network expects {s.in_channels}-channel images, got shape {x.shape}")
        store = strategy == "stored" or s.family == "parabolic"
        y, open_cache = conv_bn_relu_forward(self.conv_bn_weights("open"), np.asarray(x, dtype=DTYPE),
                                             mode, update_stats=update_stats)
        blocks, conns = [], []
        last = len(s.widths) - 1
        for b in range(len(s.widths)):
            traj = self.run_block(b, y, store)
            blocks.append(traj)
            y, cc = conv_bn_relu_forward(self.conv_bn_weights(f"conn{b}"), self.block_output(traj),
                                         mode, pool=b < last, update_stats=update_stats)
            conns.append(cc)
        scores, cls_cache = classify_forward(self.classifier_weights(), y)
        return ForwardRecord(scores, open_cache, blocks, conns, cls_cache, strategy if s.family != "parabolic" else "stored")

    def predict(self, x: np.ndarray, batch_size: int = 250) -> np.ndarray:
        """Eval-mode class scores, computed in chunks."""
        out = []
        for i in range(0, x.shape[0], batch_size):
            out.append(self.forward(x[i:i + batch_size], mode="eval", strategy="reversible").scores)
        return np.concatenate(out) if out else np.zeros((0, self.spec.n_classes))


def forward_network(net: Network, x: np.ndarray, mode: str = "train", strategy: str = "reversible"):
    """Class scores plus the forward record used by the adjoint."""
    rec = net.forward(x, mode, strategy)
    return rec.scores, rec
