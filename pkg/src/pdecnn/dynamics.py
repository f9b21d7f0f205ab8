"""Time integrators for the three residual architectures.

* parabolic: forward Euler on ``dY/dt = F_sym(theta(t), Y)``;
* hamiltonian: symplectic Verlet on the coupled pair (Y, Z);
* second_order: Leapfrog on ``d^2Y/dt^2 = F_sym(theta(t), Y)`` with zero
  initial velocity (``Y_{-1} = Y_0``).

The hyperbolic integrators are reversible, so the corresponding ``reverse_*``
functions rebuild every earlier state from the final ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import EPS_TV, SymLayerWeights, sym_layer, sym_layer_forward

FAMILIES = ("parabolic", "hamiltonian", "second_order")


@dataclass
class Trajectory:
    """States of one ResNet block, ordered in time.

    ``ys[k]`` is ``Y`` at the ``k``-th retained time index ``steps[k]``;
    ``zs`` mirrors it for the Hamiltonian family. When ``stored`` is False
    only the states needed to run the block backwards are kept.
    ``caches`` optionally holds the per-step layer caches of a stored
    parabolic pass so the adjoint need not recompute them.
    """

    family: str
    n_steps: int
    ys: list
    zs: list | None = None
    steps: list = field(default_factory=list)
    stored: bool = True
    caches: list | None = None

    @property
    def y_final(self) -> np.ndarray:
        return self.ys[-1]

    @property
    def z_final(self) -> np.ndarray:
        return self.zs[-1]

    def __len__(self):
        return len(self.ys)


def _check_width(weights, y, what):
    for w in weights:
        if w.conv.c_in != y.shape[1]:
            raise ValueError(f"{what}: layer width {w.conv.c_in} does not match feature channels {y.shape[1]}")


def forward_parabolic(weights: Sequence[SymLayerWeights], y0: np.ndarray, dt: float = 1.0,
                      act: str = "relu", eps: float = EPS_TV, keep_caches: bool = False) -> Trajectory:
    """``Y_{j+1} = Y_j + dt F_sym(theta_j, Y_j)``; always keeps all N+1 states."""
    _check_width(weights, y0, "parabolic block")
    ys = [y0]
    caches = [] if keep_caches else None
    y = y0
    for w in weights:
        f, cache = sym_layer_forward(w, y, act, eps)
        if keep_caches:
            caches.append(cache)
        y = y + dt * f
        ys.append(y)
    n = len(weights)
    return Trajectory("parabolic", n, ys, steps=list(range(n + 1)), stored=True, caches=caches)


def forward_hamiltonian(weights: Sequence[tuple[SymLayerWeights, SymLayerWeights]], y0: np.ndarray,
                        z0: np.ndarray | None = None, dt: float = 1.0, act: str = "relu",
                        eps: float = EPS_TV, store: bool = False) -> Trajectory:
    """Verlet steps ``Y += dt F_sym(theta1, Z)`` then ``Z -= dt F_sym(theta2, Y)``.

    ``weights[j] = (theta1_j, theta2_j)``. With ``store=False`` only the final
    pair is kept.
    """
    if z0 is None:
        z0 = np.zeros_like(y0)
    _check_width([w for w, _ in weights], z0, "hamiltonian block (theta1)")
    _check_width([w for _, w in weights], y0, "hamiltonian block (theta2)")
    y, z = y0, z0
    ys, zs = [y0], [z0]
    for w1, w2 in weights:
        y = y + dt * sym_layer(w1, z, act, eps)
        z = z - dt * sym_layer(w2, y, act, eps)
        if store:
            ys.append(y)
            zs.append(z)
    n = len(weights)
    if store:
        return Trajectory("hamiltonian", n, ys, zs, steps=list(range(n + 1)), stored=True)
    return Trajectory("hamiltonian", n, [y], [z], steps=[n], stored=False)


def reverse_hamiltonian(weights, y_n: np.ndarray, z_n: np.ndarray, dt: float = 1.0,
                        act: str = "relu", eps: float = EPS_TV) -> Trajectory:
    """Run the Verlet scheme backwards; returns all states ordered 0..N."""
    y, z = y_n, z_n
    ys, zs = [y], [z]
    for w1, w2 in reversed(list(weights)):
        z = z + dt * sym_layer(w2, y, act, eps)
        y = y - dt * sym_layer(w1, z, act, eps)
        ys.append(y)
        zs.append(z)
    n = len(ys) - 1
    return Trajectory("hamiltonian", n, ys[::-1], zs[::-1], steps=list(range(n + 1)), stored=True)


def forward_second_order(weights: Sequence[SymLayerWeights], y0: np.ndarray, dt: float = 1.0,
                         act: str = "relu", eps: float = EPS_TV, store: bool = False) -> Trajectory:
    """Leapfrog ``Y_{j+1} = 2 Y_j - Y_{j-1} + dt^2 F_sym(theta_j, Y_j)`` from ``Y_{-1} = Y_0``.

    With ``store=False`` only ``(Y_{N-1}, Y_N)`` are kept, which is exactly
    what :func:`reverse_second_order` needs.
    """
    _check_width(weights, y0, "second-order block")
    prev, y = y0, y0
    ys = [y0]
    for w in weights:
        prev, y = y, 2 * y - prev + dt * dt * sym_layer(w, y, act, eps)
        ys.append(y)
        if not store and len(ys) > 2:
            del ys[0]
    n = len(weights)
    if store:
        return Trajectory("second_order", n, ys, steps=list(range(n + 1)), stored=True)
    return Trajectory("second_order", n, ys, steps=list(range(n + 1 - len(ys), n + 1)), stored=False)


def reverse_second_order(weights, y_n: np.ndarray, y_nm1: np.ndarray, dt: float = 1.0,
                         act: str = "relu", eps: float = EPS_TV) -> Trajectory:
    """``Y_{j-1} = 2 Y_j - Y_{j+1} + dt^2 F_sym(theta_j, Y_j)``; returns states 0..N."""
    weights = list(weights)
    nxt, y = y_n, y_nm1
    ys = [y_n, y_nm1]
    for w in reversed(weights[1:]):
        nxt, y = y, 2 * y - nxt + dt * dt * sym_layer(w, y, act, eps)
        ys.append(y)
    n = len(weights)
    return Trajectory("second_order", n, ys[::-1], steps=list(range(n + 1)), stored=True)
