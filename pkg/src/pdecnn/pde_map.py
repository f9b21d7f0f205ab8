"""Change of coordinates between 3-point/3x3 stencils and differential operators.

In 1D a stencil ``theta`` applied by cross-correlation on a grid of width
``h`` decomposes as::

    theta = b1/4 [1, 2, 1] + b2/(2h) [-1, 0, 1] + b3/h^2 [-1, 2, -1]

so ``b1`` weighs reaction (a smoothed identity), ``b2`` convection (central
difference, +d/dx under correlation) and ``b3`` diffusion. Note that
``[-1, 2, -1]/h^2`` is the *negated* second difference, so a positive ``b3``
yields ``-d^2/dx^2``.

The 2D map is the tensor product of the 1D map with itself: the stencil of
``d^a/dx^a d^b/dy^b`` is ``outer(col_b, col_a)`` where ``col_k`` is the k-th
basis column above (rows index y, columns index x). The nine coefficients are
ordered as ``1, dx, dy, dx^2, dy^2, dxdy, dx^2dy, dxdy^2, dx^2dy^2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# (x-order, y-order) of each 2D coefficient, in storage order
ORDERS_2D = ((0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1), (2, 1), (1, 2), (2, 2))
NAMES_2D = ("1", "dx", "dy", "dxx", "dyy", "dxdy", "dxxdy", "dxdyy", "dxxdyy")
NAMES_1D = ("reaction", "convection", "diffusion")


@dataclass(frozen=True)
class PdeCoeffs1D:
    beta: np.ndarray
    h: float


@dataclass(frozen=True)
class PdeCoeffs2D:
    beta: np.ndarray
    h: float


def _check_h(h: float) -> float:
    h = float(h)
    if not h > 0:
        raise ValueError(f"mesh width must be positive, got h={h}")
    return h


def map_matrix_1d(h: float) -> np.ndarray:
    """3x3 matrix M with ``theta = M @ beta``."""
    h = _check_h(h)
    return np.array([
        [0.25, -1 / (2 * h), -1 / h**2],
        [0.5, 0.0, 2 / h**2],
        [0.25, 1 / (2 * h), -1 / h**2],
    ])


def map_matrix_2d(h: float) -> np.ndarray:
    """9x9 matrix T with ``theta.ravel() = T @ beta`` (row-major 3x3 stencil)."""
    m = map_matrix_1d(h)
    t = np.empty((9, 9))
    for col, (a, b) in enumerate(ORDERS_2D):
        t[:, col] = np.outer(m[:, b], m[:, a]).ravel()
    return t


def beta_to_theta_1d(c: PdeCoeffs1D) -> np.ndarray:
    return map_matrix_1d(c.h) @ np.asarray(c.beta, dtype=float)


def theta_to_beta_1d(theta, h: float) -> PdeCoeffs1D:
    beta = np.linalg.solve(map_matrix_1d(h), np.asarray(theta, dtype=float).ravel())
    return PdeCoeffs1D(beta=beta, h=float(h))


def beta_to_theta_2d(c: PdeCoeffs2D) -> np.ndarray:
    return (map_matrix_2d(c.h) @ np.asarray(c.beta, dtype=float)).reshape(3, 3)


def theta_to_beta_2d(theta, h: float) -> PdeCoeffs2D:
    t = map_matrix_2d(h)
    # |det(T)| = |det(M)|^6 = h^-18 (column order only flips the sign), nonzero for h > 0
    assert abs(np.linalg.det(map_matrix_1d(h))) > 0
    beta = np.linalg.solve(t, np.asarray(theta, dtype=float).reshape(9))
    return PdeCoeffs2D(beta=beta, h=float(h))
