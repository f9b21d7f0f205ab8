"""Multi-channel convolution blocks and their exact transposes.

A block maps ``c_in`` channels to ``c_out`` channels; output channel ``o`` is
the sum over input channels ``i`` of the 2D cross-correlation of channel ``i``
with stencil ``weight[o, i]``. Images are zero-padded so the spatial size is
preserved ("same" convolution). Zero padding keeps the operator linear, which
makes ``apply_transpose`` an exact adjoint, boundary included. Periodic PDE
intuition does not hold at the image border.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ShapeError


@dataclass(frozen=True)
class ConvBlock:
    """Grid of ``c_out x c_in`` square stencils (kernel 1 or 3), stride 1."""

    weight: np.ndarray

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
            raise ShapeError(f"stencil grid must be (c_out, c_in, k, k) with k in (1, 3); got {w.shape}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


def patches(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded k x k neighbourhoods of every pixel, shape (n, c * k * k, h * w).

    The result can be handed to :func:`apply` and :func:`stencil_gradient`
    through their ``cols`` argument to avoid rebuilding it.
    """
    n, c, h, w = x.shape
    if k == 1:
        return x.reshape(n, c, h * w)
    r = k // 2
    xp = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=DTYPE)
    xp[:, :, r:r + h, r:r + w] = x
    out = np.empty((n, c, k * k, h, w), dtype=DTYPE)
    for p in range(k):
        for q in range(k):
            out[:, :, p * k + q] = xp[:, :, p:p + h, q:q + w]
    return out.reshape(n, c * k * k, h * w)


def _correlate(weight: np.ndarray, x: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    c_out, c_in, k, _ = weight.shape
    n, c, h, w = x.shape
    if cols is None:
        cols = patches(x, k)
    out = np.matmul(weight.reshape(c_out, c_in * k * k), cols)
    return out.reshape(n, c_out, h, w)


def apply(k: ConvBlock, x: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != k.c_in:
        raise ShapeError(f"conv expects {k.c_in} input channels, got tensor of shape {x.shape}")
    return _correlate(k.weight, x, cols)


def apply_transpose(k: ConvBlock, y: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`apply`: correlate with the rotated, channel-swapped grid."""
    if y.ndim != 4 or y.shape[1] != k.c_out:
        raise ShapeError(f"conv transpose expects {k.c_out} channels, got tensor of shape {y.shape}")
    wt = k.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return _correlate(np.ascontiguousarray(wt), y)


def stencil_gradient(k: ConvBlock, x: np.ndarray, g: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``<apply(k, x), g>`` with respect to the stencil grid.

    This is the correlation of the input patches with the upstream gradient,
    summed over the batch. ``cols`` may carry ``patches(x, k.kernel)``.
    """
    n, c_in, h, w = x.shape
    if cols is None:
        cols = patches(x, k.kernel)
    gm = g.reshape(n, k.c_out, h * w)
    grad = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
    return grad.reshape(k.weight.shape)


def dense_matrix(k: ConvBlock, h: int, w: int) -> np.ndarray:
    """Materialize the block as a dense matrix acting on flattened (c, h, w) images.

    Built column by column from basis images; meant for tests and small
    spectral computations only.
    """
    n_in = k.c_in * h * w
    basis = np.eye(n_in, dtype=DTYPE).reshape(n_in, k.c_in, h, w)
    cols = apply(k, basis).reshape(n_in, -1)
    return cols.T.copy()
