"""Dense feature tensors and seeded randomness.

Features are plain ``numpy.ndarray`` objects of dtype float64 laid out as
``(batch, channel, height, width)``. Every module in the package assumes this
axis ordering. Broadcasting is limited to scalar-with-tensor; anything else
must be reshaped explicitly by the caller.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64

_UNARY = {
    "relu": lambda a: np.maximum(a, 0.0),
    "tanh": np.tanh,
    "neg": np.negative,
    "identity": lambda a: a.copy(),
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


class ShapeError(ValueError):
    pass


def as_tensor(values, ndim: int | None = 4) -> np.ndarray:
    """Copy ``values`` into a contiguous float64 array, optionally checking rank."""
    a = np.array(values, dtype=DTYPE, copy=True, order="C")
    if ndim is not None and a.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-axis tensor, got shape {a.shape}")
    return a


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def elementwise(op: str, a, b=None, scale: float | None = None) -> np.ndarray:
    """Apply a named entrywise operation.

    Unary ops: ``relu``, ``tanh``, ``neg``, ``identity`` and ``scale`` (needs
    ``scale``). Binary ops: ``add``, ``sub``, ``mul``; ``b`` must have the
    same shape as ``a``.
    """
    a = np.asarray(a, dtype=DTYPE)
    if op == "scale":
        if scale is None:
            raise ValueError("op 'scale' needs a scale factor")
        return a * float(scale)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"op {op!r} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"op {op!r} needs two operands")
        b = np.asarray(b, dtype=DTYPE)
        check_same_shape(a, b)
        return _BINARY[op](a, b)
    raise ValueError(f"unknown op {op!r}")


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=DTYPE).ravel()
    return float(np.sqrt(np.dot(a, a)))


def inner_product(a, b) -> float:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    check_same_shape(a, b)
    return float(np.dot(a.ravel(), b.ravel()))


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; streams are identical across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
