"""Deterministic dense float64 array arithmetic.

Matrices are plain 2-D C-contiguous float64 ndarrays. Every contraction in
the package funnels through :func:`contract`, a thin einsum wrapper with
``optimize=False``. Unoptimized einsum runs single-threaded C loops with a
fixed accumulation order, so results are bitwise reproducible across runs
and independent of BLAS thread counts. Everything here is desk-scale; no
attempt is made to compete with BLAS.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyInputError, NumericError, ShapeError

_ELEMENTWISE_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array, validating finiteness."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name}: contains non-finite entries")
    return m


def contract(subscripts: str, *operands: np.ndarray) -> np.ndarray:
    """einsum with a pinned, unoptimized (deterministic) evaluation path."""
    return np.einsum(subscripts, *operands, optimize=False)


def matmul(a, b) -> np.ndarray:
    """Matrix product with deterministic summation over the inner dimension."""
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    return contract("ik,kj->ij", a, b)


def elementwise(a, b, op: str) -> np.ndarray:
    """Entrywise add/sub/mul of two same-shape matrices."""
    if op not in _ELEMENTWISE_OPS:
        raise ValueError(f"elementwise: unknown op {op!r}, expected add|sub|mul")
    a = as_matrix(a, "elementwise lhs")
    b = as_matrix(b, "elementwise rhs")
    if a.shape != b.shape:
        raise ShapeError(f"elementwise: shape mismatch, {a.shape} vs {b.shape}")
    return _ELEMENTWISE_OPS[op](a, b)


def reduce_mean_rows(a) -> np.ndarray:
    """Column-wise mean of a (T, D) matrix; the temporal-mean descriptor."""
    a = as_matrix(a, "reduce_mean_rows input")
    if a.shape[0] == 0:
        raise EmptyInputError("reduce_mean_rows: matrix has no rows")
    return a.sum(axis=0) / a.shape[0]
