"""Dense 2-D float64 substrate shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, C-contiguous
(row-major). Randomness always comes from ``numpy.random.PCG64`` seeded
explicitly; nothing in the package touches a global RNG.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent PCG64 streams derived from one seed via SeedSequence."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def pairwise_sqeuclidean(x, y=None) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``x`` and ``y``.

    When ``y`` is omitted (or is ``x``) the result is exactly symmetric with a
    zero diagonal.
    """
    x = as_matrix(x, "x")
    same = y is None or y is x
    y = x if same else as_matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_sqeuclidean: column mismatch {x.shape} vs {y.shape}")
    xx = np.einsum("ij,ij->i", x, x)
    yy = xx if same else np.einsum("ij,ij->i", y, y)
    d = xx[:, None] + yy[None, :] - 2.0 * (x @ y.T)
    np.maximum(d, 0.0, out=d)
    if same:
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
    return d


def l2_normalize(x, eps: float = 1e-12) -> np.ndarray:
    x = as_matrix(x)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    return x / np.maximum(norms, eps)[:, None]


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
