"""Small dense linear-algebra helpers shared by the rest of the package.

Matrices and vectors are plain float64 numpy arrays (2-D and 1-D).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

TAU_NORM = 1e-8
FD_STEP = 1e-5


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def as_vector(v, name: str = "vector") -> np.ndarray:
    a = np.array(v, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    if M.shape[1] != v.shape[0]:
        raise ValueError(f"cannot multiply matrix of shape {M.shape} by vector of shape {v.shape}")
    return M @ v


def frobenius_norm(M: np.ndarray) -> float:
    # scale by the largest entry so tiny or huge matrices neither underflow nor overflow
    m = float(np.max(np.abs(M))) if np.size(M) else 0.0
    if m == 0.0 or not np.isfinite(m):
        return m
    return m * float(np.sqrt(np.sum(np.square(M / m))))


def frobenius_inner(A: np.ndarray, B: np.ndarray) -> float:
    return float(np.sum(A * B))


def tangent_project(direction: np.ndarray, V: np.ndarray, tol: float = TAU_NORM) -> np.ndarray:
    """Remove the component of `direction` along the unit-norm matrix `V`.

    This is the flattened ``I - v v^T`` projector onto the tangent space of
    the unit Frobenius sphere at `V`.
    """
    nv = frobenius_norm(V)
    if abs(nv - 1.0) > tol:
        raise ValueError(f"V must have unit Frobenius norm (got {nv!r})")
    return direction - frobenius_inner(V, direction) * V


def finite_diff_grad(
    func: Callable[[np.ndarray], float], at: np.ndarray, h: float = FD_STEP
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix, entry by entry."""
    if h <= 0:
        raise ValueError("step h must be positive")
    X = np.array(at, dtype=np.float64)
    G = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        orig = X[idx]
        X[idx] = orig + h
        fp = func(X.copy())
        X[idx] = orig - h
        fm = func(X.copy())
        X[idx] = orig
        G[idx] = (fp - fm) / (2.0 * h)
    return G
