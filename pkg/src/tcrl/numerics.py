"""Differentiable primitives shared by the losses, plus a finite-difference checker."""

from __future__ import annotations

from typing import Callable

import numpy as np

NORM_EPS = 1e-12
FD_STEP = 1e-5


class InvalidInput(ValueError):
    """Raised on non-finite, mis-shaped or degenerate numeric input."""


def _as_vector(v, name: str = "v") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInput(f"{name} must be a non-empty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} has non-finite entries")
    return arr


def _same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidInput(f"dimension mismatch: {a.shape} vs {b.shape}")


def softmax(v) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("softmax input has non-finite entries")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    shifted = arr - arr.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logsumexp(v, axis=-1) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    m = arr.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(arr - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def kl_div(p, q) -> float:
    """KL(p || q) in nats; terms with p[i] == 0 contribute nothing."""
    p = _as_vector(p, "p")
    q = _as_vector(q, "q")
    _same_dim(p, q)
    if np.any(q <= 0):
        raise InvalidInput("q must be strictly positive")
    if np.any(p < 0):
        raise InvalidInput("p must be nonnegative")
    nz = p > 0
    return float(max(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))), 0.0))


def l2_distance(a, b) -> float:
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    _same_dim(a, b)
    return float(np.linalg.norm(a - b))


def cosine_sim(a, b) -> float:
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    _same_dim(a, b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise InvalidInput("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l2_normalize(v) -> np.ndarray:
    """Scale `v` (or each row of a matrix) to unit Euclidean length."""
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("cannot normalize non-finite input")
    norm = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norm <= NORM_EPS):
        raise InvalidInput("cannot normalize a (near-)zero vector")
    return arr / norm


def grad_check(f: Callable[[np.ndarray], float], x, g_analytic, h: float = FD_STEP) -> float:
    """Compare an analytic gradient against central differences.

    Works for arrays of any shape. Returns the max over coordinates of
    ``|g_fd - g_an| / max(1, |g_fd|)``.
    """
    x = np.array(x, dtype=np.float64)
    g_analytic = np.asarray(g_analytic, dtype=np.float64)
    if g_analytic.shape != x.shape:
        raise InvalidInput(f"gradient shape {g_analytic.shape} != input shape {x.shape}")
    flat = x.reshape(-1)
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise InvalidInput(f"non-finite function value near coordinate {i}")
        g_fd[i] = (fp - fm) / (2.0 * h)
    err = np.abs(g_fd - g_analytic.reshape(-1)) / np.maximum(1.0, np.abs(g_fd))
    return float(err.max()) if err.size else 0.0
