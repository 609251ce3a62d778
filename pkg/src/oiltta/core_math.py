"""Numeric primitives shared by the model and the adaptation engine.

Everything here is pure and works on float64 numpy arrays.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

PROB_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox): identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise DimensionError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DomainError("probability vector has a negative entry")
    if abs(p.sum() - 1.0) > 1e-9:
        raise DomainError(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def cross_entropy(p, label: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise IndexError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        fp = f(theta)
        theta[i] = old - h
        fm = f(theta)
        theta[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vectors vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < floor:
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / denom)
