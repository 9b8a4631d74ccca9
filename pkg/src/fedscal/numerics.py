"""Small float64 primitives shared by the model, adaptation and metrics code.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

EPS = 1e-12


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction. Accepts a vector or a (B, J) matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def safe_log(p) -> np.ndarray:
    return np.log(np.maximum(p, EPS))


def _check_probability(p: np.ndarray) -> None:
    if p.size == 0:
        raise DimensionError("empty probability vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("input is not a probability vector")


def entropy(p) -> float:
    """Shannon entropy in nats, with logs clamped at ``EPS``."""
    p = as_vector(p)
    _check_probability(p)
    return float(-np.sum(p * safe_log(p)))


def kl_div(p, q) -> float:
    """KL(p || q) in nats; terms with p_j = 0 contribute nothing. Both logs are clamped at ``EPS``."""
    p = as_vector(p)
    q = as_vector(q)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    return float(np.sum(p[mask] * (safe_log(p[mask]) - safe_log(q[mask]))))


def cosine_distance(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < EPS or nb < EPS:
        raise DomainError("cosine distance of a zero-norm vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def cosine_distance_matrix(feats: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances between rows of ``feats`` (N, h) and ``centers`` (J, h)."""
    fn = np.linalg.norm(feats, axis=1)
    cn = np.linalg.norm(centers, axis=1)
    if np.any(fn < EPS) or np.any(cn < EPS):
        raise DomainError("cosine distance of a zero-norm vector")
    return 1.0 - (feats @ centers.T) / np.outer(fn, cn)


def stats_mean_median_std(xs) -> tuple[float, float, float]:
    """Mean, median and population standard deviation."""
    v = np.asarray(xs, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("statistics of an empty sequence")
    mean = float(v.mean())
    s = np.sort(v)
    n = s.size
    if n % 2:
        median = float(s[n // 2])
    else:
        median = float((s[n // 2 - 1] + s[n // 2]) / 2.0)
    std = float(np.sqrt(np.mean((v - mean) ** 2)))
    return mean, median, std


def finite_diff_grad(fn: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat parameter vector."""
    x = np.array(at, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = fn(x.copy())
        x[i] = orig - h
        fm = fn(x.copy())
        x[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


class RngStream:
    """Deterministic random stream keyed by a master seed and a stream id.

    The id may be an int or a tuple of ints (e.g. ``(tag, client, round)``);
    distinct ids give independent streams via ``numpy.random.SeedSequence``.
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        key = stream_id if isinstance(stream_id, tuple) else (stream_id,)
        self.seed = int(seed)
        self.stream_id = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def normal(self, size) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, size) -> np.ndarray:
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self.gen.choice(n, size=k, replace=False)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"
