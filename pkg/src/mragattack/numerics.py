"""Deterministic vector kernels, seeded randomness, and a finite-difference
gradient oracle.

Everything here is float64 and pure; analytic gradients elsewhere in the
package are validated against :func:`finite_diff_grad`.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

Kernel = str  # "cosine" | "dot"
KERNELS = ("cosine", "dot")


def as_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate and return ``x`` as a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if v.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} has dim {v.shape[0]}, expected {dim}")
    return v


def dot(a, b) -> float:
    a = as_vector(a, name="a")
    b = as_vector(b, dim=a.shape[0], name="b")
    return float(a @ b)


def cosine_sim(a, b) -> float:
    """Cosine of the angle between two vectors; zero-norm input is an error."""
    a = as_vector(a, name="a")
    b = as_vector(b, dim=a.shape[0], name="b")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_sim undefined for zero-norm input")
    return float(a @ b) / (na * nb)


def similarity(a, b, kernel: Kernel = "cosine") -> float:
    if kernel == "cosine":
        return cosine_sim(a, b)
    if kernel == "dot":
        return dot(a, b)
    raise ValueError(f"unknown similarity kernel {kernel!r}")


def sign_vec(g) -> np.ndarray:
    """Entrywise sign with no dead zone: 0 only where the entry is exactly 0."""
    g = as_vector(g, name="g")
    return np.sign(g)


def clip_box(v, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"clip_box bounds inverted: lo={lo} > hi={hi}")
    v = as_vector(v, name="v")
    return np.clip(v, lo, hi)


def linf_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.max(np.abs(v))) if v.size else 0.0


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Used as the independent oracle for every analytic gradient in the
    package; deliberately knows nothing about how f is computed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_vector(x, name="x")
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    if isinstance(key, str):
        return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:4], "big")
    raise TypeError(f"stream key must be int or str, got {type(key)!r}")


class SeededRng:
    """Deterministic random generator: same seed, same draws, bit-exact.

    Child generators come from :meth:`derive`, which mixes extra keys into
    the seed sequence; deriving the same keys always yields the same
    stream, independent of call order or parallel scheduling.
    """

    def __init__(self, seed: int, _stream: Sequence[int] = ()):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in _stream)
        if self.stream:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        else:
            ss = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, *keys) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(_key_to_int(k) for k in keys))

    def uniform(self, low: float, high: float, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"
