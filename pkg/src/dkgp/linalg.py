"""Dense linear algebra and random-number plumbing shared by every model.

All arrays are float64. The random source is numpy's PCG64 bit generator
seeded through :class:`numpy.random.SeedSequence`; sub-streams are derived
by spawning with an integer key (see :meth:`RandomStream.split`), so
``RandomStream(seed).split(k)`` is the same stream on every run.
Standard-normal draws use ``Generator.standard_normal`` (ziggurat).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

DEFAULT_JITTER = 1e-6
JITTER_RETRIES = 4
JITTER_CAP_FRACTION = 1e-2


class CholeskyError(np.linalg.LinAlgError):
    """Factorization failed even at the jitter cap."""


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[0]


def _as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {A.shape}")
    return A


def cholesky_with_jitter(A, base_jitter: float = DEFAULT_JITTER) -> CholeskyFactor:
    """Lower Cholesky factor of a symmetric matrix, adding diagonal jitter on failure.

    A plain factorization is tried first. If it fails, ``base_jitter`` scaled by
    the mean diagonal is added and multiplied by 10 on each of up to
    ``JITTER_RETRIES`` further attempts, never exceeding
    ``1e-2 * mean(diag(A))``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"cholesky_with_jitter needs a square matrix, got {A.shape}")
    n = A.shape[0]
    if n == 0:
        return CholeskyFactor(np.zeros((0, 0)), 0.0)
    if not np.all(np.isfinite(A)):
        raise CholeskyError("matrix has non-finite entries")
    try:
        return CholeskyFactor(np.linalg.cholesky(A), 0.0)
    except np.linalg.LinAlgError:
        pass

    mean_diag = float(np.mean(np.diag(A)))
    scale = mean_diag if mean_diag > 0 else 1.0
    cap = JITTER_CAP_FRACTION * scale
    jitter = base_jitter * scale
    for _ in range(JITTER_RETRIES + 1):
        jitter = min(jitter, cap)
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(n))
            return CholeskyFactor(L, jitter)
        except np.linalg.LinAlgError:
            if jitter >= cap:
                break
            jitter *= 10.0
    raise CholeskyError(f"Cholesky failed with jitter up to {jitter:.3g}")


def solve_posdef(F: CholeskyFactor, B) -> np.ndarray:
    """Solve ``(L L^T) X = B`` with two triangular solves."""
    B = np.asarray(B, dtype=np.float64)
    vector = B.ndim == 1
    B2 = B[:, None] if vector else B
    if B2.shape[0] != F.n:
        raise ValueError(f"factor has {F.n} rows but right-hand side has {B2.shape[0]}")
    tmp = solve_triangular(F.lower, B2, lower=True)
    X = solve_triangular(F.lower, tmp, lower=True, trans="T")
    return X[:, 0] if vector else X


def logdet(F: CholeskyFactor) -> float:
    """``log|A|`` from its Cholesky factor."""
    d = np.diag(F.lower)
    if np.any(d <= 0):
        raise ValueError("invalid Cholesky factor: nonpositive diagonal")
    return float(2.0 * np.sum(np.log(d)))


class RandomStream:
    """Seeded, single-owner source of random numbers."""

    def __init__(self, seed: int = 0, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, key: int) -> "RandomStream":
        """Independent sub-stream identified by ``key``; does not advance ``self``."""
        child = np.random.SeedSequence(self._seq.entropy, spawn_key=self._seq.spawn_key + (int(key),))
        return RandomStream(self.seed, _seq=child)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size=None, replace=True, p=None):
        return self._gen.choice(n, size=size, replace=replace, p=p)


def gaussian_draws(stream: RandomStream, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be nonnegative")
    return stream.normal(n)
