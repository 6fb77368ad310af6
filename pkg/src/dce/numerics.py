"""Deterministic linear algebra and randomness primitives.

Every other module draws its randomness from :class:`RngState`, a
xoshiro256** generator seeded through splitmix64.  Gaussian variates use the
Box-Muller transform with the second variate of each pair cached, so a given
seed yields the same stream regardless of how draws are batched.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


class NumericsError(ValueError):
    pass


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class RngState:
    """xoshiro256** generator with splitmix64 seeding.

    Not thread safe; each instance must have a single writer.
    """

    __slots__ = ("_s", "_cached_normal")

    def __init__(self, seed: int = 0):
        sm = int(seed) & _MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s
        self._cached_normal: float | None = None

    @classmethod
    def from_state(cls, words) -> "RngState":
        rng = cls.__new__(cls)
        rng._s = [int(w) & _MASK64 for w in words]
        if not any(rng._s):
            raise NumericsError("xoshiro256** state must not be all zero")
        rng._cached_normal = None
        return rng

    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK64
        result = ((((x << 7) | (x >> 57)) & _MASK64) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def random_raw(self, n: int) -> list[int]:
        """``n`` consecutive 64-bit outputs (same stream as ``next_u64``)."""
        s0, s1, s2, s3 = self._s
        m = _MASK64
        out = [0] * n
        for i in range(n):
            x = (s1 * 5) & m
            out[i] = ((((x << 7) | (x >> 57)) & m) * 9) & m
            t = (s1 << 17) & m
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & m
        self._s = [s0, s1, s2, s3]
        return out

    def uniform(self, n: int | None = None):
        """Doubles in [0, 1) built from the top 53 bits of each output."""
        if n is None:
            return (self.next_u64() >> 11) * _INV_2_53
        raw = self.random_raw(n)
        return np.array([(r >> 11) for r in raw], dtype=np.float64) * _INV_2_53

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) (Lemire's multiply-shift with rejection)."""
        if n <= 0:
            raise NumericsError("below() needs a positive bound")
        m = self.next_u64() * n
        low = m & _MASK64
        if low < n:
            threshold = (-n) % n
            while low < threshold:
                m = self.next_u64() * n
                low = m & _MASK64
        return m >> 64

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the top down."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def normal(self) -> float:
        return float(self.standard_normal(1)[0])

    def standard_normal(self, n: int) -> np.ndarray:
        """``n`` standard normal variates via Box-Muller.

        Each pair consumes two uniforms ``u1, u2``; the radius uses ``1 - u1``
        so the logarithm never sees zero.  An odd leftover is cached and
        returned first by the next call.
        """
        out = np.empty(n, dtype=np.float64)
        start = 0
        if n == 0:
            return out
        if self._cached_normal is not None:
            out[0] = self._cached_normal
            self._cached_normal = None
            start = 1
        remaining = n - start
        if remaining == 0:
            return out
        pairs = (remaining + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = _TWO_PI * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        out[start:] = z[:remaining]
        if 2 * pairs > remaining:
            self._cached_normal = float(z[-1])
        return out


def stable_softmax(v) -> np.ndarray:
    """Softmax along the last axis; ``-inf`` entries (masked classes) map to 0."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise NumericsError("softmax of an empty vector")
    vmax = np.max(v, axis=-1, keepdims=True)
    if np.any(np.isneginf(vmax)):
        raise NumericsError("fully masked logits")
    e = np.exp(v - vmax)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    vmax = np.max(v, axis=-1, keepdims=True)
    if np.any(np.isneginf(vmax)):
        raise NumericsError("fully masked logits")
    shifted = v - vmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cholesky_factor(S, *, symmetry_tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``S`` with escalating diagonal jitter.

    Returns ``(L, lam)`` where ``L @ L.T == S + lam * I``.  ``lam`` starts at
    ``1e-10 * mean(diag(S))`` and grows tenfold up to ``1e-2 * mean(diag(S))``.
    An all-zero matrix factors exactly as zero.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NumericsError(f"cholesky_factor needs a square matrix, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NumericsError("covariance has non-finite entries")
    if np.max(np.abs(S - S.T), initial=0.0) > symmetry_tol:
        raise NumericsError("covariance is not symmetric")
    try:
        return np.linalg.cholesky(S), 0.0
    except np.linalg.LinAlgError:
        pass
    if not np.any(S):
        return np.zeros_like(S), 0.0
    scale = float(np.mean(np.diag(S)))
    if scale <= 0.0:
        scale = float(np.max(np.abs(S)))
    eye = np.eye(S.shape[0])
    lam = 1e-10 * scale
    limit = 1e-2 * scale * (1 + 1e-12)
    while lam <= limit:
        try:
            return np.linalg.cholesky(S + lam * eye), lam
        except np.linalg.LinAlgError:
            lam *= 10.0
    raise NumericsError("covariance not factorizable")


def sample_mvn(mu, L, rng: RngState, size: int | None = None) -> np.ndarray:
    """Draw ``mu + L @ z`` with ``z`` standard normal.

    Each sample consumes exactly ``len(mu)`` variates; ``size`` draws are the
    same stream as ``size`` single calls.
    """
    mu = np.asarray(mu, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    d = mu.shape[0]
    if mu.ndim != 1 or L.shape != (d, d):
        raise NumericsError(f"dimension mismatch: mu {mu.shape}, L {L.shape}")
    if size is None:
        return mu + L @ rng.standard_normal(d)
    z = rng.standard_normal(size * d).reshape(size, d)
    return mu + z @ L.T
