"""Dense matrix/vector kernels and deterministic Gaussian sampling.

Matrices are 2-D float64 numpy arrays (row-major), vectors are 1-D float64
arrays. Everything downstream builds on the handful of operations here:
matrix-vector products, the three norms used throughout (spectral, Frobenius,
max row l2), the column-l2 sum, and seeded Gaussian sampling.

Randomness is counter-based so that identical (seed, stream_id) pairs yield
identical draw sequences on every platform:

  * uniforms come from the Philox 4x64-10 counter generator keyed by
    (seed, stream_id), converted to doubles by the fixed top-53-bits rule;
  * normals are produced from those uniforms by an explicit Box-Muller
    transform (pairs r*cos(theta), r*sin(theta) interleaved in that order);
  * permutations use a Fisher-Yates walk driven by the same uniform stream;
  * derived streams mix a child index into stream_id with splitmix64.

No part of the normal/permutation pipeline depends on library-internal
distribution code, so the draw sequence is pinned by this file alone.
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = [
    "RngStream",
    "PowerIterationWarning",
    "matvec",
    "spectral_norm",
    "frobenius_norm",
    "row_l2_norms",
    "max_row_l2",
    "col_l2_sum",
    "sample_gaussian_matrix",
]

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One splitmix64 step; the documented mixer for deriving child streams."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class PowerIterationWarning(RuntimeWarning):
    """Raised (as a warning) when power iteration hits max_iters unconverged."""


class RngStream:
    """A seeded, counter-based random stream.

    Identified by (seed, stream_id); two instances constructed with the same
    pair produce bit-identical draw sequences. A stream is a value owned by
    its consumer: never share one object across concurrent consumers, derive
    children instead.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        )

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def derive(self, index: int) -> "RngStream":
        """Independent child stream; deterministic in (seed, stream_id, index)."""
        child = _splitmix64((self.stream_id ^ _splitmix64(index & _MASK64)) & _MASK64)
        return RngStream(self.seed, child)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return self._gen.random(int(n))

    def normals(self, n: int, sigma: float = 1.0) -> np.ndarray:
        """n zero-mean Gaussians with standard deviation sigma (Box-Muller)."""
        n = int(n)
        if n == 0:
            return np.empty(0)
        pairs = (n + 1) // 2
        u1 = self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        # 1 - u1 lies in (0, 1], so the log is finite.
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = (2.0 * np.pi) * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return float(sigma) * z[:n]

    def permutation(self, n: int) -> np.ndarray:
        """A permutation of range(n) via Fisher-Yates on the uniform stream."""
        n = int(n)
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self._gen.random(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))  # in [0, i] since u < 1
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def as_matrix(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError(f"expected a nonempty 2-D matrix, got shape {a.shape}")
    return a

def as_vector(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] == 0:
        raise ValueError(f"expected a nonempty 1-D vector, got shape {v.shape}")
    return v


def matvec(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product with explicit dimension checking."""
    a = as_matrix(a)
    v = as_vector(v)
    if a.shape[1] != v.shape[0]:
        raise ValueError(
            f"dimension mismatch: matrix is {a.shape[0]}x{a.shape[1]}, vector has dim {v.shape[0]}"
        )
    return a @ v


def spectral_norm(
    a: np.ndarray,
    tol: float = 1e-10,
    max_iters: int = 1000,
    rng: RngStream | None = None,
) -> float:
    """Largest singular value, by power iteration on a^T a.

    The start vector is drawn from `rng` (a fixed default stream when omitted,
    so repeated calls are deterministic). Convergence is declared when the
    Rayleigh estimate of the top eigenvalue of a^T a changes by a relative
    factor of at most `tol` between iterations. On non-convergence the best
    estimate is returned and a PowerIterationWarning is emitted.
    """
    a = as_matrix(a)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not a.any():
        return 0.0
    gram = a.T @ a
    n = gram.shape[0]
    if rng is None:
        rng = RngStream(0x5EED, 0x11)
    v = rng.normals(n)
    norm_v = np.sqrt(v @ v)
    attempts = 0
    while norm_v == 0.0 and attempts < 8:
        v = rng.normals(n)
        norm_v = np.sqrt(v @ v)
        attempts += 1
    if norm_v == 0.0:
        return 0.0
    v /= norm_v
    estimate = None
    for _ in range(int(max_iters)):
        w = gram @ v
        rayleigh = float(v @ w)
        norm_w = np.sqrt(w @ w)
        if norm_w == 0.0:
            # v fell in the null space; the matrix is nonzero, so restart.
            v = rng.normals(n)
            v /= np.sqrt(v @ v)
            estimate = None
            continue
        v = w / norm_w
        if estimate is not None and abs(rayleigh - estimate) <= tol * max(abs(rayleigh), 1e-300):
            return float(np.sqrt(max(rayleigh, 0.0)))
        estimate = rayleigh
    warnings.warn(
        f"power iteration did not converge within {max_iters} iterations",
        PowerIterationWarning,
        stacklevel=2,
    )
    return float(np.sqrt(max(estimate if estimate is not None else 0.0, 0.0)))


def frobenius_norm(a: np.ndarray) -> float:
    """Square root of the sum of squared entries."""
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def row_l2_norms(a: np.ndarray) -> np.ndarray:
    """Per-row l2 norms."""
    a = as_matrix(a)
    return np.sqrt(np.sum(a * a, axis=1))


def max_row_l2(a: np.ndarray) -> float:
    """Maximum row l2 norm."""
    return float(np.max(row_l2_norms(a)))


def col_l2_sum(a: np.ndarray) -> float:
    """Sum over columns of the column l2 norms."""
    a = as_matrix(a)
    return float(np.sum(np.sqrt(np.sum(a * a, axis=0))))


def sample_gaussian_matrix(rows: int, cols: int, sigma: float, rng: RngStream) -> np.ndarray:
    """rows x cols matrix of i.i.d. N(0, sigma^2) entries, row-major draw order."""
    rows = int(rows)
    cols = int(cols)
    if rows <= 0 or cols <= 0:
        raise ValueError("rows and cols must be positive")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    return rng.normals(rows * cols, sigma).reshape(rows, cols)
