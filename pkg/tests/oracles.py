"""Independent oracles used by the test suite.

Everything here is deliberately naive and self-contained (double loops,
Jacobi rotations, Simpson quadrature) so that it shares no code path with
the package implementation it checks.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matvec(a, v):
    rows, cols = len(a), len(a[0])
    out = [0.0] * rows
    for i in range(rows):
        s = 0.0
        for j in range(cols):
            s += a[i][j] * v[j]
        out[i] = s
    return np.array(out)


def naive_frobenius(a):
    s = 0.0
    for row in a:
        for x in row:
            s += x * x
    return math.sqrt(s)


def naive_row_l2(a):
    return np.array([math.sqrt(sum(x * x for x in row)) for row in a])


def naive_col_l2_sum(a):
    rows, cols = len(a), len(a[0])
    total = 0.0
    for j in range(cols):
        s = 0.0
        for i in range(rows):
            s += a[i][j] * a[i][j]
        total += math.sqrt(s)
    return total


def jacobi_eigenvalues(sym: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(sym, dtype=np.float64, copy=True)
    n = a.shape[0]
    if n == 1:
        return a[0, :1].copy()
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        scale = math.sqrt(np.sum(a * a))
        if off <= tol * max(scale, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    return np.sort(np.diag(a))


def spectral_norm_oracle(a: np.ndarray) -> float:
    """Largest singular value via the Jacobi eigensolver on a^T a."""
    a = np.asarray(a, dtype=np.float64)
    eigs = jacobi_eigenvalues(a.T @ a)
    return math.sqrt(max(float(eigs[-1]), 0.0))


def simpson(f, lo: float, hi: float, n: int = 20001) -> float:
    """Composite Simpson rule with n (odd) sample points."""
    if n % 2 == 0:
        n += 1
    xs = np.linspace(lo, hi, n)
    ys = np.array([f(x) for x in xs])
    h = (hi - lo) / (n - 1)
    return float(h / 3.0 * (ys[0] + ys[-1] + 4.0 * ys[1:-1:2].sum() + 2.0 * ys[2:-1:2].sum()))


def forward_oracle(weights, x):
    """Straight-line recomputation of a bias-free ReLU net's logits."""
    h = np.asarray(x, dtype=np.float64)
    for d, w in enumerate(weights):
        f = np.asarray(w) @ h
        h = np.maximum(f, 0.0) if d < len(weights) - 1 else f
    return h


def forward_from_preact(weights, start_layer: int, preact, depth: int | None = None):
    """Logit-layer preacts obtained by treating `preact` as layer start_layer's
    pre-activation and running the remaining layers (layer 0 means the input).

    Returns the pre-activation vector of the final layer (or of `depth` when
    given). Used to finite-difference interlayer Jacobians.
    """
    d_total = len(weights)
    stop = d_total if depth is None else depth
    v = np.asarray(preact, dtype=np.float64)
    h = v if start_layer == 0 else np.maximum(v, 0.0)
    f = v
    for d in range(start_layer + 1, stop + 1):
        f = np.asarray(weights[d - 1]) @ h
        h = np.maximum(f, 0.0)
    return f
