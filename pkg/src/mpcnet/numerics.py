"""Dense linear algebra kernels and the seeded random stream.

Everything here works on plain ``numpy`` arrays. Problem sizes in this
package are small (stacked QPs of at most a few hundred variables), so all
factorizations are dense.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DidNotConverge, DimensionMismatch, SingularMatrix

PIVOT_RTOL = 1e-12
POWER_ITER_TOL = 1e-10
POWER_ITER_MAX = 10_000
POWER_ITER_FAIL_TOL = 1e-6


class LdltFactor:
    """LDLᵀ factorization without pivoting, for symmetric quasi-definite matrices.

    Factor once, then call :meth:`solve` as often as needed. SPD matrices and
    KKT matrices of the form ``[[P + σI, Aᵀ], [A, -D]]`` with ``D`` positive
    diagonal always admit this factorization.
    """

    def __init__(self, mat, pivot_rtol: float = PIVOT_RTOL):
        mat = np.asarray(mat, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise DimensionMismatch(f"expected a square matrix, got shape {mat.shape}")
        n = mat.shape[0]
        scale = float(np.max(np.abs(mat))) if n else 0.0
        threshold = pivot_rtol * scale
        low = np.eye(n)
        diag = np.zeros(n)
        # right-looking elimination on a working copy of the lower triangle
        work = np.array(mat, copy=True)
        for j in range(n):
            d = work[j, j]
            if abs(d) < threshold or d == 0.0:
                raise SingularMatrix(f"pivot {j} has magnitude {abs(d):.3e}")
            diag[j] = d
            col = work[j + 1 :, j] / d
            low[j + 1 :, j] = col
            work[j + 1 :, j + 1 :] -= np.outer(col, work[j, j + 1 :])
        self.lower = low
        self.diag = diag
        self.n = n

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.n:
            raise DimensionMismatch(f"rhs has {rhs.shape[0]} rows, expected {self.n}")
        y = solve_triangular(self.lower, rhs, lower=True, unit_diagonal=True, check_finite=False)
        if y.ndim == 1:
            y = y / self.diag
        else:
            y = y / self.diag[:, None]
        return solve_triangular(self.lower.T, y, lower=False, unit_diagonal=True, check_finite=False)


def ldlt_solve(mat, rhs):
    """Solve ``mat @ z = rhs`` for symmetric quasi-definite ``mat``."""
    return LdltFactor(mat).solve(rhs)


def top_right_singular_vector(g, tol: float = POWER_ITER_TOL, max_iter: int = POWER_ITER_MAX):
    """Unit vector ``v`` maximizing ``||g @ v||``, by power iteration on ``gᵀg``.

    Returns ``(v, s)`` with ``s = ||g @ v||``. The sign of ``v`` is fixed so
    that its largest-magnitude entry is positive.
    """
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if not np.any(g):
        raise ValueError("top_right_singular_vector needs a non-zero matrix")
    gram = g.T @ g
    n = gram.shape[0]
    # fixed, irrational-looking start; never orthogonal to a generic top vector
    v = 1.0 + np.mod(np.sqrt(2.0) * np.arange(1, n + 1), 1.0)
    v /= np.linalg.norm(v)
    change = np.inf
    for _ in range(max_iter):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start landed in the null space; restart from the heaviest column
            w = gram[:, int(np.argmax(np.diag(gram)))].copy()
            norm = np.linalg.norm(w)
        w /= norm
        if w @ v < 0:
            w = -w
        change = np.linalg.norm(w - v)
        v = w
        if change < tol:
            break
    else:
        if change > POWER_ITER_FAIL_TOL:
            raise DidNotConverge(f"power iteration stalled, last direction change {change:.3e}")
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v, float(np.linalg.norm(g @ v))


class Prng:
    """Seeded PCG64 stream with Box–Muller normals.

    PCG64 carries 128 bits of state seeded from a 64-bit integer through
    numpy's ``SeedSequence``; its output is identical across platforms.
    """

    def __init__(self, seed: int, _bitgen: np.random.PCG64 | None = None):
        self.seed = int(seed)
        self._bitgen = _bitgen if _bitgen is not None else np.random.PCG64(self.seed)
        self._gen = np.random.Generator(self._bitgen)

    def uniform(self, n: int | None = None):
        """Uniform draws in [0, 1)."""
        return self._gen.random(n)

    def standard_normal(self, n: int):
        return standard_normal(self, n)

    def jumped(self, k: int = 1) -> "Prng":
        """Independent stream ``k`` jumps ahead; this stream is left untouched."""
        return Prng(self.seed, _bitgen=self._bitgen.jumped(k))


def standard_normal(prng: Prng, n: int):
    """``n`` i.i.d. N(0, 1) draws via the Box–Muller transform."""
    if n < 1:
        raise ValueError("n must be at least 1")
    pairs = (n + 1) // 2
    u = prng.uniform(2 * pairs)
    u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
    u2 = u[pairs:]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:n]


def derive_seed(master: int, stage: str) -> int:
    """Sub-seed for a named stage: master seed plus a stable hash of the name."""
    digest = hashlib.sha256(stage.encode()).digest()
    return (int(master) + int.from_bytes(digest[:8], "little")) % (2**63)
