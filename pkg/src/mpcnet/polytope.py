"""H-representation polytopes ``{x : A x <= b}``.

Only the operations needed by the pipeline are here: membership, Chebyshev
center, LP-based redundancy removal, inclusion, the one-step backward
reachable set (``pre_set``) by Fourier–Motzkin elimination, and the maximal
control invariant set as the fixed point of ``Ω ← Pre(Ω) ∩ Ω``.

Rows are normalized to unit Euclidean norm on construction so that all
tolerances are distances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import linprog

from .errors import (
    DimensionMismatch,
    EmptyPolytope,
    FormatError,
    LinearProgramError,
    NoConvergence,
    UnboundedPolytope,
)

log = logging.getLogger(__name__)

ZERO_ROW_TOL = 1e-12
REDUNDANCY_TOL = 1e-8
SUBSET_TOL = 1e-7
EMPTY_RADIUS_TOL = 1e-9
DEDUP_DECIMALS = 12


class Polytope:
    """Immutable ``{x : a_mat @ x <= b_vec}`` with unit-norm rows."""

    __slots__ = ("a_mat", "b_vec")

    def __init__(self, a_mat, b_vec):
        a = np.array(a_mat, dtype=float, ndmin=2)
        b = np.array(b_vec, dtype=float).reshape(-1)
        if a.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"{a.shape[0]} constraint rows but {b.shape[0]} offsets")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("polytope data must be finite")
        norms = np.linalg.norm(a, axis=1)
        zero = norms <= ZERO_ROW_TOL
        if np.any(b[zero] < 0):
            raise EmptyPolytope("zero constraint row with negative offset")
        a = a[~zero] / norms[~zero, None]
        b = b[~zero] / norms[~zero]
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_vec", b)

    def __setattr__(self, name, value):
        raise AttributeError("Polytope is immutable")

    def __reduce__(self):
        # rebuild without renormalizing so worker processes see identical rows
        return (_restore_polytope, (self.a_mat, self.b_vec))

    @property
    def dim(self) -> int:
        return self.a_mat.shape[1]

    @property
    def n_rows(self) -> int:
        return self.a_mat.shape[0]

    def __repr__(self):
        return f"Polytope(rows={self.n_rows}, dim={self.dim})"

    @classmethod
    def from_box(cls, lower, upper) -> "Polytope":
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        n = lower.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    def contains(self, x, tol: float = 0.0):
        return contains(self, x, tol)

    def save(self, path) -> None:
        save_polytope(self, path)

    @classmethod
    def load(cls, path) -> "Polytope":
        return load_polytope(path)


def _restore_polytope(a_mat, b_vec) -> Polytope:
    poly = object.__new__(Polytope)
    for name, arr in (("a_mat", a_mat), ("b_vec", b_vec)):
        arr = np.array(arr)
        arr.setflags(write=False)
        object.__setattr__(poly, name, arr)
    return poly


def contains(poly: Polytope, x, tol: float = 0.0):
    """Membership test ``a_mat @ x <= b_vec + tol``.

    ``x`` may be a single point (returns ``bool``) or an ``(k, n)`` batch
    (returns a boolean array).
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != poly.dim:
        raise DimensionMismatch(f"point has dimension {x.shape[-1]}, polytope has {poly.dim}")
    if x.ndim == 1:
        return bool(np.all(poly.a_mat @ x <= poly.b_vec + tol))
    return np.all(x @ poly.a_mat.T <= poly.b_vec + tol, axis=1)


def _lp_max(c, a_ub, b_ub):
    """Maximize ``c @ x`` subject to ``a_ub @ x <= b_ub``. Returns (value, x) or raises."""
    res = linprog(-np.asarray(c), A_ub=a_ub, b_ub=b_ub, bounds=(None, None), method="highs")
    if res.status == 0:
        return -res.fun, res.x
    if res.status == 3:
        raise UnboundedPolytope("LP is unbounded")
    if res.status == 2:
        raise EmptyPolytope("LP is infeasible")
    raise LinearProgramError(f"LP failed: {res.message}")


def chebyshev_center(poly: Polytope):
    """Center and radius of the largest inscribed ball.

    A positive radius certifies a non-empty interior; a radius below
    ``-EMPTY_RADIUS_TOL`` certifies emptiness.
    """
    if poly.n_rows == 0:
        raise UnboundedPolytope("polytope without constraints")
    n = poly.dim
    # rows are unit norm, so the radius coefficient is 1
    a_ub = np.hstack([poly.a_mat, np.ones((poly.n_rows, 1))])
    c = np.zeros(n + 1)
    c[-1] = 1.0
    res = linprog(-c, A_ub=a_ub, b_ub=poly.b_vec, bounds=(None, None), method="highs")
    if res.status == 3:
        raise UnboundedPolytope("Chebyshev LP is unbounded")
    if res.status != 0:
        raise LinearProgramError(f"Chebyshev LP failed: {res.message}")
    radius = float(res.x[-1])
    if radius < -EMPTY_RADIUS_TOL:
        raise EmptyPolytope(f"polytope is empty (Chebyshev radius {radius:.3e})")
    return res.x[:n], radius


def is_empty(poly: Polytope) -> bool:
    try:
        chebyshev_center(poly)
    except EmptyPolytope:
        return True
    except UnboundedPolytope:
        return False
    return False


def _dedup(a, b):
    """Drop repeated normals, keeping the tightest offset."""
    if a.shape[0] == 0:
        return a, b
    keys = np.round(a, DEDUP_DECIMALS)
    order = np.lexsort(np.vstack([b, keys.T[::-1]]))
    keys, a, b = keys[order], a[order], b[order]
    keep = np.ones(len(b), dtype=bool)
    keep[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    return a[keep], b[keep]


def minimize(poly: Polytope, tol: float = REDUNDANCY_TOL) -> Polytope:
    """Remove redundant rows, one support LP per row."""
    a, b = _dedup(poly.a_mat, poly.b_vec)
    keep = np.ones(a.shape[0], dtype=bool)
    for i in range(a.shape[0]):
        keep[i] = False
        # relaxing row i by one unit keeps the LP bounded
        rows = np.vstack([a[keep], a[i]])
        rhs = np.concatenate([b[keep], [b[i] + 1.0]])
        value, _ = _lp_max(a[i], rows, rhs)
        if value > b[i] + tol:
            keep[i] = True
    return Polytope(a[keep], b[keep])


def intersect(p: Polytope, q: Polytope) -> Polytope:
    if p.dim != q.dim:
        raise DimensionMismatch(f"cannot intersect dimensions {p.dim} and {q.dim}")
    stacked = Polytope(np.vstack([p.a_mat, q.a_mat]), np.concatenate([p.b_vec, q.b_vec]))
    if is_empty(stacked):
        return stacked
    return minimize(stacked)


def support(poly: Polytope, direction) -> float:
    """``max direction @ x`` over the polytope."""
    value, _ = _lp_max(direction, poly.a_mat, poly.b_vec)
    return value


def is_subset(p: Polytope, q: Polytope, tol: float = SUBSET_TOL) -> bool:
    """True iff ``p ⊆ q`` up to ``tol`` on every facet of ``q``."""
    if p.dim != q.dim:
        raise DimensionMismatch(f"dimensions {p.dim} and {q.dim} differ")
    for qi, ci in zip(q.a_mat, q.b_vec):
        try:
            value = support(p, qi)
        except UnboundedPolytope:
            return False
        if value > ci + tol:
            return False
    return True


def set_equal(p: Polytope, q: Polytope, tol: float = SUBSET_TOL) -> bool:
    return is_subset(p, q, tol) and is_subset(q, p, tol)


def _eliminate_last(a, b):
    """Fourier–Motzkin elimination of the last coordinate."""
    col = a[:, -1]
    pos = col > ZERO_ROW_TOL
    neg = col < -ZERO_ROW_TOL
    zero = ~(pos | neg)
    ap = a[pos] / col[pos, None]
    bp = b[pos] / col[pos]
    an = a[neg] / -col[neg, None]
    bn = b[neg] / -col[neg]
    combined_a = (ap[:, None, :] + an[None, :, :]).reshape(-1, a.shape[1])
    combined_b = (bp[:, None] + bn[None, :]).reshape(-1)
    new_a = np.vstack([a[zero], combined_a])[:, :-1]
    new_b = np.concatenate([b[zero], combined_b])
    norms = np.linalg.norm(new_a, axis=1)
    null = norms <= ZERO_ROW_TOL * np.maximum(1.0, np.abs(new_a).sum(axis=1))
    if np.any(new_b[null] < -EMPTY_RADIUS_TOL):
        raise EmptyPolytope("elimination produced an infeasible row")
    new_a, new_b = new_a[~null], new_b[~null]
    norms = norms[~null]
    return new_a / norms[:, None], new_b / norms


def project_out(poly: Polytope, n_keep: int) -> Polytope:
    """Project onto the first ``n_keep`` coordinates by Fourier–Motzkin.

    The intermediate set is minimized after each eliminated coordinate.
    """
    a, b = poly.a_mat, poly.b_vec
    for _ in range(poly.dim - n_keep):
        a, b = _eliminate_last(a, b)
        if a.shape[0] == 0:
            return Polytope(np.zeros((0, a.shape[1])), np.zeros(0))
        reduced = minimize(Polytope(a, b))
        a, b = reduced.a_mat, reduced.b_vec
    return Polytope(a, b)


def pre_set(target: Polytope, sys, u_set: Polytope) -> Polytope:
    """States that some admissible input maps into ``target`` in one step.

    ``sys`` is anything with ``a_mat`` (n×n) and ``b_mat`` (n×m).
    """
    a_sys = np.asarray(sys.a_mat, dtype=float)
    b_sys = np.asarray(sys.b_mat, dtype=float).reshape(a_sys.shape[0], -1)
    n, m = b_sys.shape
    if target.dim != n:
        raise DimensionMismatch(f"target has dimension {target.dim}, state has {n}")
    if u_set.dim != m:
        raise DimensionMismatch(f"input set has dimension {u_set.dim}, input has {m}")
    lifted_a = np.vstack(
        [
            np.hstack([target.a_mat @ a_sys, target.a_mat @ b_sys]),
            np.hstack([np.zeros((u_set.n_rows, n)), u_set.a_mat]),
        ]
    )
    lifted_b = np.concatenate([target.b_vec, u_set.b_vec])
    lifted = Polytope(lifted_a, lifted_b)
    if is_empty(lifted):
        raise EmptyPolytope("lifted state-input set is empty")
    return project_out(lifted, n)


class InvariantSet(NamedTuple):
    polytope: Polytope
    iterations: int
    certified: bool


def max_control_invariant(sys, x_set: Polytope, u_set: Polytope, max_iter: int = 100,
                          tol: float = SUBSET_TOL) -> InvariantSet:
    """Maximal control invariant subset of ``x_set``.

    Iterates ``Ω ← minimize(Pre(Ω) ∩ Ω)`` from ``Ω = x_set`` until the
    iterate stops shrinking (inclusion test at ``tol``). The iteration has
    no general termination guarantee; after ``max_iter`` steps
    :class:`NoConvergence` is raised with the last iterate attached as a
    non-certified :class:`InvariantSet`.
    """
    omega = minimize(x_set)
    for k in range(1, max_iter + 1):
        nxt = intersect(pre_set(omega, sys, u_set), omega)
        if is_empty(nxt):
            raise EmptyPolytope("control invariant set is empty")
        log.debug("C-inf iteration %d: %d rows", k, nxt.n_rows)
        if is_subset(omega, nxt, tol):
            return InvariantSet(omega, k, True)
        omega = nxt
    raise NoConvergence(
        f"no fixed point after {max_iter} iterations",
        result=InvariantSet(omega, max_iter, False),
    )


def save_polytope(poly: Polytope, path) -> None:
    lines = [f"{poly.n_rows} {poly.dim}"]
    for row, off in zip(poly.a_mat, poly.b_vec):
        lines.append(" ".join(f"{v:.17g}" for v in (*row, off)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_polytope(path) -> Polytope:
    text = Path(path).read_text().splitlines()
    if not text:
        raise FormatError("empty polytope file", line=1)
    try:
        m, n = (int(t) for t in text[0].split())
    except ValueError:
        raise FormatError("header must be 'm n'", line=1) from None
    if len(text) < m + 1:
        raise FormatError(f"expected {m} constraint rows, found {len(text) - 1}", line=len(text))
    rows = []
    for i in range(m):
        parts = text[i + 1].split()
        if len(parts) != n + 1:
            raise FormatError(f"expected {n + 1} numbers", line=i + 2)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise FormatError("non-numeric entry", line=i + 2) from None
    data = np.array(rows, dtype=float).reshape(m, n + 1)
    return Polytope(data[:, :n], data[:, n])
