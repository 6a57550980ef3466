"""Dense convex QP solver (ADMM operator splitting) and KKT sensitivities.

Problems have the form::

    minimize    ½ zᵀ P z + qᵀ z
    subject to  lower <= A z <= upper

An LP is the special case ``P = 0``. Infinite bounds may be given as
``±inf``; they are stored as the ``±INF`` sentinel (1e30) and any bound at
or beyond the sentinel is treated as absent.

The iteration follows the OSQP splitting on a Ruiz-equilibrated copy of
the data. Equality rows use a 1e3 times larger step than inequality rows;
the step is rebalanced from the residual ratio every few dozen iterations
(``adaptive_rho``), which is deterministic given the problem data. Once
the residuals are moderate, a polish step solves the equality-constrained
KKT system on the guessed active set; the polished point is kept when it
improves both residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import lsq_linear

from .errors import DegenerateActiveSet, DimensionMismatch, SingularMatrix
from .numerics import LdltFactor

INF = 1e30
ACTIVE_TOL = 1e-6
SYMMETRY_TOL = 1e-12
RHO_EQ_SCALE = 1e3
RHO_MIN = 1e-6
RHO_MAX = 1e6
ADAPT_EVERY = 25
ADAPT_RATIO = 5.0
POLISH_DELTA = 1e-7
POLISH_REFINE_STEPS = 5
POLISH_TRIGGER = 1e-3
CHECK_EVERY = 5
RUIZ_ITERS = 10
SCALE_MIN = 1e-4
SCALE_MAX = 1e4


class Status(str, Enum):
    SOLVED = "Solved"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class SolverSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_infeas: float = 1e-7
    max_iter: int = 20_000
    polish: bool = True
    adaptive_rho: bool = True

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if not 0 < self.alpha < 2:
            raise ValueError("alpha must lie in (0, 2)")


class QpProblem:
    """Validated, immutable QP data. Bounds are clipped to the ±INF sentinel."""

    def __init__(self, p_mat, q_vec, a_mat, lower, upper):
        p = np.array(p_mat, dtype=float, ndmin=2)
        q = np.array(q_vec, dtype=float).reshape(-1)
        n = q.size
        a = np.array(a_mat, dtype=float)
        if a.ndim == 1 and n:
            a = a.reshape(-1, n)
        if a.ndim != 2 or a.shape[1] != n:
            raise DimensionMismatch(f"A has shape {a.shape}, expected (m, {n})")
        lo = np.clip(np.array(lower, dtype=float).reshape(-1), -INF, INF)
        up = np.clip(np.array(upper, dtype=float).reshape(-1), -INF, INF)
        if p.shape != (n, n):
            raise DimensionMismatch(f"P has shape {p.shape}, expected {(n, n)}")
        if not (lo.size == up.size == a.shape[0]):
            raise DimensionMismatch("A rows and bound lengths disagree")
        if np.max(np.abs(p - p.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(p), initial=0.0)):
            raise ValueError("P must be symmetric")
        if np.any(lo > up):
            raise ValueError("lower bound exceeds upper bound")
        for arr in (p, q, a):
            arr.setflags(write=False)
        self.p_mat, self.q_vec, self.a_mat, self.lower, self.upper = p, q, a, lo, up

    @property
    def n(self) -> int:
        return self.q_vec.size

    @property
    def m(self) -> int:
        return self.lower.size

    def objective(self, z) -> float:
        return float(0.5 * z @ self.p_mat @ z + self.q_vec @ z)


@dataclass
class QpSolution:
    z_star: np.ndarray
    y_star: np.ndarray
    status: Status
    prim_res: float
    dual_res: float
    iterations: int
    polished: bool = False
    info: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.status is Status.SOLVED


def _norm_inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _residuals(prob: QpProblem, z, y):
    az = prob.a_mat @ z
    prim = _norm_inf(np.clip(az, prob.lower, prob.upper) - az)
    px = prob.p_mat @ z
    aty = prob.a_mat.T @ y
    dual = _norm_inf(px + prob.q_vec + aty)
    return prim, dual, az, px, aty


def kkt_residuals(prob: QpProblem, sol: QpSolution):
    """Primal, dual and complementarity residuals of ``sol`` (all ∞-norms)."""
    z, y = sol.z_star, sol.y_star
    if z.size != prob.n or y.size != prob.m:
        raise DimensionMismatch("solution dimensions do not match the problem")
    prim, dual, az, _, _ = _residuals(prob, z, y)
    comp = 0.0
    for yi, azi, lo, up in zip(y, az, prob.lower, prob.upper):
        if yi > 0:
            dist = np.inf if up >= INF else abs(up - azi)
        elif yi < 0:
            dist = np.inf if lo <= -INF else abs(azi - lo)
        else:
            continue
        comp = max(comp, abs(yi) * dist)
    return prim, dual, float(comp)


def _polish(prob: QpProblem, z, y, settings: SolverSettings):
    """Solve the KKT system on the active set guessed from ``(z, y)``."""
    az = prob.a_mat @ z
    lo, up = prob.lower, prob.upper
    eq = lo == up
    lower_act = (~eq) & (az - lo < -y) & (lo > -INF)
    upper_act = (~eq) & (up - az < y) & (up < INF)
    act = eq | lower_act | upper_act
    idx = np.flatnonzero(act)
    bound = np.where(upper_act | eq, up, lo)[idx]
    a_act = prob.a_mat[idx]
    n, k = prob.n, idx.size
    delta = POLISH_DELTA
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = prob.p_mat
    kkt[:n, n:] = a_act.T
    kkt[n:, :n] = a_act
    reg = kkt.copy()
    reg[:n, :n] += delta * np.eye(n)
    reg[n:, n:] -= delta * np.eye(k)
    try:
        factor = LdltFactor(reg)
    except SingularMatrix:
        return None
    rhs = np.concatenate([-prob.q_vec, bound])
    sol = factor.solve(rhs)
    for _ in range(POLISH_REFINE_STEPS):
        sol = sol + factor.solve(rhs - kkt @ sol)
    zp = sol[:n]
    yp = np.zeros(prob.m)
    yp[idx] = sol[n:]
    wrong_sign = np.any(yp[lower_act] > 0) or np.any(yp[upper_act] < 0)
    if wrong_sign:
        # redundant active rows leave the multipliers non-unique; pick a
        # sign-consistent set by bounded least squares on stationarity
        lb = np.where(lower_act[idx], -np.inf, np.where(eq[idx], -np.inf, 0.0))
        ub = np.where(upper_act[idx], np.inf, np.where(eq[idx], np.inf, 0.0))
        fit = lsq_linear(a_act.T, -(prob.p_mat @ zp + prob.q_vec), bounds=(lb, ub), method="bvls")
        yp[idx] = fit.x
    if not (np.all(np.isfinite(zp)) and np.all(np.isfinite(yp))):
        return None
    return zp, yp, frozenset(idx.tolist())


def _ruiz_scaling(p, q, a, iters: int = RUIZ_ITERS):
    """Diagonal equilibration of the KKT matrix plus a cost scale, as in OSQP."""
    n, m = q.size, a.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    ps, qs, as_ = p.copy(), q.copy(), a.copy()
    for _ in range(iters):
        col_x = np.maximum(np.max(np.abs(ps), axis=0, initial=0.0), np.max(np.abs(as_), axis=0, initial=0.0))
        col_y = np.max(np.abs(as_), axis=1, initial=0.0)
        dx = 1.0 / np.sqrt(np.clip(col_x, SCALE_MIN, SCALE_MAX))
        dy = 1.0 / np.sqrt(np.clip(col_y, SCALE_MIN, SCALE_MAX))
        ps = dx[:, None] * ps * dx[None, :]
        qs = dx * qs
        as_ = dy[:, None] * as_ * dx[None, :]
        d *= dx
        e *= dy
        mean_p = np.mean(np.max(np.abs(ps), axis=0, initial=0.0)) if n else 0.0
        gamma = 1.0 / np.clip(max(mean_p, _norm_inf(qs)), SCALE_MIN, SCALE_MAX)
        ps *= gamma
        qs *= gamma
        c *= gamma
    return d, e, c, ps, qs, as_


def qp_solve(prob: QpProblem, settings: SolverSettings | None = None) -> QpSolution:
    """Solve a convex QP by ADMM with optional solution polishing.

    The iteration runs on a Ruiz-equilibrated copy of the problem; all
    termination tests use unscaled residuals.
    """
    s = settings or SolverSettings()
    n, m = prob.n, prob.m
    p, q, a, lo, up = prob.p_mat, prob.q_vec, prob.a_mat, prob.lower, prob.upper
    d, e, c, ps, qs, as_ = _ruiz_scaling(p, q, a)
    los = np.where(lo <= -INF, -INF, e * lo)
    ups = np.where(up >= INF, INF, e * up)

    eq_rows = lo == up
    free_rows = (lo <= -INF) & (up >= INF)

    def factorize(rho_bar):
        rho = np.full(m, rho_bar)
        rho[eq_rows] = rho_bar * RHO_EQ_SCALE
        rho[free_rows] = RHO_MIN
        return rho, 1.0 / rho, LdltFactor(ps + s.sigma * np.eye(n) + as_.T @ (rho[:, None] * as_))

    rho_bar = s.rho
    rho, rho_inv, factor = factorize(rho_bar)

    xs = np.zeros(n)
    zs = np.zeros(m)
    ys = np.zeros(m)
    alpha = s.alpha
    last_active = None
    x_last = y_last = None
    x = y = None
    prim = dual = np.inf

    for it in range(1, s.max_iter + 1):
        x_t = factor.solve(s.sigma * xs - qs + as_.T @ (rho * zs - ys))
        z_t = as_ @ x_t
        xs = alpha * x_t + (1.0 - alpha) * xs
        z_relax = alpha * z_t + (1.0 - alpha) * zs
        z_new = np.clip(z_relax + rho_inv * ys, los, ups)
        ys = ys + rho * (z_relax - z_new)
        zs = z_new

        if it % CHECK_EVERY and it != s.max_iter:
            continue

        if s.adaptive_rho and it % ADAPT_EVERY == 0:
            # balance scaled primal and dual residuals; deterministic in the data
            axs = as_ @ xs
            pxs = ps @ xs
            atys = as_.T @ ys
            rp = _norm_inf(axs - zs) / max(_norm_inf(axs), _norm_inf(zs), 1e-12)
            rd = _norm_inf(pxs + qs + atys) / max(_norm_inf(pxs), _norm_inf(atys), _norm_inf(qs), 1e-12)
            if rp > 0 and rd > 0:
                proposal = float(np.clip(rho_bar * np.sqrt(rp / rd), RHO_MIN, RHO_MAX))
                if proposal > ADAPT_RATIO * rho_bar or proposal < rho_bar / ADAPT_RATIO:
                    rho_bar = proposal
                    rho, rho_inv, factor = factorize(rho_bar)

        x_last, y_last = x, y
        x = d * xs
        y = e * ys / c
        z = zs / e
        ax = a @ x
        px = p @ x
        aty = a.T @ y
        prim = _norm_inf(ax - z)
        dual = _norm_inf(px + q + aty)
        eps_prim = s.eps_abs + s.eps_rel * max(_norm_inf(ax), _norm_inf(z))
        eps_dual = s.eps_abs + s.eps_rel * max(_norm_inf(px), _norm_inf(aty), _norm_inf(q))

        if s.polish and max(prim, dual) < POLISH_TRIGGER * (1.0 + max(_norm_inf(q), _norm_inf(z))):
            polished = _polish(prob, x, y, s)
            if polished is not None and polished[2] != last_active:
                last_active = polished[2]
                zp, yp = polished[0], polished[1]
                pp, dp, azp, pxp, atyp = _residuals(prob, zp, yp)
                ep = s.eps_abs + s.eps_rel * _norm_inf(azp)
                ed = s.eps_abs + s.eps_rel * max(_norm_inf(pxp), _norm_inf(atyp), _norm_inf(q))
                if pp <= ep and dp <= ed and pp <= max(prim, ep) and dp <= max(dual, ed):
                    return QpSolution(zp, yp, Status.SOLVED, pp, dp, it, polished=True)

        if prim <= eps_prim and dual <= eps_dual:
            return QpSolution(x, y, Status.SOLVED, prim, dual, it)

        if x_last is None:
            continue
        # infeasibility certificates on differences between checks
        dy = y - y_last
        ndy = _norm_inf(dy)
        if ndy > 0:
            dy_pos = np.maximum(dy, 0.0)
            dy_neg = np.minimum(dy, 0.0)
            finite = ((up < INF) | (dy_pos == 0)) & ((lo > -INF) | (dy_neg == 0))
            if np.all(finite) and _norm_inf(a.T @ dy) <= s.eps_infeas * ndy:
                support = up[dy_pos > 0] @ dy_pos[dy_pos > 0] + lo[dy_neg < 0] @ dy_neg[dy_neg < 0]
                if support < -s.eps_infeas * ndy:
                    return QpSolution(x, y, Status.INFEASIBLE, prim, dual, it,
                                      info={"certificate": "primal", "dy": dy})
        dx = x - x_last
        ndx = _norm_inf(dx)
        if ndx > 0 and _norm_inf(p @ dx) <= s.eps_infeas * ndx and q @ dx < -s.eps_infeas * ndx:
            adx = a @ dx
            tol = s.eps_infeas * ndx
            ok_up = (up >= INF) | (adx <= tol)
            ok_lo = (lo <= -INF) | (adx >= -tol)
            if np.all(ok_up & ok_lo):
                return QpSolution(x, y, Status.INFEASIBLE, prim, dual, it,
                                  info={"certificate": "dual", "dx": dx})

    return QpSolution(x, y, Status.MAX_ITER, prim, dual, s.max_iter)


def active_set(prob: QpProblem, sol: QpSolution, tol: float = ACTIVE_TOL):
    """Indices of strongly active rows and the bound each one sits on.

    Equality rows are always active. A row with a vanishing multiplier but
    zero slack is weakly active and raises :class:`DegenerateActiveSet`.
    """
    az = prob.a_mat @ sol.z_star
    y = sol.y_star
    lo, up = prob.lower, prob.upper
    eq = lo == up
    slack_up = np.where(up < INF, up - az, np.inf)
    slack_lo = np.where(lo > -INF, az - lo, np.inf)
    upper_act = (~eq) & (y > tol) & (slack_up < tol)
    lower_act = (~eq) & (y < -tol) & (slack_lo < tol)
    weak = (~eq) & (np.abs(y) <= tol) & ((slack_up < tol) | (slack_lo < tol))
    if np.any(weak):
        raise DegenerateActiveSet(f"weakly active rows {np.flatnonzero(weak).tolist()}")
    # a sizeable multiplier on a loose row means the solution is not optimal
    bad = (~eq) & (np.abs(y) > tol) & ~(upper_act | lower_act)
    if np.any(bad):
        raise DegenerateActiveSet(f"multipliers on inactive rows {np.flatnonzero(bad).tolist()}")
    act = eq | upper_act | lower_act
    return np.flatnonzero(act)


def qp_solution_jacobian(prob: QpProblem, sol: QpSolution, dq_dtheta, dbounds_dtheta):
    """``∂z*/∂θ`` by implicit differentiation of the active-set KKT system.

    ``dq_dtheta`` is ``n×p``; ``dbounds_dtheta`` is ``m×p`` and gives the
    derivative of whichever bound is active on each row.
    """
    if not sol.solved:
        raise ValueError("can only differentiate a solved QP")
    dq = np.asarray(dq_dtheta, dtype=float).reshape(prob.n, -1)
    db = np.asarray(dbounds_dtheta, dtype=float).reshape(prob.m, -1)
    idx = active_set(prob, sol)
    n, k = prob.n, idx.size
    a_act = prob.a_mat[idx]
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = prob.p_mat
    kkt[:n, n:] = a_act.T
    kkt[n:, :n] = a_act
    rhs = np.vstack([-dq, db[idx]])
    try:
        dsol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        raise DegenerateActiveSet("active-set KKT matrix is singular") from None
    return dsol[:n]
