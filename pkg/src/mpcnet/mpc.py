"""Linear MPC problem data, QP assembly, LQR baseline and MPC sensitivities.

The finite-horizon problem

    min  x_Nᵀ Q_N x_N + Σ_{k=0}^{N-1} x_kᵀ Q x_k + u_kᵀ R u_k
    s.t. x_{k+1} = A x_k + B u_k,  x_k ∈ X (k = 1..N),  u_k ∈ U

is posed in the stacked form with decision vector
``z = (x_1, ..., x_N, u_0, ..., u_{N-1})`` and the dynamics as equality
rows. The constant ``x_0ᵀ Q x_0`` is added to the optimal value after the
solve.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DimensionMismatch, InfeasibleState, NoConvergence
from .optimize import INF, QpProblem, QpSolution, SolverSettings, qp_solution_jacobian, qp_solve
from .polytope import Polytope, load_polytope

DARE_TOL = 1e-10
DARE_MAX_ITER = 100_000
PSD_SHIFT = 1e-10


@dataclass(frozen=True)
class LinearSystem:
    a_mat: np.ndarray
    b_mat: np.ndarray

    def __post_init__(self):
        a = np.array(self.a_mat, dtype=float, ndmin=2)
        b = np.array(self.b_mat, dtype=float).reshape(a.shape[0], -1)
        if a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"A must be square, got {a.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("system matrices must be finite")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_mat", b)

    @property
    def n(self) -> int:
        return self.a_mat.shape[0]

    @property
    def m(self) -> int:
        return self.b_mat.shape[1]

    def step(self, x, u):
        return self.a_mat @ x + self.b_mat @ u


def _check_psd(mat, name, definite=False):
    mat = np.array(mat, dtype=float, ndmin=2)
    if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    shift = 0.0 if definite else PSD_SHIFT * max(1.0, np.max(np.abs(mat)))
    try:
        np.linalg.cholesky(mat + shift * np.eye(mat.shape[0]))
    except np.linalg.LinAlgError:
        kind = "positive definite" if definite else "positive semidefinite"
        raise ValueError(f"{name} must be {kind}") from None
    mat.setflags(write=False)
    return mat


@dataclass(frozen=True)
class MpcSpec:
    sys: LinearSystem
    q_mat: np.ndarray
    qn_mat: np.ndarray
    r_mat: np.ndarray
    horizon: int
    x_set: Polytope
    u_set: Polytope
    name: str = "custom"

    def __post_init__(self):
        n, m = self.sys.n, self.sys.m
        object.__setattr__(self, "q_mat", _check_psd(self.q_mat, "Q"))
        object.__setattr__(self, "qn_mat", _check_psd(self.qn_mat, "Q_N"))
        object.__setattr__(self, "r_mat", _check_psd(self.r_mat, "R", definite=True))
        if self.q_mat.shape != (n, n) or self.qn_mat.shape != (n, n):
            raise DimensionMismatch("state weights do not match the state dimension")
        if self.r_mat.shape != (m, m):
            raise DimensionMismatch("input weight does not match the input dimension")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.x_set.dim != n or self.u_set.dim != m:
            raise DimensionMismatch("constraint sets do not match system dimensions")

    @property
    def n(self) -> int:
        return self.sys.n

    @property
    def m(self) -> int:
        return self.sys.m

    def stage_cost(self, x, u) -> float:
        return float(x @ self.q_mat @ x + u @ self.r_mat @ u)

    def to_config(self) -> str:
        return spec_to_config(self)

    def digest(self) -> str:
        """Stable hash of the numeric content (the name is excluded)."""
        text = spec_to_config(self, include_name=False)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_mpc_qp(spec: MpcSpec, x0) -> QpProblem:
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n, m, horizon = spec.n, spec.m, spec.horizon
    if x0.size != n:
        raise DimensionMismatch(f"initial state has dimension {x0.size}, expected {n}")
    a_sys, b_sys = spec.sys.a_mat, spec.sys.b_mat
    nx, nu = n * horizon, m * horizon
    nz = nx + nu

    hess = np.zeros((nz, nz))
    for k in range(horizon):
        w = spec.qn_mat if k == horizon - 1 else spec.q_mat
        hess[k * n:(k + 1) * n, k * n:(k + 1) * n] = 2.0 * w
        hess[nx + k * m:nx + (k + 1) * m, nx + k * m:nx + (k + 1) * m] = 2.0 * spec.r_mat

    dyn = np.zeros((nx, nz))
    for k in range(horizon):
        rows = slice(k * n, (k + 1) * n)
        dyn[rows, k * n:(k + 1) * n] = np.eye(n)
        if k > 0:
            dyn[rows, (k - 1) * n:k * n] = -a_sys
        dyn[rows, nx + k * m:nx + (k + 1) * m] = -b_sys
    dyn_rhs = np.zeros(nx)
    dyn_rhs[:n] = a_sys @ x0

    xs, us = spec.x_set, spec.u_set
    state_rows = np.kron(np.eye(horizon), xs.a_mat)
    input_rows = np.kron(np.eye(horizon), us.a_mat)
    ineq = np.zeros((state_rows.shape[0] + input_rows.shape[0], nz))
    ineq[:state_rows.shape[0], :nx] = state_rows
    ineq[state_rows.shape[0]:, nx:] = input_rows
    ineq_up = np.concatenate([np.tile(xs.b_vec, horizon), np.tile(us.b_vec, horizon)])

    a_mat = np.vstack([dyn, ineq])
    lower = np.concatenate([dyn_rhs, np.full(ineq_up.size, -INF)])
    upper = np.concatenate([dyn_rhs, ineq_up])
    return QpProblem(hess, np.zeros(nz), a_mat, lower, upper)


class MpcSolution(NamedTuple):
    u_seq: np.ndarray  # (N, m)
    x_seq: np.ndarray  # (N + 1, n), starting at x0
    j_star: float
    qp: QpProblem
    solution: QpSolution


def solve_mpc(spec: MpcSpec, x0, settings: SolverSettings | None = None) -> MpcSolution:
    """Optimal input sequence and cost from ``x0``.

    Raises :class:`InfeasibleState` when no admissible sequence exists.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    prob = build_mpc_qp(spec, x0)
    sol = qp_solve(prob, settings)
    if sol.status.value == "Infeasible":
        raise InfeasibleState(f"MPC problem infeasible at x0={x0.tolist()}")
    if not sol.solved:
        raise NoConvergence(f"QP solver stopped with status {sol.status.value}", residual=sol.prim_res)
    n, m, horizon = spec.n, spec.m, spec.horizon
    nx = n * horizon
    u_seq = sol.z_star[nx:].reshape(horizon, m)
    x_seq = np.vstack([x0, sol.z_star[:nx].reshape(horizon, n)])
    j_star = float(x0 @ spec.q_mat @ x0) + prob.objective(sol.z_star)
    return MpcSolution(u_seq, x_seq, j_star, prob, sol)


def mpc_gradient(spec: MpcSpec, x0, settings: SolverSettings | None = None, solved: MpcSolution | None = None):
    """Jacobian ``∂u_0/∂x_0`` (m×n) of the MPC law at ``x0``."""
    res = solved if solved is not None else solve_mpc(spec, x0, settings)
    n, m, horizon = spec.n, spec.m, spec.horizon
    nx = n * horizon
    prob = res.qp
    dbounds = np.zeros((prob.m, n))
    dbounds[:n] = spec.sys.a_mat
    dz = qp_solution_jacobian(prob, res.solution, np.zeros((prob.n, n)), dbounds)
    return dz[nx:nx + m]


def riccati_step(p_mat, sys: LinearSystem, q_mat, r_mat):
    a, b = sys.a_mat, sys.b_mat
    pb = p_mat @ b
    gain = np.linalg.solve(b.T @ pb + r_mat, pb.T @ a)
    nxt = q_mat + a.T @ p_mat @ a - a.T @ pb @ gain
    return 0.5 * (nxt + nxt.T)


def dare_residual(p_mat, sys: LinearSystem, q_mat, r_mat) -> float:
    return float(np.max(np.abs(riccati_step(p_mat, sys, q_mat, r_mat) - p_mat)))


def dare_solve(sys: LinearSystem, q_mat, r_mat, tol: float = DARE_TOL, max_iter: int = DARE_MAX_ITER):
    """Stabilizing DARE solution by value iteration from ``P = Q``."""
    q_mat = np.asarray(q_mat, dtype=float)
    r_mat = np.atleast_2d(np.asarray(r_mat, dtype=float))
    p_mat = q_mat.copy()
    change = np.inf
    for _ in range(max_iter):
        nxt = riccati_step(p_mat, sys, q_mat, r_mat)
        change = float(np.max(np.abs(nxt - p_mat)))
        p_mat = nxt
        if change <= tol:
            return p_mat
        if not np.all(np.isfinite(p_mat)):
            break
    raise NoConvergence(f"Riccati iteration did not converge (last change {change:.3e})",
                        result=p_mat, residual=change)


def lqr_gain(sys: LinearSystem, q_mat, r_mat, p_inf=None):
    """Infinite-horizon gain ``L`` with ``u = -L x``."""
    r_mat = np.atleast_2d(np.asarray(r_mat, dtype=float))
    p_inf = dare_solve(sys, q_mat, r_mat) if p_inf is None else p_inf
    b = sys.b_mat
    return np.linalg.solve(b.T @ p_inf @ b + r_mat, b.T @ p_inf @ sys.a_mat)


def spectral_radius(mat) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(mat, dtype=float)))))


# --- configuration files -------------------------------------------------

def _fmt_matrix(mat) -> str:
    mat = np.atleast_2d(mat)
    return "; ".join(" ".join(f"{v:.17g}" for v in row) for row in mat)


def _parse_matrix(text: str, name: str):
    try:
        rows = [[float(t) for t in row.split()] for row in text.split(";") if row.strip()]
        return np.array(rows, dtype=float)
    except ValueError:
        raise ConfigError(f"could not parse matrix {name!r}") from None


def spec_to_config(spec: MpcSpec, include_name: bool = True) -> str:
    """Serialize to the INI-style key-value format read by :func:`load_spec`.

    Matrices are written row-major, rows separated by ``;``. Constraint sets
    are written in H-form (``x_a``/``x_b``), which round-trips any polytope.
    """
    lines = []
    if include_name:
        lines += ["[meta]", f"name = {spec.name}", ""]
    lines += [
        "[system]",
        f"a = {_fmt_matrix(spec.sys.a_mat)}",
        f"b = {_fmt_matrix(spec.sys.b_mat)}",
        "",
        "[cost]",
        f"q = {_fmt_matrix(spec.q_mat)}",
        f"qn = {_fmt_matrix(spec.qn_mat)}",
        f"r = {_fmt_matrix(spec.r_mat)}",
        f"horizon = {spec.horizon}",
        "",
        "[constraints]",
        f"x_a = {_fmt_matrix(spec.x_set.a_mat)}",
        f"x_b = {' '.join(f'{v:.17g}' for v in spec.x_set.b_vec)}",
        f"u_a = {_fmt_matrix(spec.u_set.a_mat)}",
        f"u_b = {' '.join(f'{v:.17g}' for v in spec.u_set.b_vec)}",
    ]
    return "\n".join(lines) + "\n"


def _read_set(section, prefix: str, base: Path) -> Polytope:
    if f"{prefix}_lower" in section or f"{prefix}_upper" in section:
        lo = _parse_matrix(section.get(f"{prefix}_lower", ""), f"{prefix}_lower").reshape(-1)
        up = _parse_matrix(section.get(f"{prefix}_upper", ""), f"{prefix}_upper").reshape(-1)
        return Polytope.from_box(lo, up)
    if f"{prefix}_a" in section:
        a = _parse_matrix(section[f"{prefix}_a"], f"{prefix}_a")
        b = _parse_matrix(section[f"{prefix}_b"], f"{prefix}_b").reshape(-1)
        return Polytope(a, b)
    if f"{prefix}_polytope" in section:
        path = Path(section[f"{prefix}_polytope"])
        return load_polytope(path if path.is_absolute() else base / path)
    raise ConfigError(f"constraints section needs {prefix}_lower/{prefix}_upper, {prefix}_a/{prefix}_b "
                      f"or {prefix}_polytope")


def parse_spec(text: str, base: Path | str = ".") -> MpcSpec:
    """Parse the key-value spec format.

    Sections ``[system]`` (``a``, ``b``), ``[cost]`` (``q``, ``qn``, ``r``,
    ``horizon``) and ``[constraints]`` where each of ``x``/``u`` is given as
    a box (``x_lower``/``x_upper``), in H-form (``x_a``/``x_b``) or as a
    polytope file (``x_polytope``). ``qn`` defaults to ``q``.
    """
    cfg = configparser.ConfigParser()
    try:
        cfg.read_string(text)
        system, cost, cons = cfg["system"], cfg["cost"], cfg["constraints"]
        a = _parse_matrix(system["a"], "a")
        b = _parse_matrix(system["b"], "b").reshape(a.shape[0], -1)
        q = _parse_matrix(cost["q"], "q")
        qn = _parse_matrix(cost.get("qn", cost["q"]), "qn")
        r = _parse_matrix(cost["r"], "r")
        horizon = cost.getint("horizon")
    except (KeyError, configparser.Error) as exc:
        raise ConfigError(f"invalid spec config: {exc}") from None
    name = cfg.get("meta", "name", fallback="custom")
    base = Path(base)
    try:
        return MpcSpec(LinearSystem(a, b), q, qn, r, horizon,
                       _read_set(cons, "x", base), _read_set(cons, "u", base), name=name)
    except (ValueError, DimensionMismatch) as exc:
        raise ConfigError(str(exc)) from None


def load_spec(path) -> MpcSpec:
    path = Path(path)
    return parse_spec(path.read_text(), base=path.parent)
