"""Closed-loop simulation, NMSE and normalized control cost, comparison tables.

A trajectory runs for exactly ``N`` steps (the MPC horizon), so its cost

    J = x_Nᵀ Q_N x_N + Σ_{k<N} (x_kᵀ Q x_k + u_kᵀ R u_k)

has the same terms as the MPC objective, and ``J_n = J / x_0ᵀ x_0``.

The controller ``MpcOracle`` applies the optimal open-loop sequence from
``x_0``; its cost is the ``N``-step optimum and lower-bounds every rollout
that respects the constraints. ``MpcReceding`` re-solves the MPC at every
step, which is how the learned controllers are deployed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    ControllerFailure,
    DimensionMismatch,
    InfeasibleProjection,
    InfeasibleState,
    NoConvergence,
    ZeroInitialState,
    ZeroReference,
)
from .mpc import MpcSpec, lqr_gain, solve_mpc
from .network import Arch, Mlp, ProjectionSpec, TrainConfig, predict, project_feasible, train
from .numerics import derive_seed
from .optimize import SolverSettings
from .polytope import Polytope
from .sampler import HitAndRunConfig, hit_and_run

log = logging.getLogger(__name__)

NMSE_FLOOR_DB = -300.0
ZERO_REFERENCE = 1e-300
VIOLATION_TOL = 1e-8
ORACLE_SETTINGS = SolverSettings(eps_abs=1e-9, eps_rel=1e-9)


class ControllerKind(str, Enum):
    MPC_ORACLE = "MpcOracle"
    MPC_RECEDING = "MpcReceding"
    LQR = "Lqr"
    BBNN = "BBNN"
    PROJECTION = "ProjectionNN"


@dataclass
class Controller:
    """Maps a state to the input applied at that state."""

    kind: ControllerKind
    spec: MpcSpec
    net: Mlp | None = None
    pspec: ProjectionSpec | None = None
    settings: SolverSettings = ORACLE_SETTINGS
    gain: np.ndarray | None = None
    _u_proj: ProjectionSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = ControllerKind(self.kind)
        if self.kind in (ControllerKind.BBNN, ControllerKind.PROJECTION) and self.net is None:
            raise ValueError(f"{self.kind.value} controller needs a network")
        if self.kind is ControllerKind.PROJECTION and self.pspec is None:
            raise ValueError("ProjectionNN controller needs a ProjectionSpec")
        if self.kind is ControllerKind.LQR:
            if self.gain is None:
                self.gain = lqr_gain(self.spec.sys, self.spec.q_mat, self.spec.r_mat)
            u_set = self.spec.u_set
            self._u_proj = ProjectionSpec(u_set.a_mat, u_set.b_vec, np.zeros((u_set.n_rows, self.spec.n)))

    @property
    def name(self) -> str:
        return self.kind.value

    def __call__(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        kind = self.kind
        try:
            if kind in (ControllerKind.MPC_ORACLE, ControllerKind.MPC_RECEDING):
                return solve_mpc(self.spec, x, self.settings).u_seq[0]
            if kind is ControllerKind.LQR:
                return self.clip_to_inputs(-self.gain @ x)
            arch = Arch.PROJECTION if kind is ControllerKind.PROJECTION else Arch.BBNN
            return predict(arch, self.net, self.pspec, x[None, :])[0]
        except (InfeasibleState, NoConvergence, InfeasibleProjection) as exc:
            raise ControllerFailure(f"{kind.value} failed at x={x.tolist()}: {exc}") from exc

    def clip_to_inputs(self, u):
        """Euclidean projection onto U (plain clipping when U is a box)."""
        return project_feasible(self._u_proj, np.zeros(self.spec.n), u).u


@dataclass
class TrajectoryResult:
    states: np.ndarray  # (N + 1, n)
    inputs: np.ndarray  # (N, m)
    cost: float
    state_ok: np.ndarray  # (N + 1,) x_k ∈ X
    input_ok: np.ndarray  # (N,) u_k ∈ U

    @property
    def violations(self) -> int:
        return int((~self.state_ok).sum() + (~self.input_ok).sum())

    @property
    def feasible(self) -> bool:
        return self.violations == 0


def trajectory_cost(spec: MpcSpec, states, inputs) -> float:
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    stage = np.einsum("ki,ij,kj->", states[:-1], spec.q_mat, states[:-1])
    stage += np.einsum("ki,ij,kj->", inputs, spec.r_mat, inputs)
    return float(stage + states[-1] @ spec.qn_mat @ states[-1])


def _rollout(spec: MpcSpec, x0, inputs_for, steps: int, tol: float) -> TrajectoryResult:
    sys = spec.sys
    states = np.zeros((steps + 1, spec.n))
    inputs = np.zeros((steps, spec.m))
    states[0] = x0
    for k in range(steps):
        inputs[k] = inputs_for(k, states[k])
        states[k + 1] = sys.step(states[k], inputs[k])
    return TrajectoryResult(
        states, inputs, trajectory_cost(spec, states, inputs),
        np.atleast_1d(spec.x_set.contains(states, tol)),
        np.atleast_1d(spec.u_set.contains(inputs, tol)),
    )


def simulate(ctrl: Controller, spec: MpcSpec, x0, steps: int | None = None,
             tol: float = VIOLATION_TOL) -> TrajectoryResult:
    """Roll the closed loop forward from ``x0``; violations are counted, not fatal.

    ``MpcOracle`` solves once at ``x0`` and applies the optimal sequence
    (extended by re-solving if ``steps`` exceeds the horizon); every other
    controller is queried at each visited state.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != spec.n:
        raise DimensionMismatch(f"x0 has dimension {x0.size}, spec expects {spec.n}")
    steps = spec.horizon if steps is None else int(steps)
    if ctrl.kind is ControllerKind.MPC_ORACLE:
        plan = {}

        def inputs_for(k, x):
            if k % spec.horizon == 0:
                try:
                    plan["u"] = solve_mpc(spec, x, ctrl.settings).u_seq
                except (InfeasibleState, NoConvergence) as exc:
                    raise ControllerFailure(f"MpcOracle failed at x={x.tolist()}: {exc}") from exc
            return plan["u"][k % spec.horizon]
    else:
        def inputs_for(k, x):
            return ctrl(x)
    return _rollout(spec, x0, inputs_for, steps, tol)


def normalized_cost(traj: TrajectoryResult, spec: MpcSpec | None = None) -> float:
    """``J_n = J / x_0ᵀ x_0``."""
    x0 = traj.states[0]
    energy = float(x0 @ x0)
    if energy == 0.0:
        raise ZeroInitialState("J_n is undefined for x0 = 0")
    cost = traj.cost if spec is None else trajectory_cost(spec, traj.states, traj.inputs)
    return cost / energy


def nmse(preds, truths) -> float:
    """Aggregate NMSE in dB: ``10 log10(Σ||u - u*||² / Σ||u*||²)``, floored at -300."""
    preds = np.asarray(preds, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if preds.shape != truths.shape:
        raise DimensionMismatch(f"predictions {preds.shape} and references {truths.shape} differ")
    ref = float(np.sum(truths**2))
    if ref < ZERO_REFERENCE:
        raise ZeroReference("reference energy is zero")
    err = float(np.sum((preds - truths) ** 2))
    if err == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(err / ref), NMSE_FLOOR_DB)


# --- tables ----------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


NMSE_HEADER = ("size", "arch", "seed", "nmse_db")
COST_HEADER = ("traj_id", "controller", "j_n", "violations")


@dataclass(frozen=True)
class CurveSetup:
    widths: tuple
    train: TrainConfig = TrainConfig()
    sampler: HitAndRunConfig = HitAndRunConfig()
    solver: SolverSettings = SolverSettings()
    test_size: int = 500
    threads: int = 1


def labeled_pool(spec, cinf, n, seed, setup: CurveSetup):
    from .dataset import generate

    return generate(spec, cinf, n, setup.sampler.with_seed(seed), settings=setup.solver, threads=setup.threads)


def nmse_curve(spec: MpcSpec, cinf: Polytope, sizes, archs, seeds, setup: CurveSetup,
               test_set=None, pspec: ProjectionSpec | None = None, on_model=None,
               pool_size: int | None = None):
    """Learning curve rows ``(size, arch, seed, nmse_db)``.

    Per seed one labeled pool of ``pool_size`` states (default ``max(sizes)``)
    is drawn; the training set of size ``s`` is its first ``s`` states. States
    whose label fails are replaced at the end of the pool, so the prefix
    depends on the pool size. The test set is shared by all seeds.
    ``on_model(size, arch, seed, net)`` is called for every trained net.
    """
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    pool_size = sizes[-1] if pool_size is None else int(pool_size)
    if pool_size < sizes[-1]:
        raise ValueError("pool_size is smaller than the largest size")
    archs = [Arch(a) for a in archs]
    if test_set is None:
        test_set = labeled_pool(spec, cinf, setup.test_size, derive_seed(seeds[0], "test"), setup)
    pspec = pspec or ProjectionSpec.from_sets(spec.sys, spec.u_set, cinf)
    rows = []
    for seed in seeds:
        pool = labeled_pool(spec, cinf, pool_size, derive_seed(seed, "train"), setup)
        for size in sizes:
            for arch in archs:
                init = Mlp.init(setup.widths, seed=derive_seed(seed, f"init-{arch.value}"))
                cfg = TrainConfig(**{**setup.train.__dict__, "seed": derive_seed(seed, f"batches-{size}")})
                result = train(init, pool.states[:size], pool.targets[:size], cfg, arch, pspec)
                preds = predict(arch, result.net, pspec, test_set.states)
                value = nmse(preds, test_set.targets)
                log.info("size=%d arch=%s seed=%d nmse=%.2f dB", size, arch.value, seed, value)
                rows.append((size, arch.value, seed, value))
                if on_model is not None:
                    on_model(size, arch, seed, result.net)
    return rows


def trajectory_starts(cinf: Polytope, n_traj: int, seed: int, sampler: HitAndRunConfig | None = None):
    sampler = sampler or HitAndRunConfig()
    return hit_and_run(cinf, n_traj, sampler.with_seed(derive_seed(seed, "trajectories")))


def cost_comparison(spec: MpcSpec, controllers, starts, tol: float = VIOLATION_TOL):
    """Rows ``(traj_id, controller, j_n, violations)`` for every start state."""
    rows = []
    for i, x0 in enumerate(np.atleast_2d(starts)):
        for ctrl in controllers:
            traj = simulate(ctrl, spec, x0, tol=tol)
            rows.append((i, ctrl.name, normalized_cost(traj), traj.violations))
    return rows


def cost_summary(rows):
    """Per controller: ``(controller, mean, median, total violations, violating trajectories)``."""
    names = list(dict.fromkeys(r[1] for r in rows))
    out = []
    for name in names:
        jn = np.array([r[2] for r in rows if r[1] == name])
        viol = np.array([r[3] for r in rows if r[1] == name])
        out.append((name, float(jn.mean()), float(np.median(jn)), int(viol.sum()), int((viol > 0).sum())))
    return out


def read_csv(path):
    with open(Path(path), newline="") as fh:
        return list(csv.reader(fh))
