"""Gradient-based acquisition of new training states.

Around an anchor ``x_i`` the gap between network and MPC law is, to first
order,

    e(x) ≈ [n(x_i) - μ(x_i)] + [∇n(x_i) - ∇μ(x_i)] (x - x_i).

The step ``d`` with ``||d|| <= ε`` that maximizes the growth of the linear
term is ``ε v`` with ``v`` the top right singular vector of the Jacobian gap,
and the growth is ``ε σ_max``. No solver is needed for this.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from .errors import DegenerateActiveSet, InfeasibleState, NoConvergence, NoFeasibleProposal
from .mpc import MpcSpec, mpc_gradient, solve_mpc
from .network import Arch, Mlp, ProjectionSpec, network_gradient, predict
from .numerics import top_right_singular_vector
from .optimize import SolverSettings
from .polytope import Polytope, chebyshev_center

log = logging.getLogger(__name__)

EPSILON_FRACTION = 0.05
MAX_HALVINGS = 10
FLAT_GAP = 1e-12
PROBE_SETTINGS = SolverSettings(eps_abs=1e-9, eps_rel=1e-9)


class ErrorProbe(NamedTuple):
    anchor: np.ndarray
    value_gap: np.ndarray  # n(x_i) - μ(x_i), shape (m,)
    grad_gap: np.ndarray  # ∂n/∂x - ∂μ/∂x at x_i, shape (m, n)
    epsilon: float


class Proposal(NamedTuple):
    x_new: np.ndarray
    growth: float
    epsilon: float
    informative: bool


def default_epsilon(cinf: Polytope) -> float:
    """5% of the Chebyshev radius of the invariant set."""
    return EPSILON_FRACTION * chebyshev_center(cinf)[1]


def build_probe(arch, net: Mlp, pspec: ProjectionSpec | None, spec: MpcSpec, x_i, epsilon: float,
                settings: SolverSettings = PROBE_SETTINGS) -> ErrorProbe:
    """Value and Jacobian gaps between the network and the MPC law at ``x_i``.

    Only the first input is compared when the network predicts a sequence.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x_i = np.asarray(x_i, dtype=float).reshape(-1)
    m = spec.m
    solved = solve_mpc(spec, x_i, settings)
    mu_grad = mpc_gradient(spec, x_i, settings, solved=solved)
    n_val = predict(arch, net, pspec, x_i[None, :])[0][:m]
    n_grad = network_gradient(arch, net, pspec, x_i)[:m]
    return ErrorProbe(x_i, n_val - solved.u_seq[0], n_grad - mu_grad, float(epsilon))


def propose_sample(probe: ErrorProbe, cinf: Polytope, tol: float = 0.0) -> Proposal:
    """Point in the ε-ball around the anchor where the linearized gap grows fastest.

    The sign of the step follows the value gap (so the predicted total error
    grows). If neither ``x_i ± d`` lies in ``cinf`` the radius is halved, up
    to ten times.
    """
    gap = np.atleast_2d(probe.grad_gap)
    if not np.all(np.abs(gap) <= FLAT_GAP):
        v, s = top_right_singular_vector(gap)
    else:
        s = 0.0
    if s <= FLAT_GAP:
        return Proposal(probe.anchor.copy(), 0.0, probe.epsilon, False)
    sign = 1.0 if float(probe.value_gap @ (gap @ v)) >= 0.0 else -1.0
    eps = probe.epsilon
    for _ in range(MAX_HALVINGS + 1):
        for direction in (sign, -sign):
            x_new = probe.anchor + direction * eps * v
            if cinf.contains(x_new, tol):
                return Proposal(x_new, s * eps, eps, True)
        eps *= 0.5
    raise NoFeasibleProposal(f"no step inside the invariant set around x={probe.anchor.tolist()}")


def acquisition_round(arch, net: Mlp, pspec: ProjectionSpec | None, spec: MpcSpec, cinf: Polytope,
                      anchors, epsilon: float | None = None, k: int = 10,
                      settings: SolverSettings = PROBE_SETTINGS) -> np.ndarray:
    """Up to ``k`` proposals ranked by growth plus ``||value_gap||``.

    Anchors with degenerate active sets or failing solves are skipped.
    Selected points are kept at least ``ε/2`` apart.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if k <= 0:
        return np.zeros((0, anchors.shape[1]))
    epsilon = default_epsilon(cinf) if epsilon is None else float(epsilon)
    scored = []
    for i, x_i in enumerate(anchors):
        try:
            probe = build_probe(arch, net, pspec, spec, x_i, epsilon, settings)
            prop = propose_sample(probe, cinf)
        except (DegenerateActiveSet, InfeasibleState, NoConvergence, NoFeasibleProposal) as exc:
            log.info("skipping anchor %d: %s", i, exc)
            continue
        scored.append((prop.growth + float(np.linalg.norm(probe.value_gap)), i, prop.x_new))
    scored.sort(key=lambda t: (-t[0], t[1]))
    chosen = []
    for _, _, x_new in scored:
        if all(np.linalg.norm(x_new - c) >= 0.5 * epsilon for c in chosen):
            chosen.append(x_new)
            if len(chosen) == k:
                break
    return np.array(chosen).reshape(len(chosen), anchors.shape[1])


def acquisition_experiment(spec: MpcSpec, cinf: Polytope, seeds, setup, base_size: int = 100,
                           n_new: int = 50, arch=Arch.PROJECTION, test_set=None):
    """One retraining round with acquired versus random extra states.

    Returns rows ``(seed, strategy, nmse_db)`` with strategy ``acquired`` or
    ``random``. Acquired states are labeled by the MPC and appended to the
    base training set; anchors are the base training states.
    """
    from .dataset import label_states
    from .evaluation import labeled_pool, nmse
    from .network import TrainConfig, train
    from .numerics import derive_seed

    arch = Arch(arch)
    pspec = ProjectionSpec.from_sets(spec.sys, spec.u_set, cinf)
    if test_set is None:
        test_set = labeled_pool(spec, cinf, setup.test_size, derive_seed(seeds[0], "test"), setup)
    rows = []
    for seed in seeds:
        base = labeled_pool(spec, cinf, base_size, derive_seed(seed, "train"), setup)
        cfg = TrainConfig(**{**setup.train.__dict__, "seed": derive_seed(seed, "batches")})
        init = Mlp.init(setup.widths, seed=derive_seed(seed, f"init-{arch.value}"))
        first = train(init, base.states, base.targets, cfg, arch, pspec).net
        picked = acquisition_round(arch, first, pspec, spec, cinf, base.states, k=n_new)
        targets, ok = label_states(spec, picked, settings=setup.solver)
        acquired = (picked[ok], np.array([t for t, o in zip(targets, ok) if o]).reshape(int(ok.sum()), -1))
        extra = labeled_pool(spec, cinf, n_new, derive_seed(seed, "random-extra"), setup)
        for name, (xs, us) in (("acquired", acquired), ("random", (extra.states, extra.targets))):
            states = np.vstack([base.states, xs])
            labels = np.vstack([base.targets, us])
            net = train(first, states, labels, cfg, arch, pspec).net
            rows.append((seed, name, nmse(predict(arch, net, pspec, test_set.states), test_set.targets)))
    return rows
