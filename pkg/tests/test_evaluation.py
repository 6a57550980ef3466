import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpcnet.errors import ControllerFailure, DimensionMismatch, ZeroInitialState, ZeroReference
from mpcnet.evaluation import (
    NMSE_FLOOR_DB,
    Controller,
    CurveSetup,
    cost_comparison,
    cost_summary,
    nmse,
    nmse_curve,
    normalized_cost,
    read_csv,
    simulate,
    trajectory_cost,
    trajectory_starts,
    write_csv,
)
from mpcnet.mpc import LinearSystem, MpcSpec, lqr_gain, solve_mpc
from mpcnet.network import Arch, Mlp, ProjectionSpec, TrainConfig
from mpcnet.polytope import Polytope
from mpcnet.sampler import HitAndRunConfig

SMALL = CurveSetup(widths=(2, 8, 1), train=TrainConfig(epochs=3), sampler=HitAndRunConfig(burn_in=100, thinning=2),
                   test_size=30)


@pytest.fixture(scope="module")
def pspec2d(spec2d, cinf2d):
    return ProjectionSpec.from_sets(spec2d.sys, spec2d.u_set, cinf2d)


@pytest.fixture(scope="module")
def starts2d(cinf2d):
    return trajectory_starts(cinf2d, 40, seed=3)


# --- nmse ----------------------------------------------------------------------

def test_nmse_examples(rng):
    truths = rng.normal(size=(50, 2))
    assert nmse(truths, truths) == NMSE_FLOOR_DB
    assert nmse(2 * truths, truths) == pytest.approx(0.0, abs=1e-12)
    # error energy one tenth of the reference energy
    err = rng.normal(size=truths.shape)
    err *= np.sqrt(0.1 * np.sum(truths**2) / np.sum(err**2))
    assert nmse(truths + err, truths) == pytest.approx(-10.0, abs=1e-10)


@given(st.floats(min_value=1e-3, max_value=1e3), st.booleans(), st.integers(0, 1000))
def test_nmse_is_scale_invariant(scale, negate, seed):
    gen = np.random.default_rng(seed)
    preds, truths = gen.normal(size=(20, 2)), gen.normal(size=(20, 2))
    c = -scale if negate else scale
    assert nmse(c * preds, c * truths) == pytest.approx(nmse(preds, truths), abs=1e-10)


def test_nmse_errors():
    with pytest.raises(ZeroReference):
        nmse(np.ones((3, 1)), np.zeros((3, 1)))
    with pytest.raises(DimensionMismatch):
        nmse(np.ones((3, 1)), np.ones((4, 1)))


# --- simulation and J_n --------------------------------------------------------------

def test_zero_start_gives_zero_trajectory(spec2d):
    traj = simulate(Controller("MpcReceding", spec2d), spec2d, [0.0, 0.0])
    assert np.array_equal(traj.states, np.zeros((4, 2)))
    assert traj.cost == 0.0 and traj.feasible
    with pytest.raises(ZeroInitialState):
        normalized_cost(traj)


def test_normalized_cost_hand_case():
    box = Polytope.from_box([-10.0], [10.0])
    spec = MpcSpec(LinearSystem(np.eye(1), np.ones((1, 1))), np.eye(1), np.eye(1), np.eye(1), 1, box,
                   Polytope.from_box([-1.0], [1.0]))
    zero_input = Controller("Lqr", spec, gain=np.zeros((1, 1)))
    for x0 in (0.3, -4.0, 7.5):
        traj = simulate(zero_input, spec, [x0])
        assert normalized_cost(traj, spec) == pytest.approx(2.0, abs=1e-14)


def test_oracle_matches_open_loop_optimum(spec2d):
    traj = simulate(Controller("MpcOracle", spec2d), spec2d, [1.0, 0.0])
    sol = solve_mpc(spec2d, [1.0, 0.0], Controller("MpcOracle", spec2d).settings)
    assert traj.cost == pytest.approx(sol.j_star, abs=1e-6)
    assert np.allclose(traj.states, sol.x_seq, atol=1e-8)


def test_trajectory_obeys_dynamics(spec2d, starts2d):
    traj = simulate(Controller("MpcReceding", spec2d), spec2d, starts2d[0])
    for k in range(spec2d.horizon):
        assert np.allclose(traj.states[k + 1], spec2d.sys.step(traj.states[k], traj.inputs[k]), atol=0)
    assert traj.cost == trajectory_cost(spec2d, traj.states, traj.inputs)


def test_lqr_is_clipped_to_inputs(spec2d):
    ctrl = Controller("Lqr", spec2d)
    gain = lqr_gain(spec2d.sys, spec2d.q_mat, spec2d.r_mat)
    for x in ([4.0, 4.0], [-4.5, 1.0], [0.3, -0.2]):
        assert ctrl(x) == pytest.approx(np.clip(-gain @ x, -2, 2), abs=1e-12)


def test_projection_controller_never_violates(spec2d, pspec2d, starts2d):
    net = Mlp.init((2, 8, 1), seed=1)
    net.weights[-1] *= 30.0
    ctrl = Controller("ProjectionNN", spec2d, net=net, pspec=pspec2d)
    for x0 in starts2d:
        assert simulate(ctrl, spec2d, x0).violations == 0


def test_violations_are_counted_not_fatal(spec2d):
    net = Mlp((2, 1), [np.zeros((1, 2))], [np.array([5.0])])
    traj = simulate(Controller("BBNN", spec2d, net=net), spec2d, [4.0, 4.0])
    assert traj.violations > 0
    assert not traj.input_ok.any()
    assert traj.states.shape == (4, 2)


def test_controller_failure_outside_feasible_region(spec2d):
    with pytest.raises(ControllerFailure):
        simulate(Controller("MpcReceding", spec2d), spec2d, [5.0, 5.0])
    with pytest.raises(ControllerFailure):
        simulate(Controller("MpcOracle", spec2d), spec2d, [5.0, 5.0])


def test_controller_requires_payload(spec2d):
    with pytest.raises(ValueError):
        Controller("BBNN", spec2d)
    with pytest.raises(ValueError):
        Controller("ProjectionNN", spec2d, net=Mlp.init((2, 1)))


def test_oracle_lower_bounds_every_controller(spec2d, pspec2d, starts2d):
    net = Mlp.init((2, 8, 1), seed=2)
    ctrls = [Controller("MpcOracle", spec2d), Controller("MpcReceding", spec2d), Controller("Lqr", spec2d),
             Controller("BBNN", spec2d, net=net), Controller("ProjectionNN", spec2d, net=net, pspec=pspec2d)]
    rows = cost_comparison(spec2d, ctrls, starts2d)
    for i in range(len(starts2d)):
        per = {r[1]: r[2] for r in rows if r[0] == i}
        assert all(per["MpcOracle"] <= v + 1e-6 for v in per.values())


# --- tables --------------------------------------------------------------------------

def test_single_size_curve_has_one_row_per_arch(spec2d, cinf2d):
    rows = nmse_curve(spec2d, cinf2d, [40], ["BBNN", "ProjectionNN"], [5], SMALL)
    assert [(r[0], r[1], r[2]) for r in rows] == [(40, "BBNN", 5), (40, "ProjectionNN", 5)]
    assert all(np.isfinite(r[3]) for r in rows)


def test_curve_rejects_descending_sizes(spec2d, cinf2d):
    with pytest.raises(ValueError):
        nmse_curve(spec2d, cinf2d, [50, 20], ["BBNN"], [0], SMALL)
    with pytest.raises(ValueError):
        nmse_curve(spec2d, cinf2d, [20, 50], ["BBNN"], [0], SMALL, pool_size=40)


def test_curve_slice_with_full_pool_matches_full_curve(spec2d, cinf2d):
    full = nmse_curve(spec2d, cinf2d, [20, 40], ["BBNN"], [3], SMALL)
    part = nmse_curve(spec2d, cinf2d, [20], ["BBNN"], [3], SMALL, pool_size=40)
    assert part == full[:1]


def test_curve_is_deterministic(spec2d, cinf2d):
    a = nmse_curve(spec2d, cinf2d, [20, 40], [Arch.PROJECTION], [1, 2], SMALL)
    b = nmse_curve(spec2d, cinf2d, [20, 40], [Arch.PROJECTION], [1, 2], SMALL)
    assert a == b
    assert len(a) == 4


def test_cost_table_and_summary(spec2d, pspec2d, starts2d, tmp_path):
    net = Mlp.init((2, 8, 1), seed=3)
    ctrls = [Controller("MpcOracle", spec2d), Controller("BBNN", spec2d, net=net)]
    rows = cost_comparison(spec2d, ctrls, starts2d[:5])
    assert rows == cost_comparison(spec2d, ctrls, starts2d[:5])
    assert [r[1] for r in rows[:2]] == ["MpcOracle", "BBNN"]
    summary = cost_summary(rows)
    oracle = [r[2] for r in rows if r[1] == "MpcOracle"]
    assert summary[0][0] == "MpcOracle"
    assert summary[0][1] == pytest.approx(np.mean(oracle))
    assert summary[0][2] == pytest.approx(np.median(oracle))
    path = tmp_path / "cost.csv"
    write_csv(path, ("traj_id", "controller", "j_n", "violations"), rows)
    back = read_csv(path)
    assert back[0] == ["traj_id", "controller", "j_n", "violations"]
    assert [float(r[2]) for r in back[1:]] == [r[2] for r in rows]


def test_trajectory_starts_are_in_cinf_and_seeded(cinf2d):
    a = trajectory_starts(cinf2d, 25, seed=4)
    assert np.array_equal(a, trajectory_starts(cinf2d, 25, seed=4))
    assert not np.array_equal(a, trajectory_starts(cinf2d, 25, seed=5))
    assert np.all(cinf2d.contains(a, 1e-9))
