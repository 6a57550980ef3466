import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpcnet.errors import DegenerateActiveSet, DimensionMismatch, FormatError, NonFiniteLoss
from mpcnet.mpc import lqr_gain
from mpcnet.network import (
    Arch,
    Mlp,
    ProjectionSpec,
    TrainConfig,
    backward,
    forward,
    input_jacobian,
    load_network,
    network_gradient,
    predict,
    project_batch,
    project_feasible,
    projection_jacobians,
    save_network,
    train,
)
from mpcnet.numerics import Prng


@pytest.fixture(scope="module")
def pspec2d(spec2d, cinf2d):
    return ProjectionSpec.from_sets(spec2d.sys, spec2d.u_set, cinf2d)


@pytest.fixture(scope="module")
def pspec4d(spec4d, cinf4d):
    return ProjectionSpec.from_sets(spec4d.sys, spec4d.u_set, cinf4d)


def _states_in(cinf, count, seed):
    from mpcnet.sampler import HitAndRunConfig, hit_and_run

    return hit_and_run(cinf, count, HitAndRunConfig(seed=seed, burn_in=200, thinning=2))


def _loop_reference(net, x):
    """Neuron-by-neuron evaluation with plain Python floats."""
    h = [float(v) for v in x]
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for i in range(w.shape[0]):
            z = float(b[i])
            for j in range(w.shape[1]):
                z += float(w[i, j]) * h[j]
            out.append(z if l == net.n_layers - 1 else max(z, 0.0))
        h = out
    return np.array(h)


# --- forward / backward ------------------------------------------------------

def test_zero_network_outputs_zero(rng):
    net = Mlp.zeros((3, 5, 2))
    assert np.array_equal(net(rng.normal(size=3)), np.zeros(2))
    assert np.array_equal(net(rng.normal(size=(7, 3))), np.zeros((7, 2)))


def test_single_identity_layer_is_identity(rng):
    net = Mlp((3, 3), [np.eye(3)], [np.zeros(3)])
    x = rng.normal(size=3)
    assert np.array_equal(net(x), x)


def test_forward_matches_loop_reference():
    net = Mlp.init((2, 16, 1), seed=42)
    x = np.array([1.0, -1.0])
    assert np.allclose(net(x), _loop_reference(net, x), rtol=0, atol=1e-12)


def test_batch_forward_matches_single(rng):
    net = Mlp.init((3, 8, 8, 2), seed=1)
    xs = rng.normal(size=(20, 3))
    batch = net(xs)
    for x, row in zip(xs, batch):
        assert np.allclose(net(x), row, atol=1e-14)


def test_forward_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        forward(Mlp.init((2, 4, 1)), np.zeros(3))


def test_inconsistent_shapes_rejected():
    with pytest.raises(DimensionMismatch):
        Mlp((2, 3), [np.zeros((2, 2))], [np.zeros(3)])


def test_init_is_deterministic_and_bounded():
    a, b = Mlp.init((4, 64, 2), seed=9), Mlp.init((4, 64, 2), seed=9)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    assert np.max(np.abs(a.weights[0])) <= np.sqrt(1 / 4)
    assert np.max(np.abs(a.weights[1])) <= np.sqrt(1 / 64)
    c = Mlp.init((4, 64, 2), seed=10)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_linear_net_input_gradient(rng):
    w = rng.normal(size=(2, 3))
    net = Mlp((3, 2), [w], [rng.normal(size=2)])
    g = rng.normal(size=2)
    _, cache = forward(net, rng.normal(size=3))
    assert np.allclose(backward(net, cache, g).inputs, w.T @ g, atol=1e-14)


def _loss(net, xs, ys):
    return 0.5 * float(np.sum((net(xs) - ys) ** 2))


def test_backward_matches_finite_differences(rng):
    net = Mlp.init((3, 6, 5, 2), seed=3)
    xs = rng.normal(size=(4, 3))
    ys = rng.normal(size=(4, 2))
    out, cache = forward(net, xs)
    grads = backward(net, cache, out - ys)
    h = 1e-6
    for p, g in zip(net.params(), [*grads.weights, *grads.biases]):
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = _loss(net, xs, ys)
            p[idx] = keep - h
            down = _loss(net, xs, ys)
            p[idx] = keep
            fd = (up - down) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-5 * max(1.0, abs(fd))
    # input gradient
    for b in range(xs.shape[0]):
        for j in range(3):
            e = np.zeros_like(xs)
            e[b, j] = h
            fd = (_loss(net, xs + e, ys) - _loss(net, xs - e, ys)) / (2 * h)
            assert abs(fd - grads.inputs[b, j]) <= 1e-5 * max(1.0, abs(fd))


def test_dead_relu_gets_zero_gradient(rng):
    net = Mlp.init((2, 4, 1), seed=5)
    net.biases[0][2] = -1e3  # unit 2 is never active
    xs = rng.normal(size=(10, 2))
    out, cache = forward(net, xs)
    grads = backward(net, cache, np.ones_like(out))
    assert np.all(grads.weights[0][2] == 0.0)
    assert grads.biases[0][2] == 0.0


def test_input_jacobian_matches_finite_differences(rng):
    net = Mlp.init((4, 16, 16, 2), seed=8)
    for _ in range(10):
        x = rng.normal(size=4)
        h = 1e-6
        fd = np.column_stack([(net(x + h * e) - net(x - h * e)) / (2 * h) for e in np.eye(4)])
        assert np.allclose(input_jacobian(net, x), fd, atol=1e-6)


# --- projection ----------------------------------------------------------------

def test_projection_examples(pspec2d):
    proj = project_feasible(pspec2d, [0.0, 0.0], [0.0])
    assert np.allclose(proj.u, 0.0) and proj.active_rows == ()
    proj = project_feasible(pspec2d, [0.0, 0.0], [3.0])
    assert np.allclose(proj.u, 2.0, atol=1e-12)
    du_duhat, du_dx = projection_jacobians(pspec2d, [0.0, 0.0], [3.0], proj)
    assert np.allclose(du_duhat, 0.0) and np.allclose(du_dx, 0.0)


def test_interior_projection_jacobians_are_identity_and_zero(pspec2d):
    du_duhat, du_dx = projection_jacobians(pspec2d, [0.5, 0.0], [0.1])
    assert np.array_equal(du_duhat, np.eye(1))
    assert np.array_equal(du_dx, np.zeros((1, 2)))


def _invariance_facet_point(spec, cinf, pspec):
    """A state where an invariance row (not the input bound) is the binding one."""
    # along x = (t, t) the speed bound 5 is reached quickly, so A x + B u ∈ C∞ binds before |u| <= 2
    n_u = spec.u_set.n_rows
    for t in np.linspace(0.5, 3.0, 26):
        x = np.array([t, t])
        if not cinf.contains(x, 0):
            continue
        proj = project_feasible(pspec, x, [5.0])
        if proj.active_rows and all(r >= n_u for r in proj.active_rows):
            return x, proj
    raise AssertionError("no invariance-facet case found")


def test_projection_onto_invariance_facet(spec2d, cinf2d, pspec2d):
    x, proj = _invariance_facet_point(spec2d, cinf2d, pspec2d)
    x_next = spec2d.sys.step(x, proj.u)
    assert cinf2d.contains(x_next, 1e-7)
    assert spec2d.u_set.contains(proj.u, 1e-8)
    # central differences in both arguments
    du_duhat, du_dx = projection_jacobians(pspec2d, x, [5.0], proj)
    h = 1e-5
    fd_u = (project_feasible(pspec2d, x, [5.0 + h]).u - project_feasible(pspec2d, x, [5.0 - h]).u) / (2 * h)
    fd_x = np.column_stack([
        (project_feasible(pspec2d, x + h * e, [5.0]).u - project_feasible(pspec2d, x - h * e, [5.0]).u) / (2 * h)
        for e in np.eye(2)
    ])
    assert np.allclose(du_duhat, fd_u.reshape(1, 1), atol=1e-4)
    assert np.allclose(du_dx, fd_x, atol=1e-4)


@pytest.mark.parametrize("dim", [2, 4])
def test_projection_feasibility_property(dim, spec2d, cinf2d, pspec2d, spec4d, cinf4d, pspec4d):
    spec, cinf, pspec = (spec2d, cinf2d, pspec2d) if dim == 2 else (spec4d, cinf4d, pspec4d)
    count = 10_000 if dim == 2 else 2_000
    xs = _states_in(cinf, count, seed=dim)
    prng = Prng(100 + dim)
    u_hats = 8.0 * prng.standard_normal(count * spec.m).reshape(count, spec.m)
    for x, u_hat in zip(xs, u_hats):
        u = project_feasible(pspec, x, u_hat).u
        assert spec.u_set.contains(u, 1e-7)
        assert cinf.contains(spec.sys.step(x, u), 1e-7)


def test_projection_idempotent_and_non_expansive(cinf2d, pspec2d, cinf4d, pspec4d):
    for cinf, pspec, m in ((cinf2d, pspec2d, 1), (cinf4d, pspec4d, 2)):
        xs = _states_in(cinf, 1000, seed=7)
        prng = Prng(8)
        a = 6.0 * prng.standard_normal(1000 * m).reshape(1000, m)
        b = 6.0 * prng.standard_normal(1000 * m).reshape(1000, m)
        for x, ua, ub in zip(xs, a, b):
            pa = project_feasible(pspec, x, ua).u
            pb = project_feasible(pspec, x, ub).u
            assert np.allclose(project_feasible(pspec, x, pa).u, pa, atol=1e-8)
            assert np.linalg.norm(pa - pb) <= np.linalg.norm(ua - ub) + 1e-9


def test_enum_agrees_with_qp(cinf4d, pspec4d):
    xs = _states_in(cinf4d, 200, seed=11)
    u_hats = 6.0 * Prng(12).standard_normal(400).reshape(200, 2)
    for x, u_hat in zip(xs, u_hats):
        ue = project_feasible(pspec4d, x, u_hat, method="enum").u
        uq = project_feasible(pspec4d, x, u_hat, method="qp").u
        assert np.allclose(ue, uq, atol=1e-6)


def test_projection_jacobians_4d_match_finite_differences(cinf4d, pspec4d):
    xs = _states_in(cinf4d, 300, seed=13)
    u_hats = 6.0 * Prng(14).standard_normal(600).reshape(300, 2)
    checked = 0
    h = 1e-5
    for x, u_hat in zip(xs, u_hats):
        proj = project_feasible(pspec4d, x, u_hat)
        try:
            du_duhat, du_dx = projection_jacobians(pspec4d, x, u_hat, proj)
        except DegenerateActiveSet:
            continue
        fd_u = np.column_stack([(project_feasible(pspec4d, x, u_hat + h * e).u
                                 - project_feasible(pspec4d, x, u_hat - h * e).u) / (2 * h) for e in np.eye(2)])
        fd_x = np.column_stack([(project_feasible(pspec4d, x + h * e, u_hat).u
                                 - project_feasible(pspec4d, x - h * e, u_hat).u) / (2 * h) for e in np.eye(4)])
        # the finite-difference stencil must stay on one face
        if project_feasible(pspec4d, x, u_hat + h).active_rows != proj.active_rows:
            continue
        assert np.allclose(du_duhat, fd_u, atol=1e-4)
        assert np.allclose(du_dx, fd_x, atol=1e-4)
        checked += 1
    assert checked > 100


def test_project_batch_matches_single(cinf2d, pspec2d):
    xs = _states_in(cinf2d, 50, seed=15)
    u_hats = 4.0 * Prng(16).standard_normal(50).reshape(50, 1)
    out, jac = project_batch(pspec2d, xs, u_hats)
    for k in range(50):
        proj = project_feasible(pspec2d, xs[k], u_hats[k])
        assert np.allclose(out[k], proj.u)
        assert jac[k, 0, 0] == (0.0 if proj.active_rows else 1.0)


# --- training ------------------------------------------------------------------

def test_linear_law_is_learned_to_round_off(spec2d):
    gain = lqr_gain(spec2d.sys, spec2d.q_mat, spec2d.r_mat)
    xs = np.random.default_rng(0).uniform(-1, 1, size=(500, 2))
    ys = -xs @ gain.T
    result = train(Mlp.init((2, 1), seed=1), xs, ys, TrainConfig(learning_rate=1e-2, epochs=200, seed=2))
    assert result.final_loss < 1e-8
    assert len(result.loss_history) == 200
    assert np.allclose(result.net.weights[0], -gain, atol=1e-6)


def test_zero_epochs_returns_initial_net(rng):
    init = Mlp.init((2, 8, 1), seed=4)
    result = train(init, rng.normal(size=(20, 2)), rng.normal(size=(20, 1)), TrainConfig(epochs=0))
    assert all(np.array_equal(p, q) for p, q in zip(init.params(), result.net.params()))
    assert result.loss_history == []


def test_training_is_deterministic(cinf2d, pspec2d, rng):
    xs = _states_in(cinf2d, 128, seed=17)
    ys = np.clip(-xs @ np.array([[0.2, 0.8]]).T, -2, 2)
    cfg = TrainConfig(epochs=5, seed=3)
    a = train(Mlp.init((2, 8, 1), seed=1), xs, ys, cfg, Arch.PROJECTION, pspec2d)
    b = train(Mlp.init((2, 8, 1), seed=1), xs, ys, cfg, Arch.PROJECTION, pspec2d)
    assert all(np.array_equal(p, q) for p, q in zip(a.net.params(), b.net.params()))
    assert a.loss_history == b.loss_history


def test_training_does_not_mutate_input(rng):
    init = Mlp.init((2, 4, 1), seed=4)
    before = [p.copy() for p in init.params()]
    train(init, rng.normal(size=(10, 2)), rng.normal(size=(10, 1)), TrainConfig(epochs=2))
    assert all(np.array_equal(p, q) for p, q in zip(before, init.params()))


def test_non_finite_loss_reports_batch():
    xs = np.ones((10, 2))
    ys = np.ones((10, 1))
    ys[7] = np.inf
    with pytest.raises(NonFiniteLoss) as info:
        train(Mlp.init((2, 1), seed=0), xs, ys, TrainConfig(epochs=1, batch_size=1, seed=0))
    assert info.value.batch_index is not None


def test_training_argument_checks(pspec2d, rng):
    xs, ys = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    with pytest.raises(DimensionMismatch):
        train(Mlp.init((2, 1)), xs, ys)
    with pytest.raises(ValueError):
        train(Mlp.init((2, 1)), xs, ys[:, :1], arch=Arch.PROJECTION)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


def test_projection_net_predictions_are_feasible(spec2d, cinf2d, pspec2d):
    xs = _states_in(cinf2d, 300, seed=19)
    net = Mlp.init((2, 8, 1), seed=2)
    net.weights[-1] *= 50.0  # wildly infeasible raw outputs
    us = predict(Arch.PROJECTION, net, pspec2d, xs)
    for x, u in zip(xs, us):
        assert spec2d.u_set.contains(u, 1e-8)
        assert cinf2d.contains(spec2d.sys.step(x, u), 1e-7)


# --- network_gradient ---------------------------------------------------------------

def test_linear_net_gradient_is_weight_matrix(rng):
    w = rng.normal(size=(1, 2))
    net = Mlp((2, 1), [w], [np.zeros(1)])
    assert np.array_equal(network_gradient(Arch.BBNN, net, None, rng.normal(size=2)), w)


def test_clamped_projection_zeroes_gradient(pspec2d):
    net = Mlp((2, 1), [np.array([[0.0, 1.0]])], [np.array([10.0])])
    grad = network_gradient(Arch.PROJECTION, net, pspec2d, np.array([0.0, 0.0]))
    assert np.array_equal(grad, np.zeros((1, 2)))


def test_network_gradient_matches_finite_differences(cinf2d, pspec2d):
    net = Mlp.init((2, 16, 16, 1), seed=21)
    net.weights[-1] *= 6.0
    xs = _states_in(cinf2d, 200, seed=22)
    h = 1e-6
    checked = 0
    for x in xs:
        try:
            grad = network_gradient(Arch.PROJECTION, net, pspec2d, x)
        except DegenerateActiveSet:
            continue
        fd = np.column_stack([(predict(Arch.PROJECTION, net, pspec2d, x + h * e)[0]
                               - predict(Arch.PROJECTION, net, pspec2d, x - h * e)[0]) / (2 * h)
                              for e in np.eye(2)])
        if np.allclose(grad, fd, atol=1e-4):
            checked += 1
        else:
            # a kink (ReLU switch or face change) inside the stencil is the only excuse
            proj = [project_feasible(pspec2d, x + s * h * e, net(x + s * h * e)).active_rows
                    for s in (-1, 1) for e in np.eye(2)]
            pre = [forward(net, x + s * h * e)[1].pre for s in (-1, 1) for e in np.eye(2)]
            signs = {tuple(np.concatenate([(p[0] > 0).ravel() for p in ps[:-1]])) for ps in pre}
            assert len(set(proj)) > 1 or len(signs) > 1
    assert checked > 150


# --- checkpoints -------------------------------------------------------------------

@given(st.integers(min_value=0, max_value=2**32))
def test_checkpoint_round_trip(tmp_path_factory, seed):
    net = Mlp.init((3, 7, 2), seed=seed)
    path = tmp_path_factory.mktemp("ckpt") / "net.txt"
    save_network(net, path, Arch.PROJECTION, seed=seed, extra={"note": "x"})
    loaded, arch, header = load_network(path)
    assert arch is Arch.PROJECTION
    assert header["seed"] == str(seed) and header["note"] == "x"
    assert all(np.array_equal(p, q) for p, q in zip(net.params(), loaded.params()))


def test_checkpoint_errors_carry_line_numbers(tmp_path):
    net = Mlp.init((2, 3, 1), seed=0)
    path = tmp_path / "net.txt"
    save_network(net, path)
    lines = path.read_text().splitlines()
    bad = list(lines)
    row = next(i for i, l in enumerate(bad) if l.startswith("weight 0")) + 2
    bad[row] = "1.0 oops"
    path.write_text("\n".join(bad) + "\n")
    with pytest.raises(FormatError) as info:
        load_network(path)
    assert info.value.line == row + 1
    path.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(FormatError):
        load_network(path)
    path.write_text("weight 0 3 2\n")
    with pytest.raises(FormatError) as info:
        load_network(path)
    assert info.value.line == 1
