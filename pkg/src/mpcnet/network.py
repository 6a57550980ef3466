"""ReLU multilayer perceptrons, manual backpropagation, and the projection layer.

Two architectures share the same MLP body:

* ``BBNN`` — the plain network ``u = n(x)``.
* ``ProjectionNN`` — the network output is projected onto the inputs that
  are admissible at ``x`` and keep the successor state inside the control
  invariant set, ``{u : u ∈ U, A x + B u ∈ C∞}``. The projection is part of
  the training graph; its Jacobians come from the active-set KKT system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateActiveSet,
    DimensionMismatch,
    FormatError,
    InfeasibleProjection,
    NonFiniteLoss,
)
from .numerics import Prng
from .optimize import INF, QpProblem, SolverSettings, qp_solve
from .polytope import Polytope

log = logging.getLogger(__name__)

FEAS_TOL = 1e-9
ACTIVE_TOL = 1e-6
MAX_INFEASIBILITY = 1e-6
CHECKPOINT_TAG = "mpcnet-network/1"


class Arch(str, Enum):
    BBNN = "BBNN"
    PROJECTION = "ProjectionNN"


# --- MLP -----------------------------------------------------------------

@dataclass
class Mlp:
    widths: tuple
    weights: list  # weights[l] has shape (widths[l+1], widths[l])
    biases: list

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise DimensionMismatch("layer count does not match widths")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[l + 1], self.widths[l]) or b.shape != (self.widths[l + 1],):
                raise DimensionMismatch(f"layer {l} has inconsistent shapes")

    @classmethod
    def init(cls, widths, seed: int = 0) -> "Mlp":
        """Uniform initialization in ``±sqrt(1/fan_in)``."""
        prng = Prng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(1.0 / fan_in)
            weights.append(bound * (2.0 * prng.uniform(fan_out * fan_in) - 1.0).reshape(fan_out, fan_in))
            biases.append(bound * (2.0 * prng.uniform(fan_out) - 1.0))
        return cls(tuple(widths), weights, biases)

    @classmethod
    def zeros(cls, widths) -> "Mlp":
        return cls(tuple(widths),
                   [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
                   [np.zeros(o) for o in widths[1:]])

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        return Mlp(self.widths, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def __call__(self, x):
        return forward(self, x)[0]


class Cache(NamedTuple):
    inputs: list  # input to each layer, (B, width_in)
    pre: list  # pre-activation of each layer, (B, width_out)
    single: bool


def forward(net: Mlp, x):
    """Affine + ReLU stack with a linear output layer.

    ``x`` may be one state or a ``(B, n)`` batch; the output matches.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != net.widths[0]:
        raise DimensionMismatch(f"input has dimension {h.shape[1]}, network expects {net.widths[0]}")
    inputs, pre = [], []
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = z if l == last else np.maximum(z, 0.0)
    out = h[0] if single else h
    return out, Cache(inputs, pre, single)


class Gradients(NamedTuple):
    weights: list
    biases: list
    inputs: np.ndarray


def backward(net: Mlp, cache: Cache, grad_out) -> Gradients:
    """Reverse-mode gradients; ``ReLU'(0)`` is taken as 0.

    Parameter gradients are summed over the batch.
    """
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    gw = [None] * net.n_layers
    gb = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        if l != net.n_layers - 1:
            g = g * (cache.pre[l] > 0)
        gw[l] = g.T @ cache.inputs[l]
        gb[l] = g.sum(axis=0)
        g = g @ net.weights[l]
    return Gradients(gw, gb, g[0] if cache.single else g)


def input_jacobian(net: Mlp, x):
    """``∂n(x)/∂x`` for a single state, shape ``(m, n)``."""
    _, cache = forward(net, np.asarray(x, dtype=float).reshape(1, -1))
    jac = net.weights[0]
    for l in range(1, net.n_layers):
        active = (cache.pre[l - 1][0] > 0).astype(float)
        jac = net.weights[l] @ (active[:, None] * jac)
    return jac


# --- projection layer ----------------------------------------------------

@dataclass(frozen=True)
class ProjectionSpec:
    """Feasible inputs at ``x``: ``{u : g_mat u <= h0_vec - h_x_mat x}``."""

    g_mat: np.ndarray
    h0_vec: np.ndarray
    h_x_mat: np.ndarray

    @classmethod
    def from_sets(cls, sys, u_set: Polytope, cinf: Polytope) -> "ProjectionSpec":
        a_sys = np.asarray(sys.a_mat, dtype=float)
        b_sys = np.asarray(sys.b_mat, dtype=float).reshape(a_sys.shape[0], -1)
        g = np.vstack([u_set.a_mat, cinf.a_mat @ b_sys])
        h0 = np.concatenate([u_set.b_vec, cinf.b_vec])
        hx = np.vstack([np.zeros((u_set.n_rows, a_sys.shape[0])), cinf.a_mat @ a_sys])
        # rows with no input dependence are pure state conditions; they hold
        # on C∞ by invariance and would only add degenerate activity
        keep = np.linalg.norm(g, axis=1) > 1e-12
        return cls(g[keep], h0[keep], hx[keep])

    @property
    def m(self) -> int:
        return self.g_mat.shape[1]

    @property
    def n(self) -> int:
        return self.h_x_mat.shape[1]

    def rhs(self, x):
        x = np.asarray(x, dtype=float)
        return self.h0_vec - x @ self.h_x_mat.T


class Projection(NamedTuple):
    u: np.ndarray
    active_rows: tuple


def _feasible(g, h, u, tol):
    return np.all(g @ u <= h + tol * (1.0 + np.abs(h)))


def _violation(g, h, u):
    return float(np.max(g @ u - h, initial=-np.inf))


def _project_enum(g, h, u_hat):
    """Exact projection onto ``{u : g u <= h}`` for one or two inputs.

    The projection lies in the relative interior of a face; for ``m <= 2``
    the faces are the set itself, facets (one tight row), and vertices (two
    tight rows), so the closest admissible candidate among these is the
    projection.
    """
    m = g.shape[1]
    scale = 1.0 + np.abs(h)
    viol = g @ u_hat - h
    if np.all(viol <= FEAS_TOL * scale):
        return u_hat.copy(), ()
    sq = np.einsum("ij,ij->i", g, g)
    best, best_d, best_face = None, np.inf, ()
    for r in np.flatnonzero(viol > 0):
        p = u_hat - viol[r] / sq[r] * g[r]
        if _feasible(g, h, p, FEAS_TOL):
            d = np.sum((p - u_hat) ** 2)
            if d < best_d:
                best, best_d, best_face = p, d, (int(r),)
    if best is not None or m == 1:
        return best, best_face
    rows = g.shape[0]
    i_idx, j_idx = np.triu_indices(rows, k=1)
    g1, g2 = g[i_idx], g[j_idx]
    det = g1[:, 0] * g2[:, 1] - g1[:, 1] * g2[:, 0]
    ok = np.abs(det) > 1e-12 * np.sqrt(sq[i_idx] * sq[j_idx])
    i_idx, j_idx, g1, g2, det = i_idx[ok], j_idx[ok], g1[ok], g2[ok], det[ok]
    h1, h2 = h[i_idx], h[j_idx]
    verts = np.stack([(h1 * g2[:, 1] - h2 * g1[:, 1]) / det, (g1[:, 0] * h2 - g2[:, 0] * h1) / det], axis=1)
    feas = np.all(verts @ g.T <= h + FEAS_TOL * scale, axis=1)
    # multipliers from  u_hat - v = λ_i g_i + λ_j g_j
    diff = u_hat - verts
    lam_i = (diff[:, 0] * g2[:, 1] - diff[:, 1] * g2[:, 0]) / det
    lam_j = (g1[:, 0] * diff[:, 1] - g1[:, 1] * diff[:, 0]) / det
    cand = feas & (lam_i >= -ACTIVE_TOL) & (lam_j >= -ACTIVE_TOL)
    if not np.any(cand):
        cand = feas
    if not np.any(cand):
        return None, ()
    dist = np.sum(diff**2, axis=1)
    dist[~cand] = np.inf
    k = int(np.argmin(dist))
    return verts[k], (int(i_idx[k]), int(j_idx[k]))


def _project_qp(g, h, u_hat, settings=None):
    m = g.shape[1]
    prob = QpProblem(np.eye(m), -u_hat, g, np.full(g.shape[0], -INF), h)
    sol = qp_solve(prob, settings or SolverSettings(eps_abs=1e-10, eps_rel=1e-10))
    if not sol.solved:
        return None, ()
    return sol.z_star, ()


def _least_violation_point(g, h):
    """Minimizer of the worst constraint violation (LP), for near-empty sets."""
    from scipy.optimize import linprog

    m = g.shape[1]
    c = np.zeros(m + 1)
    c[-1] = 1.0
    a_ub = np.hstack([g, -np.ones((g.shape[0], 1))])
    res = linprog(c, A_ub=a_ub, b_ub=h, bounds=[(None, None)] * m + [(None, None)], method="highs")
    return res.x[:m], float(res.x[-1])


def project_feasible(pspec: ProjectionSpec, x, u_hat, method: str = "auto") -> Projection:
    """Euclidean projection of ``u_hat`` onto the admissible inputs at ``x``.

    ``method`` is ``"enum"`` (exact face enumeration, one or two inputs),
    ``"qp"`` (the general QP solver) or ``"auto"``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    u_hat = np.asarray(u_hat, dtype=float).reshape(-1)
    g, h = pspec.g_mat, pspec.rhs(x)
    if method == "auto":
        method = "enum" if pspec.m <= 2 else "qp"
    u, face = (_project_enum if method == "enum" else _project_qp)(g, h, u_hat)
    if u is None:
        # round-off can leave x a hair outside C∞; accept the least-violating point
        u, worst = _least_violation_point(g, h)
        if worst > MAX_INFEASIBILITY:
            raise InfeasibleProjection(f"no admissible input at x={x.tolist()} (violation {worst:.3e})")
        return Projection(u, tuple(np.flatnonzero(g @ u - h >= -FEAS_TOL * (1 + np.abs(h))).tolist()))
    slack = h - g @ u
    tight = np.flatnonzero(slack <= FEAS_TOL * (1.0 + np.abs(h)))
    active = tuple(sorted(set(face) | set(tight.tolist()))) if face or len(tight) else ()
    if not face and np.allclose(u, u_hat):
        active = ()
    return Projection(u, active)


def _nullspace_projector(g_act, m):
    """``I - Gᵀ(G Gᵀ)⁻¹ G`` and ``Gᵀ(G Gᵀ)⁻¹`` for full-row-rank ``G``."""
    gram = g_act @ g_act.T
    pinv = g_act.T @ np.linalg.inv(gram)
    return np.eye(m) - pinv @ g_act, pinv


def projection_jacobians(pspec: ProjectionSpec, x, u_hat, proj: Projection | None = None):
    """``(∂u/∂u_hat, ∂u/∂x)`` of the projection at a non-degenerate point."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u_hat = np.asarray(u_hat, dtype=float).reshape(-1)
    proj = proj or project_feasible(pspec, x, u_hat)
    m, n = pspec.m, pspec.n
    rows = list(proj.active_rows)
    if not rows:
        return np.eye(m), np.zeros((m, n))
    g_act = pspec.g_mat[rows]
    if len(rows) > m or np.linalg.matrix_rank(g_act) < len(rows):
        raise DegenerateActiveSet(f"active rows {rows} are linearly dependent")
    null, pinv = _nullspace_projector(g_act, m)
    lam = np.linalg.lstsq(g_act.T, u_hat - proj.u, rcond=None)[0]
    if np.any(lam <= ACTIVE_TOL):
        raise DegenerateActiveSet(f"weakly active rows {[r for r, l in zip(rows, lam) if l <= ACTIVE_TOL]}")
    return null, -pinv @ pspec.h_x_mat[rows]


def project_batch(pspec: ProjectionSpec, states, u_hats):
    """Project a batch; returns ``(U, jac_uhat)`` with per-sample ``∂u/∂u_hat``.

    The Jacobian uses the face found by the projection, which is the
    subgradient convention at the (measure-zero) degenerate points.
    """
    b = states.shape[0]
    m = pspec.m
    h_all = pspec.rhs(states)
    viol = np.einsum("ij,bj->bi", pspec.g_mat, u_hats) - h_all
    inside = np.all(viol <= FEAS_TOL * (1.0 + np.abs(h_all)), axis=1)
    out = u_hats.copy()
    jac = np.broadcast_to(np.eye(m), (b, m, m)).copy()
    for k in np.flatnonzero(~inside):
        proj = project_feasible(pspec, states[k], u_hats[k])
        out[k] = proj.u
        rows = list(proj.active_rows)
        if rows:
            g_act = pspec.g_mat[rows]
            if len(rows) >= m or np.linalg.matrix_rank(g_act) < len(rows):
                jac[k] = 0.0
            else:
                jac[k] = _nullspace_projector(g_act, m)[0]
    return out, jac


# --- training ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    project_during_training: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class TrainResult:
    net: Mlp
    loss_history: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else float("nan")


def predict(arch: Arch, net: Mlp, pspec: ProjectionSpec | None, states):
    """Network output (after projection for ``ProjectionNN``) for a batch."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    u_hat = forward(net, states)[0]
    if Arch(arch) is Arch.PROJECTION:
        return project_batch(pspec, states, u_hat)[0]
    return u_hat


def train(net: Mlp, states, targets, cfg: TrainConfig | None = None, arch=Arch.BBNN,
          pspec: ProjectionSpec | None = None) -> TrainResult:
    """Minibatch Adam on the mean squared error.

    For ``ProjectionNN`` with ``project_during_training`` the loss is taken
    after the projection and gradients flow through it.
    """
    cfg = cfg or TrainConfig()
    arch = Arch(arch)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(states.shape[0], -1)
    if targets.shape[1] != net.widths[-1]:
        raise DimensionMismatch(f"targets have dimension {targets.shape[1]}, network outputs {net.widths[-1]}")
    project = arch is Arch.PROJECTION and cfg.project_during_training
    if arch is Arch.PROJECTION:
        if pspec is None:
            raise ValueError("ProjectionNN needs a ProjectionSpec")
        if pspec.m != targets.shape[1]:
            raise DimensionMismatch("ProjectionNN targets must be the first input only")
    net = net.copy()
    params = net.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    prng = Prng(cfg.seed)
    count = states.shape[0]
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.argsort(prng.uniform(count), kind="stable")
        total = 0.0
        for start in range(0, count, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = states[idx], targets[idx]
            u_hat, cache = forward(net, xb)
            if project:
                u, jac = project_batch(pspec, xb, u_hat)
            else:
                u = u_hat
            err = u - yb
            loss = float(np.mean(err**2))
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch}", batch_index=start // cfg.batch_size)
            total += loss * len(idx)
            grad = 2.0 * err / err.size
            if project:
                grad = np.einsum("bij,bi->bj", jac, grad)
            grads = backward(net, cache, grad)
            step += 1
            lr_t = cfg.learning_rate * np.sqrt(1.0 - cfg.beta2**step) / (1.0 - cfg.beta1**step)
            for p, g, a, v in zip(params, [*grads.weights, *grads.biases], m1, m2):
                a *= cfg.beta1
                a += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                p -= lr_t * a / (np.sqrt(v) + cfg.adam_eps)
        history.append(total / count)
    return TrainResult(net, history)


def network_gradient(arch, net: Mlp, pspec: ProjectionSpec | None, x):
    """``∂(output)/∂x`` including the projection for ``ProjectionNN``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    jac = input_jacobian(net, x)
    if Arch(arch) is Arch.BBNN:
        return jac
    u_hat = forward(net, x)[0]
    du_duhat, du_dx = projection_jacobians(pspec, x, u_hat)
    return du_duhat @ jac + du_dx


# --- checkpoints -----------------------------------------------------------

def save_network(net: Mlp, path, arch=Arch.BBNN, seed: int | None = None, extra: dict | None = None) -> None:
    lines = [f"# format: {CHECKPOINT_TAG}", f"# arch: {Arch(arch).value}",
             f"# widths: {' '.join(str(w) for w in net.widths)}"]
    if seed is not None:
        lines.append(f"# seed: {seed}")
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {v}")
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"weight {l} {w.shape[0]} {w.shape[1]}")
        lines += [" ".join(f"{v:.17g}" for v in row) for row in w]
        lines.append(f"bias {l} {b.size}")
        lines.append(" ".join(f"{v:.17g}" for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_network(path):
    """Returns ``(net, arch, header)``."""
    lines = Path(path).read_text().splitlines()
    header = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].partition(":")
        header[key.strip()] = value.strip()
        i += 1
    if header.get("format") != CHECKPOINT_TAG:
        raise FormatError("missing or unknown checkpoint format tag", line=1)
    try:
        widths = tuple(int(t) for t in header["widths"].split())
        arch = Arch(header.get("arch", Arch.BBNN.value))
    except (KeyError, ValueError):
        raise FormatError("bad widths/arch header", line=1) from None
    weights, biases = [], []

    def numbers(line_no, expected):
        if line_no >= len(lines):
            raise FormatError("unexpected end of file", line=line_no + 1)
        try:
            vals = [float(t) for t in lines[line_no].split()]
        except ValueError:
            raise FormatError("non-numeric value", line=line_no + 1) from None
        if len(vals) != expected:
            raise FormatError(f"expected {expected} values", line=line_no + 1)
        return vals

    for l in range(len(widths) - 1):
        rows, cols = widths[l + 1], widths[l]
        if i >= len(lines) or lines[i].split()[:2] != ["weight", str(l)]:
            raise FormatError(f"expected 'weight {l}' block", line=i + 1)
        i += 1
        weights.append(np.array([numbers(i + r, cols) for r in range(rows)]))
        i += rows
        if i >= len(lines) or lines[i].split()[:2] != ["bias", str(l)]:
            raise FormatError(f"expected 'bias {l}' block", line=i + 1)
        biases.append(np.array(numbers(i + 1, rows)))
        i += 2
    return Mlp(widths, weights, biases), arch, header
