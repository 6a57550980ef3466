"""Hit-and-run sampling of polytopes.

Each step draws a uniformly random direction (a normalized Gaussian
vector), intersects the line through the current point with the polytope,
and moves to a uniform point on that chord. The chain converges to the
uniform distribution on the polytope.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyChord, NotInterior
from .numerics import Prng, standard_normal
from .polytope import Polytope, chebyshev_center

INTERIOR_TOL = 1e-9
CHORD_SHRINK = 1e-12
MIN_RADIUS = 1e-9
BLOCK = 4096


@dataclass(frozen=True)
class HitAndRunConfig:
    seed: int = 0
    burn_in: int = 1000
    thinning: int = 10
    start: tuple | None = None

    def __post_init__(self):
        if self.thinning < 1:
            raise ValueError("thinning must be at least 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")

    def with_seed(self, seed: int) -> "HitAndRunConfig":
        return replace(self, seed=int(seed))


def hit_and_run(poly: Polytope, n_samples: int, cfg: HitAndRunConfig | None = None) -> np.ndarray:
    """Draw ``n_samples`` points (rows of the returned array) from ``poly``."""
    cfg = cfg or HitAndRunConfig()
    a, b = poly.a_mat, poly.b_vec
    dim = poly.dim
    if cfg.start is None:
        x, radius = chebyshev_center(poly)
        if radius <= MIN_RADIUS:
            raise NotInterior(f"polytope has no interior (Chebyshev radius {radius:.3e})")
    else:
        x = np.asarray(cfg.start, dtype=float).reshape(-1)
        if not poly.contains(x, -INTERIOR_TOL):
            raise NotInterior("start point is not strictly inside the polytope")
    x = np.array(x, dtype=float)
    slack = b - a @ x

    prng = Prng(cfg.seed)
    total = cfg.burn_in + n_samples * cfg.thinning
    out = np.empty((n_samples, dim))
    with np.errstate(divide="ignore", invalid="ignore"):
        _run_chain(a, b, x, slack, prng, cfg, total, out)
    return out


def _run_chain(a, b, x, slack, prng, cfg, total, out):
    dim = a.shape[1]
    emitted = 0
    step = 0
    while step < total:
        k = min(BLOCK, total - step)
        dirs = standard_normal(prng, k * dim).reshape(k, dim)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        unif = prng.uniform(k)
        rates = dirs @ a.T  # (k, rows)
        for j in range(k):
            rate = rates[j]
            # a_i·(x + t d) <= b_i  <=>  t * rate_i <= slack_i, and slack > 0
            ratio = slack / rate
            t_max = ratio[rate > 0].min(initial=np.inf)
            t_min = ratio[rate < 0].max(initial=-np.inf)
            if t_max == np.inf or t_min == -np.inf:
                raise EmptyChord("unbounded chord; the polytope must be bounded")
            if t_max < t_min:
                raise EmptyChord(f"degenerate chord [{t_min:.3e}, {t_max:.3e}]")
            width = t_max - t_min
            t = t_min + width * (CHORD_SHRINK + (1.0 - 2.0 * CHORD_SHRINK) * unif[j])
            x = x + t * dirs[j]
            slack = slack - t * rate
            step += 1
            if step > cfg.burn_in and (step - cfg.burn_in) % cfg.thinning == 0:
                out[emitted] = x
                emitted += 1
        # refresh slack to stop round-off from accumulating across blocks
        slack = b - a @ x
