"""Supervised (state, optimal input) pairs sampled from the invariant set.

File format (plain text)::

    # format: mpcnet-dataset/1
    # key: value            (one metadata line per key)
    x_1 ... x_n  t_1 ... t_k
    ...

Values are written with 17 significant digits, which round-trips doubles.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationStalled, InfeasibleState, MetadataMismatch, NoConvergence
from .mpc import MpcSpec, solve_mpc
from .optimize import SolverSettings
from .polytope import Polytope
from .sampler import HitAndRunConfig, hit_and_run

log = logging.getLogger(__name__)

FORMAT_TAG = "mpcnet-dataset/1"
MAX_SKIP_RATE = 0.10
MAX_REFILL_ROUNDS = 5


class TargetMode(str, Enum):
    FIRST_INPUT = "FirstInput"
    FULL_SEQUENCE = "FullSequence"


@dataclass
class Dataset:
    states: np.ndarray
    targets: np.ndarray
    target_mode: TargetMode = TargetMode.FIRST_INPUT
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(self.states.shape[0], -1)
        self.target_mode = TargetMode(self.target_mode)
        if self.states.shape[0] == 0:
            raise ValueError("a dataset needs at least one pair")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def target_dim(self) -> int:
        return self.targets.shape[1]

    def head(self, n: int) -> "Dataset":
        meta = dict(self.metadata, count=str(n))
        return Dataset(self.states[:n], self.targets[:n], self.target_mode, meta)

    def require(self, **expected) -> None:
        """Raise :class:`MetadataMismatch` unless every ``key=value`` matches."""
        for key, value in expected.items():
            have = self.metadata.get(key)
            if have is None or str(have) != str(value):
                raise MetadataMismatch(f"dataset {key}={have!r}, experiment expects {value!r}")

    def bind(self, spec: MpcSpec, settings: SolverSettings | None = None) -> "Dataset":
        """Check the dataset was generated for ``spec`` (and solver settings)."""
        expected = {"spec_hash": spec.digest()}
        if settings is not None:
            expected["solver_eps_abs"] = repr(settings.eps_abs)
            expected["solver_eps_rel"] = repr(settings.eps_rel)
        self.require(**expected)
        return self


def target_of(sol, mode: TargetMode):
    return sol.u_seq[0] if mode is TargetMode.FIRST_INPUT else sol.u_seq.reshape(-1)


def _label_chunk(args):
    spec, states, mode, settings = args
    targets, ok = [], []
    for x in states:
        try:
            sol = solve_mpc(spec, x, settings)
        except (InfeasibleState, NoConvergence):
            ok.append(False)
            targets.append(None)
            continue
        ok.append(True)
        targets.append(target_of(sol, mode))
    return targets, ok


def label_states(spec: MpcSpec, states, mode=TargetMode.FIRST_INPUT,
                 settings: SolverSettings | None = None, threads: int = 1):
    """Solve the MPC at each state. Returns ``(targets, ok_mask)``.

    With ``threads > 1`` the solves are spread over worker processes; the
    result order, and therefore the output, does not depend on ``threads``.
    """
    mode = TargetMode(mode)
    states = np.atleast_2d(states)
    if threads <= 1 or len(states) < 2 * threads:
        targets, ok = _label_chunk((spec, states, mode, settings))
    else:
        chunks = np.array_split(states, threads * 4)
        targets, ok = [], []
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for t, o in pool.map(_label_chunk, [(spec, c, mode, settings) for c in chunks]):
                targets += t
                ok += o
    return targets, np.array(ok, dtype=bool)


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    secs = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(secs))


def generate(spec: MpcSpec, cinf: Polytope, n: int, cfg: HitAndRunConfig | None = None,
             mode=TargetMode.FIRST_INPUT, settings: SolverSettings | None = None,
             threads: int = 1) -> Dataset:
    """Sample ``n`` states from ``cinf`` and label them with the MPC solution.

    States whose QP fails are skipped and replaced from a continuation chain.
    More than 10% failures raises :class:`GenerationStalled`.
    """
    cfg = cfg or HitAndRunConfig()
    settings = settings or SolverSettings()
    mode = TargetMode(mode)
    states = hit_and_run(cinf, n, cfg)
    targets, ok = label_states(spec, states, mode, settings, threads)
    skipped = int((~ok).sum())
    if skipped > MAX_SKIP_RATE * n:
        raise GenerationStalled(f"{skipped} of {n} states failed to solve")
    good_x = [states[ok]]
    good_u = [np.array([t for t, o in zip(targets, ok) if o]).reshape(int(ok.sum()), -1)]
    have = int(ok.sum())
    refill = 0
    while have < n:
        refill += 1
        if refill > MAX_REFILL_ROUNDS:
            raise GenerationStalled(f"could not replace {n - have} failed states")
        extra = hit_and_run(cinf, n - have, cfg.with_seed(cfg.seed + refill))
        t, o = label_states(spec, extra, mode, settings, threads)
        good_x.append(extra[o])
        good_u.append(np.array([ti for ti, oi in zip(t, o) if oi]).reshape(int(o.sum()), -1))
        skipped += int((~o).sum())
        have += int(o.sum())
    if skipped:
        log.warning("skipped %d states whose MPC problem failed", skipped)
    meta = {
        "spec_name": spec.name,
        "spec_hash": spec.digest(),
        "target_mode": mode.value,
        "sampler_seed": str(cfg.seed),
        "sampler_burn_in": str(cfg.burn_in),
        "sampler_thinning": str(cfg.thinning),
        "solver_eps_abs": repr(settings.eps_abs),
        "solver_eps_rel": repr(settings.eps_rel),
        "skipped": str(skipped),
        "count": str(n),
        "generated": _timestamp(),
    }
    return Dataset(np.vstack(good_x)[:n], np.vstack(good_u)[:n], mode, meta)


def save(ds: Dataset, path) -> None:
    meta = dict(ds.metadata)
    meta["target_mode"] = ds.target_mode.value
    meta["state_dim"] = str(ds.state_dim)
    meta["target_dim"] = str(ds.target_dim)
    meta["count"] = str(len(ds))
    lines = [f"# format: {FORMAT_TAG}"]
    lines += [f"# {k}: {v}" for k, v in meta.items()]
    data = np.hstack([ds.states, ds.targets])
    lines += [" ".join(f"{v:.17g}" for v in row) for row in data]
    Path(path).write_text("\n".join(lines) + "\n")


def load(path, expect: dict | None = None) -> Dataset:
    """Read a dataset file; ``expect`` is forwarded to :meth:`Dataset.require`."""
    lines = Path(path).read_text().splitlines()
    meta = {}
    body_start = 0
    for i, line in enumerate(lines):
        if not line.startswith("#"):
            body_start = i
            break
        key, sep, value = line[1:].partition(":")
        if not sep:
            raise FormatError("metadata line must be '# key: value'", line=i + 1)
        meta[key.strip()] = value.strip()
    else:
        body_start = len(lines)
    if meta.pop("format", None) != FORMAT_TAG:
        raise FormatError("missing or unknown format tag", line=1)
    try:
        n_x = int(meta["state_dim"])
        n_t = int(meta["target_dim"])
        count = int(meta["count"])
    except (KeyError, ValueError):
        raise FormatError("header lacks state_dim/target_dim/count", line=body_start) from None
    body = lines[body_start:]
    if len(body) != count:
        raise FormatError(f"expected {count} data rows, found {len(body)}", line=len(lines))
    data = np.empty((count, n_x + n_t))
    for j, line in enumerate(body):
        parts = line.split()
        if len(parts) != n_x + n_t:
            raise FormatError(f"expected {n_x + n_t} values", line=body_start + j + 1)
        try:
            data[j] = [float(p) for p in parts]
        except ValueError:
            raise FormatError("non-numeric value", line=body_start + j + 1) from None
    mode = TargetMode(meta.get("target_mode", TargetMode.FIRST_INPUT.value))
    ds = Dataset(data[:, :n_x], data[:, n_x:], mode, meta)
    if expect:
        ds.require(**expect)
    return ds
