"""Command-line experiment runner.

Every command writes its artifacts plus ``manifest.json`` (resolved
configuration, its hash, seeds, library versions, output digests) into
``--out``. On failure the command prints one line ``error: <Class>: <msg>``
to stderr, removes the files it created and exits with status 1.

Experiment configuration is an INI file; see :data:`CONFIG_TEMPLATE`.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .acquisition import acquisition_round, default_epsilon
from .benchmarks import BUILTIN_SPECS, builtin_spec
from .dataset import Dataset, TargetMode, generate, label_states
from .dataset import load as load_dataset
from .dataset import save as save_dataset
from .errors import ConfigError, MpcNetError
from .evaluation import (
    COST_HEADER,
    NMSE_HEADER,
    Controller,
    CurveSetup,
    cost_comparison,
    cost_summary,
    labeled_pool,
    nmse_curve,
    trajectory_starts,
    write_csv,
)
from .mpc import MpcSpec, load_spec, spec_to_config
from .network import Arch, Mlp, ProjectionSpec, TrainConfig, load_network, save_network, train
from .numerics import derive_seed
from .optimize import SolverSettings
from .polytope import load_polytope, max_control_invariant, save_polytope
from .sampler import HitAndRunConfig, hit_and_run

log = logging.getLogger("mpcnet")

CONFIG_TEMPLATE = """\
[experiment]
spec = double-integrator-2d   ; built-in name or path to a spec file
seed = 0
threads = 1

[sampler]
burn_in = 1000
thinning = 10

[solver]
eps_abs = 1e-6
eps_rel = 1e-6
max_iter = 20000

[dataset]
train_size = 1000
test_size = 500
target_mode = FirstInput

[network]
widths = 2 32 32 1
archs = BBNN ProjectionNN

[train]
learning_rate = 1e-3
batch_size = 64
epochs = 200
project_during_training = true

[eval]
sizes = 100 200 300 500 1000
replicates = 3
n_traj = 100

[acquire]
epsilon =              ; empty: 5% of the invariant set's Chebyshev radius
k = 50
"""

DEFAULT_WIDTHS = {"double-integrator-2d": (2, 32, 32, 1), "system-4d": (4, 64, 64, 2)}


@dataclass
class ExperimentConfig:
    spec: str = "double-integrator-2d"
    seed: int = 0
    threads: int = 1
    burn_in: int = 1000
    thinning: int = 10
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20000
    train_size: int = 1000
    test_size: int = 500
    target_mode: str = TargetMode.FIRST_INPUT.value
    widths: tuple = ()
    archs: tuple = (Arch.BBNN.value, Arch.PROJECTION.value)
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    project_during_training: bool = True
    sizes: tuple = (100, 200, 300, 500, 1000)
    replicates: int = 3
    n_traj: int = 100
    epsilon: float | None = None
    k: int = 50
    spec_base: str = field(default=".", repr=False)

    @classmethod
    def from_ini(cls, path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        parser.read(path)
        cfg = replace(base or cls(), spec_base=str(path.parent))
        known = {f for f in cls.__dataclass_fields__ if f != "spec_base"}
        values = {}
        for section in parser.sections():
            for key, raw in parser[section].items():
                if key not in known:
                    raise ConfigError(f"unknown key [{section}] {key}")
                values[key] = raw.strip()
        return cfg.updated(values)

    def updated(self, values: dict) -> "ExperimentConfig":
        out = {}
        for key, raw in values.items():
            if raw is None:
                continue
            default = getattr(self, key)
            try:
                if key == "epsilon":
                    out[key] = float(raw) if str(raw) != "" else None
                elif key in ("widths", "sizes"):
                    out[key] = tuple(int(t) for t in str(raw).split()) if isinstance(raw, str) else tuple(raw)
                elif key == "archs":
                    out[key] = tuple(Arch(t).value for t in (raw.split() if isinstance(raw, str) else raw))
                elif isinstance(default, bool):
                    out[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
                elif isinstance(default, int):
                    out[key] = int(raw)
                elif isinstance(default, float):
                    out[key] = float(raw)
                else:
                    out[key] = str(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        cfg = replace(self, **out)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.spec not in BUILTIN_SPECS and not self.spec_path().is_file():
            raise ConfigError(f"spec {self.spec!r} is neither built in nor an existing file")
        if list(self.sizes) != sorted(self.sizes) or not self.sizes:
            raise ConfigError("eval sizes must be a non-empty ascending list")
        TargetMode(self.target_mode)

    def spec_path(self) -> Path:
        path = Path(self.spec)
        return path if path.is_absolute() else Path(self.spec_base) / path

    def load_spec(self) -> MpcSpec:
        return builtin_spec(self.spec) if self.spec in BUILTIN_SPECS else load_spec(self.spec_path())

    def resolved_widths(self, spec: MpcSpec) -> tuple:
        if self.widths:
            return self.widths
        if spec.name in DEFAULT_WIDTHS:
            return DEFAULT_WIDTHS[spec.name]
        return (spec.n, 32, 32, spec.m)

    def sampler(self, seed: int) -> HitAndRunConfig:
        return HitAndRunConfig(seed=seed, burn_in=self.burn_in, thinning=self.thinning)

    def solver(self) -> SolverSettings:
        return SolverSettings(eps_abs=self.eps_abs, eps_rel=self.eps_rel, max_iter=self.max_iter)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                           seed=seed, project_during_training=self.project_during_training)

    def curve_setup(self, spec: MpcSpec) -> CurveSetup:
        return CurveSetup(widths=self.resolved_widths(spec), train=self.train_config(0),
                          sampler=self.sampler(0), solver=self.solver(), test_size=self.test_size,
                          threads=self.threads)

    def replicate_seeds(self) -> list:
        return [derive_seed(self.seed, f"replicate-{i}") for i in range(self.replicates)]

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("spec_base")
        d["epsilon"] = "" if self.epsilon is None else self.epsilon
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]


REPRODUCE = {
    "reproduce-2d": dict(spec="double-integrator-2d", train_size=1000, test_size=500, n_traj=100,
                         sizes=(100, 200, 300, 500, 1000), widths=(2, 32, 32, 1)),
    "reproduce-4d": dict(spec="system-4d", train_size=7000, test_size=500, n_traj=500,
                         sizes=(500, 1000, 2000, 4000, 7000), widths=(4, 64, 64, 2)),
}


# --- output bookkeeping --------------------------------------------------

class Outputs:
    """Tracks files a command creates so a failure can remove them."""

    def __init__(self, root):
        self.root = Path(root)
        self.created_root = not self.root.exists()
        self.files = []

    def path(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / name
        if p not in self.files:
            self.files.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.files:
            p.unlink(missing_ok=True)
        if self.created_root and self.root.exists() and not any(self.root.iterdir()):
            self.root.rmdir()

    def write_manifest(self, command: str, cfg: ExperimentConfig, seeds: dict, extra: dict | None = None):
        digests = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in self.files if p.exists()}
        manifest = {
            "command": command,
            "config": cfg.as_dict(),
            "config_hash": cfg.digest(),
            "seeds": seeds,
            "versions": {"mpcnet": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "outputs": digests,
        }
        if extra:
            manifest.update(extra)
        path = self.path("manifest.json")
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _invariant_set(spec: MpcSpec, args, out: Outputs | None = None):
    if getattr(args, "cinf", None):
        return load_polytope(args.cinf)
    inv = max_control_invariant(spec.sys, spec.x_set, spec.u_set)
    log.info("invariant set: %d rows after %d iterations", inv.polytope.n_rows, inv.iterations)
    if out is not None:
        save_polytope(inv.polytope, out.path("cinf.txt"))
    return inv.polytope


def _write_rows(path, rows) -> None:
    np.savetxt(path, np.atleast_2d(rows), fmt="%.17g")


# --- commands --------------------------------------------------------------

def cmd_invariant_set(cfg, args, out: Outputs):
    spec = cfg.load_spec()
    inv = max_control_invariant(spec.sys, spec.x_set, spec.u_set)
    save_polytope(inv.polytope, out.path("cinf.txt"))
    (out.path("spec.ini")).write_text(spec_to_config(spec))
    return {}, {"iterations": inv.iterations, "rows": inv.polytope.n_rows}


def cmd_sample(cfg, args, out: Outputs):
    spec = cfg.load_spec()
    cinf = _invariant_set(spec, args, out)
    seed = derive_seed(cfg.seed, "sample")
    _write_rows(out.path("samples.txt"), hit_and_run(cinf, args.count, cfg.sampler(seed)))
    return {"sampler": seed}, {}


def cmd_gen_data(cfg, args, out: Outputs):
    spec = cfg.load_spec()
    cinf = _invariant_set(spec, args, out)
    seed = derive_seed(cfg.seed, "train")
    ds = generate(spec, cinf, args.count or cfg.train_size, cfg.sampler(seed), cfg.target_mode,
                  cfg.solver(), cfg.threads)
    save_dataset(ds, out.path("dataset.txt"))
    return {"sampler": seed}, {"generated": ds.metadata["generated"]}


def _pspec_for(spec, args, arch, out=None):
    if Arch(arch) is not Arch.PROJECTION:
        return None
    cinf = _invariant_set(spec, args, out)
    return ProjectionSpec.from_sets(spec.sys, spec.u_set, cinf)


def cmd_train(cfg, args, out: Outputs):
    if not args.data:
        raise ConfigError("train needs --data")
    spec = cfg.load_spec()
    ds = load_dataset(args.data).bind(spec)
    arch = Arch(args.arch or cfg.archs[-1])
    widths = list(cfg.resolved_widths(spec))
    widths[0], widths[-1] = ds.state_dim, ds.target_dim
    pspec = _pspec_for(spec, args, arch, out)
    init_seed = derive_seed(cfg.seed, f"init-{arch.value}")
    batch_seed = derive_seed(cfg.seed, "batches")
    result = train(Mlp.init(widths, seed=init_seed), ds.states, ds.targets, cfg.train_config(batch_seed),
                   arch, pspec)
    save_network(result.net, out.path("net.txt"), arch, seed=cfg.seed,
                 extra={"target_mode": ds.target_mode.value, "spec_hash": spec.digest()})
    write_csv(out.path("loss.csv"), ("epoch", "mse"), list(enumerate(result.loss_history)))
    return {"init": init_seed, "batches": batch_seed}, {"final_loss": result.final_loss}


def cmd_eval_nmse(cfg, args, out: Outputs):
    spec = cfg.load_spec()
    cinf = _invariant_set(spec, args, out)
    archs = [args.arch] if args.arch else cfg.archs
    seeds = cfg.replicate_seeds()
    rows = nmse_curve(spec, cinf, cfg.sizes, archs, seeds, cfg.curve_setup(spec))
    write_csv(out.path("nmse_curve.csv"), NMSE_HEADER, rows)
    _write_plot_script(out, nmse=True, cost=False)
    return {"replicates": seeds, "test": derive_seed(seeds[0], "test")}, {}


def _controllers(spec, nets, pspec):
    ctrls = [Controller("MpcOracle", spec), Controller("MpcReceding", spec), Controller("Lqr", spec)]
    if Arch.BBNN in nets:
        ctrls.append(Controller("BBNN", spec, net=nets[Arch.BBNN]))
    if Arch.PROJECTION in nets:
        ctrls.append(Controller("ProjectionNN", spec, net=nets[Arch.PROJECTION], pspec=pspec))
    return ctrls


def _write_costs(out, spec, cinf, nets, pspec, cfg):
    starts = trajectory_starts(cinf, cfg.n_traj, cfg.seed, cfg.sampler(0))
    rows = cost_comparison(spec, _controllers(spec, nets, pspec), starts)
    write_csv(out.path("cost_comparison.csv"), COST_HEADER, rows)
    write_csv(out.path("cost_summary.csv"),
              ("controller", "mean_j_n", "median_j_n", "violations", "violating_trajectories"),
              cost_summary(rows))
    return derive_seed(cfg.seed, "trajectories")


def cmd_eval_cost(cfg, args, out: Outputs):
    spec = cfg.load_spec()
    cinf = _invariant_set(spec, args, out)
    pspec = ProjectionSpec.from_sets(spec.sys, spec.u_set, cinf)
    nets = {}
    for path in args.net or []:
        net, arch, _ = load_network(path)
        nets[arch] = net
    seeds = {}
    if not nets:
        train_seed = derive_seed(cfg.seed, "train")
        ds = generate(spec, cinf, cfg.train_size, cfg.sampler(train_seed), TargetMode.FIRST_INPUT,
                      cfg.solver(), cfg.threads)
        seeds["train"] = train_seed
        for arch in map(Arch, cfg.archs):
            init = Mlp.init(cfg.resolved_widths(spec), seed=derive_seed(cfg.seed, f"init-{arch.value}"))
            nets[arch] = train(init, ds.states, ds.targets,
                               cfg.train_config(derive_seed(cfg.seed, "batches")), arch, pspec).net
    seeds["trajectories"] = _write_costs(out, spec, cinf, nets, pspec, cfg)
    _write_plot_script(out, nmse=False, cost=True)
    return seeds, {}


def cmd_acquire(cfg, args, out: Outputs):
    if not args.net or not args.data:
        raise ConfigError("acquire needs --net and --data (anchor states)")
    spec = cfg.load_spec()
    cinf = _invariant_set(spec, args, out)
    net, arch, _ = load_network(args.net[0])
    pspec = ProjectionSpec.from_sets(spec.sys, spec.u_set, cinf)
    anchors = load_dataset(args.data).bind(spec).states
    eps = cfg.epsilon if cfg.epsilon is not None else default_epsilon(cinf)
    picked = acquisition_round(arch, net, pspec if arch is Arch.PROJECTION else None, spec, cinf, anchors,
                               eps, cfg.k)
    if len(picked) == 0:
        raise MpcNetError("no informative proposals")
    targets, ok = label_states(spec, picked, cfg.target_mode, cfg.solver(), cfg.threads)
    meta = {"spec_name": spec.name, "spec_hash": spec.digest(), "source": "acquisition",
            "epsilon": repr(float(eps)), "solver_eps_abs": repr(cfg.eps_abs), "solver_eps_rel": repr(cfg.eps_rel)}
    ds = Dataset(picked[ok], np.array([t for t, o in zip(targets, ok) if o]), cfg.target_mode, meta)
    save_dataset(ds, out.path("acquired.txt"))
    return {}, {"proposals": len(ds)}


def cmd_reproduce(cfg, args, out: Outputs):
    spec = cfg.load_spec()
    inv = max_control_invariant(spec.sys, spec.x_set, spec.u_set)
    cinf = inv.polytope
    save_polytope(cinf, out.path("cinf.txt"))
    pspec = ProjectionSpec.from_sets(spec.sys, spec.u_set, cinf)
    setup = cfg.curve_setup(spec)
    seeds = cfg.replicate_seeds()
    test_seed = derive_seed(seeds[0], "test")
    test_set = labeled_pool(spec, cinf, cfg.test_size, test_seed, setup)
    save_dataset(test_set, out.path("test_set.txt"))
    # the nets trained on the full-size set of the first replicate drive the cost study
    cost_nets = {}

    def keep(size, arch, seed, net):
        if size == cfg.train_size and seed == seeds[0]:
            cost_nets[arch] = net
            save_network(net, out.path(f"net_{arch.value}.txt"), arch, seed=seed)

    sizes = tuple(s for s in cfg.sizes if s < cfg.train_size) + (cfg.train_size,)
    rows = nmse_curve(spec, cinf, sizes, cfg.archs, seeds, setup, test_set=test_set, pspec=pspec, on_model=keep)
    write_csv(out.path("nmse_curve.csv"), NMSE_HEADER, rows)
    traj_seed = _write_costs(out, spec, cinf, cost_nets, pspec, cfg)
    _write_plot_script(out, nmse=True, cost=True)
    return ({"replicates": seeds, "test": test_seed, "trajectories": traj_seed},
            {"cinf_rows": cinf.n_rows, "cinf_iterations": inv.iterations})


def _write_plot_script(out: Outputs, nmse: bool, cost: bool) -> None:
    lines = ["set datafile separator ','", "set terminal pngcairo size 900,600"]
    if nmse:
        lines += ["set output 'nmse_curve.png'", "set logscale x", "set xlabel 'training set size'",
                  "set ylabel 'NMSE [dB]'",
                  "plot for [a in 'BBNN ProjectionNN'] 'nmse_curve.csv' skip 1 "
                  "using 1:(strcol(2) eq a ? $4 : 1/0) with points title a", "unset logscale x"]
    if cost:
        lines += ["set output 'cost_comparison.png'", "set xlabel 'trajectory'", "set ylabel 'J_n'",
                  "plot for [c in 'MpcOracle MpcReceding Lqr BBNN ProjectionNN'] 'cost_comparison.csv' skip 1 "
                  "using 1:(strcol(2) eq c ? $3 : 1/0) with points title c"]
    out.path("plots.gp").write_text("\n".join(lines) + "\n")


COMMANDS = {
    "invariant-set": cmd_invariant_set,
    "sample": cmd_sample,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-nmse": cmd_eval_nmse,
    "eval-cost": cmd_eval_cost,
    "acquire": cmd_acquire,
    "reproduce-2d": cmd_reproduce,
    "reproduce-4d": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpcnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mpcnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--spec", help="built-in spec name or spec file")
        p.add_argument("--config", help="experiment INI file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=f"results/{name}")
        p.add_argument("--threads", type=int)
        p.add_argument("--target-mode", choices=[m.value for m in TargetMode])
        p.add_argument("--arch", choices=[a.value for a in Arch])
        p.add_argument("--cinf", help="precomputed invariant set file")
        p.add_argument("--data", help="dataset file")
        p.add_argument("--net", action="append", help="network checkpoint (repeatable)")
        p.add_argument("--count", type=int, default=None, help="number of samples")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    # reproduce presets fix the benchmark setup; a config file may still tune the rest
    cfg = ExperimentConfig().updated(REPRODUCE.get(args.command, {}))
    if args.config:
        cfg = ExperimentConfig.from_ini(args.config, base=cfg)
    overrides = {}
    overrides.update({"spec": args.spec, "seed": args.seed, "threads": args.threads,
                      "target_mode": args.target_mode})
    return cfg.updated({k: v for k, v in overrides.items() if v is not None})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sample" and args.count is None:
        args.count = 1000
    out = Outputs(args.out)
    # one timestamp per run; recorded so the run can be replayed byte for byte
    os.environ.setdefault("SOURCE_DATE_EPOCH", str(int(time.time())))
    try:
        cfg = resolve_config(args)
        seeds, extra = COMMANDS[args.command](cfg, args, out)
        out.write_manifest(args.command, cfg, {"master": cfg.seed, **seeds},
                           {"results": extra, "source_date_epoch": int(os.environ["SOURCE_DATE_EPOCH"])})
    except (MpcNetError, OSError, ValueError, KeyError) as exc:
        out.cleanup()
        if args.verbose:
            log.exception("%s failed", args.command)
        message = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    print(out.root)
    return 0


if __name__ == "__main__":
    sys.exit(main())
