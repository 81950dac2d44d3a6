"""
Experiment driver: offline/online runs, averaged errors, speedups, reports.

A run draws a training and a test set with distinct seeds, builds the
reduced model once, and for every test parameter compares the
high-fidelity SUPG solution with reduced solutions of dimension
``N = 1..N_max`` in each requested stabilization mode.

Errors are relative, in H1 (state, adjoint) and L2 (control). The state is
measured with its Dirichlet lifting added back. Parabolic errors are ratios
of ``dt``-weighted space-time norms by default; ``parabolic_error="sum"``
sums the per-step relative errors instead.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import platform
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .assembly import assemble_mass, graetz_problem, h1_gram, square_problem
from .linalg import SingularMatrixError, read_matrix
from .mesh import DomainId, MeshAlignmentError, build_structured_mesh, check_alignment, grid_for_h
from .pod_rom import (RomMode, ReducedSolveError, SnapshotCollectionError, VARIABLES,
                      build_bases, build_reduced_model, collect_snapshots,
                      draw_training_set, make_model, save_offline, solve_reduced,
                      truncation_report)
from .ocp_steady import Stabilization

log = logging.getLogger("supgrom.bench")

MODE_SLUGS = {"online-offline": RomMode.ONLINE_OFFLINE, "only-offline": RomMode.ONLY_OFFLINE}


def mode_slug(mode):
    return {v: k for k, v in MODE_SLUGS.items()}[RomMode(mode)]


class ConfigError(ValueError):
    pass


class ExperimentFailed(RuntimeError):
    """A solve failed; ``report`` holds the partial (invalid) report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class ExperimentConfig:
    problem: str = "graetz"              # "graetz" or "square"
    parabolic: bool = False
    nx: int = 70
    ny: int = 35
    box: list = field(default_factory=lambda: [[1e4, 1e6]])
    N_train: int = 100
    N_test: int = 100
    N_max: int = 20
    delta: float = 1.0
    alpha: float = 0.01
    T_final: float = 3.0
    n_time_steps: int = 30
    seed_train: int = 1
    seed_test: int = 2
    modes: list = field(default_factory=lambda: ["online-offline", "only-offline"])
    out: str = None
    parabolic_error: str = "spacetime"   # or "sum"
    preset: str = None

    def validate(self):
        if self.problem not in ("graetz", "square"):
            raise ConfigError("unknown problem {!r}".format(self.problem))
        for name in ("nx", "ny", "N_train", "N_test", "N_max", "n_time_steps"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError("{} must be an integer, got {!r}".format(name, v))
        if self.N_test < 1:
            raise ConfigError("N_test must be >= 1")
        if self.N_train < 1 or self.N_max < 1:
            raise ConfigError("N_train and N_max must be >= 1")
        if self.N_max > self.N_train:
            raise ConfigError("N_max ({}) exceeds N_train ({})".format(self.N_max, self.N_train))
        if self.nx < 2 or self.ny < 2:
            raise ConfigError("mesh needs at least 2x2 cells")
        domain = DomainId.GRAETZ_RECT if self.problem == "graetz" else DomainId.UNIT_SQUARE
        try:
            check_alignment(domain, self.nx, self.ny)
        except MeshAlignmentError as exc:
            raise ConfigError(str(exc)) from None
        box = np.atleast_2d(np.asarray(self.box, dtype=float))
        n_params = 1 if self.problem == "graetz" else 2
        if box.shape != (n_params, 2):
            raise ConfigError("box must hold {} (lo, hi) pair(s)".format(n_params))
        if np.any(box[:, 0] > box[:, 1]) or not np.all(np.isfinite(box)):
            raise ConfigError("empty or non-finite parameter box")
        if box[0, 0] <= 0:
            raise ConfigError("mu1 (inverse diffusion) must be positive")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not self.delta >= 0:
            raise ConfigError("delta must be nonnegative")
        if self.parabolic and not (self.T_final > 0 and self.n_time_steps >= 1):
            raise ConfigError("parabolic runs need T_final > 0 and n_time_steps >= 1")
        if self.seed_train == self.seed_test:
            raise ConfigError("training and test seeds must differ")
        if not self.modes or any(m not in MODE_SLUGS for m in self.modes):
            raise ConfigError("modes must be a non-empty subset of {}".format(sorted(MODE_SLUGS)))
        if self.parabolic_error not in ("spacetime", "sum"):
            raise ConfigError("parabolic_error must be 'spacetime' or 'sum'")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError("unknown config keys: {}".format(sorted(unknown)))
        return cls(**data)

    def build_problem(self):
        kw = dict(parabolic=self.parabolic, alpha=self.alpha, delta=self.delta,
                  T_final=self.T_final, n_time_steps=self.n_time_steps)
        if self.problem == "graetz":
            return graetz_problem(box=tuple(np.atleast_2d(self.box)[0]), **kw)
        return square_problem(box=tuple(map(tuple, self.box)), **kw)

    def build_mesh(self):
        domain = DomainId.GRAETZ_RECT if self.problem == "graetz" else DomainId.UNIT_SQUARE
        return build_structured_mesh(domain, self.nx, self.ny)


def _preset(problem, parabolic, h, **kw):
    domain = DomainId.GRAETZ_RECT if problem == "graetz" else DomainId.UNIT_SQUARE
    nx, ny = grid_for_h(domain, h)
    box = [[1e4, 1e6]] if problem == "graetz" else [[1e4, 1e5], [0.0, 1.57]]
    return dict(problem=problem, parabolic=parabolic, nx=nx, ny=ny, box=box, **kw)


PRESETS = {
    "graetz-steady": _preset("graetz", False, 0.029, N_max=20),
    "graetz-parabolic": _preset("graetz", True, 0.038, N_max=20, T_final=3.0, n_time_steps=30),
    "square-steady": _preset("square", False, 0.025, N_max=50),
    "square-parabolic": _preset("square", True, 0.036, N_max=30, T_final=3.0, n_time_steps=30),
}


def preset_config(name, **overrides):
    if name not in PRESETS:
        raise ConfigError("unknown preset {!r}; choose from {}".format(name, sorted(PRESETS)))
    data = dict(PRESETS[name], preset=name)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# errors
# --------------------------------------------------------------------------

class ErrorMeter:
    """
    Relative errors of reduced against high-fidelity solutions.

    Vectors are stacked over time steps (a single step when steady) in
    homogenized coordinates; the state lifting is added back here.
    """

    def __init__(self, mesh, spaces, n_steps=1, aggregation="spacetime"):
        self.spaces = spaces
        self.n_steps = n_steps
        self.aggregation = aggregation
        self.G = {"y": h1_gram(mesh), "u": assemble_mass(mesh).tocsr(), "p": h1_gram(mesh)}

    def _full(self, var, x):
        x = np.asarray(x).reshape(self.n_steps, -1)
        if var == "u":
            return x
        out = np.zeros((self.n_steps, self.spaces.n_full))
        out[:, self.spaces.free_dofs_state] = x
        if var == "y":
            out += self.spaces.lifting
        return out

    def relative(self, var, reference, approx):
        ref = self._full(var, reference)
        err = ref - self._full(var, approx)
        G = self.G[var]
        e2 = np.einsum("ij,ij->i", err, (G @ err.T).T)
        r2 = np.einsum("ij,ij->i", ref, (G @ ref.T).T)
        if self.aggregation == "sum":
            ok = r2 > 0
            return float(np.sum(np.sqrt(np.clip(e2[ok], 0, None) / r2[ok])))
        total = r2.sum()
        return float(math.sqrt(max(e2.sum(), 0.0) / total)) if total > 0 else 0.0

    def all(self, hf, red):
        return {v: self.relative(v, getattr(hf, v).ravel(), getattr(red, v)) for v in VARIABLES}


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    config: dict
    errors: dict          # mode slug -> var -> list over N
    speedup: dict         # mode slug -> {"min", "avg", "max"} -> list over N
    eigenvalues: dict     # var -> descending list
    n_effective: int
    hf_times: list
    environment: dict
    valid: bool = True
    notes: list = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def environment_note():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
        "cpu_count": os.cpu_count(),
    }


def _log10(x):
    return math.log10(x) if x > 0 else float("-inf")


def emit_report(report, directory):
    """Write ``report.json`` and the per-mode CSV tables into ``directory``."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
        for slug, errs in report.errors.items():
            with open(d / "errors_{}.csv".format(slug), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["N", "e_y", "e_u", "e_p", "log10_e_y", "log10_e_u", "log10_e_p"])
                for k in range(len(errs["y"])):
                    vals = [errs[v][k] for v in VARIABLES]
                    w.writerow([k + 1] + [repr(x) for x in vals] + [repr(_log10(x)) for x in vals])
        for slug, sp_ in report.speedup.items():
            with open(d / "speedup_{}.csv".format(slug), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["N", "min", "avg", "max"])
                for k in range(len(sp_["avg"])):
                    w.writerow([k + 1, repr(sp_["min"][k]), repr(sp_["avg"][k]), repr(sp_["max"][k])])
        with open(d / "eigenvalues.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n"] + ["lambda_{}".format(v) for v in VARIABLES])
            n = max((len(report.eigenvalues.get(v, [])) for v in VARIABLES), default=0)
            for k in range(n):
                row = [k + 1]
                for v in VARIABLES:
                    lam = report.eigenvalues.get(v, [])
                    row.append(repr(lam[k]) if k < len(lam) else "")
                w.writerow(row)
    except OSError as exc:
        raise OSError("cannot write report to {}: {}".format(d, exc)) from exc
    return d


def load_report(directory):
    data = json.loads((Path(directory) / "report.json").read_text())
    return ExperimentReport.from_dict(data)


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

def run_experiment(config, offline_dir=None):
    """
    Run the offline phase and the test loop described by ``config``.

    Raises
    ------
    ConfigError
        for invalid settings
    ExperimentFailed
        if any solve fails; the attached report is partial and invalid
    """
    config.validate()
    problem = config.build_problem()
    mesh = config.build_mesh()
    model = make_model(problem, mesh)
    modes = [MODE_SLUGS[m] for m in config.modes]
    n_steps = model.n_steps if problem.parabolic else 1
    report = ExperimentReport(
        config=config.to_dict(), errors={}, speedup={}, eigenvalues={},
        n_effective=0, hf_times=[], environment=environment_note())

    train = draw_training_set(problem.parameter_box, config.N_train, config.seed_train)
    test = draw_training_set(problem.parameter_box, config.N_test, config.seed_test)
    log.info("offline: %d snapshots on %dx%d mesh", config.N_train, config.nx, config.ny)
    try:
        snaps = collect_snapshots(problem, mesh, train, model=model)
    except SnapshotCollectionError as exc:
        report.valid = False
        report.notes.append(str(exc))
        raise ExperimentFailed(str(exc), report) from exc

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        bases = build_bases(snaps, config.N_max)
    report.notes.extend(str(w.message) for w in caught)
    report.n_effective = bases.N_max
    report.eigenvalues = {v: bases.eigenvalues(v).tolist() for v in VARIABLES}
    rom = build_reduced_model(problem, bases, model)
    if offline_dir is not None:
        save_offline(rom, offline_dir, extra={
            "seed_train": config.seed_train, "N_train": config.N_train,
            "delta": config.delta, "alpha": config.alpha,
            "modes": [m.value for m in RomMode]})

    meter = ErrorMeter(mesh, model.spaces, n_steps, config.parabolic_error)
    N_max = config.N_max
    err = {m: np.zeros((config.N_test, N_max, 3)) for m in modes}
    spd = {m: np.zeros((config.N_test, N_max)) for m in modes}
    for i, mu in enumerate(test.samples):
        try:
            hf = model.solve(mu, Stabilization.SUPG)
        except SingularMatrixError as exc:
            report.valid = False
            report.notes.append("HF solve failed at mu={}: {}".format(mu.tolist(), exc))
            raise ExperimentFailed(report.notes[-1], report) from exc
        report.hf_times.append(hf.wall_time)
        for N in range(1, N_max + 1):
            n_used = min(N, bases.N_max)
            for m in modes:
                try:
                    red = solve_reduced(rom, mu, n_used, m)
                except ReducedSolveError as exc:
                    report.valid = False
                    report.notes.append(str(exc))
                    raise ExperimentFailed(str(exc), report) from exc
                e = meter.all(hf, red)
                err[m][i, N - 1] = [e[v] for v in VARIABLES]
                spd[m][i, N - 1] = hf.wall_time / max(red.wall_time, 1e-12)
        log.info("test %d/%d done (HF %.3fs)", i + 1, config.N_test, hf.wall_time)

    for m in modes:
        slug = mode_slug(m)
        mean = err[m].mean(axis=0)
        report.errors[slug] = {v: mean[:, k].tolist() for k, v in enumerate(VARIABLES)}
        report.speedup[slug] = {"min": spd[m].min(axis=0).tolist(),
                                "avg": spd[m].mean(axis=0).tolist(),
                                "max": spd[m].max(axis=0).tolist()}
    return report


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="supgrom", description="SUPG reduced-order OCP benchmarks")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--config", help="JSON file with ExperimentConfig fields")
    r.add_argument("--nmax", type=int)
    r.add_argument("--ntrain", type=int)
    r.add_argument("--ntest", type=int)
    r.add_argument("--mode", choices=["online-offline", "only-offline", "both"])
    r.add_argument("--stab-delta", type=float)
    r.add_argument("--seed-train", type=int)
    r.add_argument("--seed-test", type=int)
    r.add_argument("--mesh-nx", type=int)
    r.add_argument("--mesh-ny", type=int)
    r.add_argument("--parabolic-error", choices=["spacetime", "sum"])
    r.add_argument("--out")
    r.add_argument("-v", "--verbose", action="store_true")
    i = sub.add_parser("inspect", help="print eigenvalue decay of stored offline data")
    i.add_argument("--offline", required=True, help="offline directory (or run output directory)")
    return p


def config_from_args(args):
    overrides = {
        "N_max": args.nmax, "N_train": args.ntrain, "N_test": args.ntest,
        "delta": args.stab_delta, "seed_train": args.seed_train, "seed_test": args.seed_test,
        "nx": args.mesh_nx, "ny": args.mesh_ny, "out": args.out,
        "parabolic_error": args.parabolic_error,
    }
    if args.mode is not None:
        overrides["modes"] = (["online-offline", "only-offline"] if args.mode == "both"
                              else [args.mode])
    if args.preset:
        cfg = preset_config(args.preset, **overrides)
    else:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError("cannot read config {}: {}".format(args.config, exc)) from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        base = data.pop("preset", None)
        if base is not None:
            data = dict(preset_config(base).to_dict(), **data)
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            cfg = ExperimentConfig.from_dict(data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    if cfg.out is None:
        cfg.out = os.path.join("results", cfg.preset or "custom")
    return cfg.validate()


def inspect_offline(directory, stream=None):
    stream = stream or sys.stdout
    d = Path(directory)
    if not (d / "manifest.json").exists() and (d / "offline" / "manifest.json").exists():
        d = d / "offline"
    manifest = json.loads((d / "manifest.json").read_text())
    lam = {v: read_matrix(d / "eigenvalues_{}.romx".format(v))[:, 0] for v in VARIABLES}
    print("problem {}  N_max {}  N_train {}".format(
        manifest["problem_id"], manifest["N_max"], manifest.get("N_train")), file=stream)
    print("{:>4} {:>12} {:>12} {:>12}".format("n", "y", "u", "p"), file=stream)
    n = max(len(x) for x in lam.values())
    for k in range(n):
        row = []
        for v in VARIABLES:
            ratio = lam[v][k] / lam[v][0] if k < len(lam[v]) and lam[v][0] > 0 else float("nan")
            row.append("{:12.3e}".format(ratio))
        print("{:>4} {}".format(k + 1, " ".join(row)), file=stream)


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "inspect":
        try:
            inspect_offline(args.offline)
        except (OSError, ValueError, KeyError) as exc:
            print("error: {}".format(exc), file=sys.stderr)
            return 2
        return 0

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print("invalid config: {}".format(exc), file=sys.stderr)
        return 2
    out = Path(cfg.out)
    try:
        report = run_experiment(cfg, offline_dir=out / "offline")
    except ConfigError as exc:
        print("invalid config: {}".format(exc), file=sys.stderr)
        return 2
    except ExperimentFailed as exc:
        emit_report(exc.report, out)
        print("solver failure: {}".format(exc), file=sys.stderr)
        return 3
    emit_report(report, out)
    for slug, errs in report.errors.items():
        last = [errs[v][-1] for v in VARIABLES]
        print("{}: N={} e_y={:.2e} e_u={:.2e} e_p={:.2e}  speedup avg {:.1f}".format(
            slug, cfg.N_max, *last, report.speedup[slug]["avg"][-1]))
    print("report written to {}".format(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
