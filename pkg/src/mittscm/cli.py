"""Command-line interface: ``mittscm <subcommand> [options]``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 solver failure.  ``MITTSCM_WORKERS`` sets the default worker count.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import logging
import os
import shutil
import statistics
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import data, verify
from .fem import SolverError
from .forward import MeasurementSet
from .tscm import RunLog, TscmAbort, lambda_schedule, run_lsm_baseline, run_tscm

log = logging.getLogger("mittscm")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
WORKERS_ENV = "MITTSCM_WORKERS"


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# experiment runners (also used by the acceptance tests)


@dataclass
class RunResult:
    kind: str
    state: object
    runlog: RunLog

    @property
    def error(self) -> float:
        return self.runlog.final_error

    @property
    def iterations(self) -> int:
        return self.runlog.n_iterations


def schedule_for(n_lambda: int) -> list[float]:
    """``n_lambda`` equally spaced stages ending at 1; a single stage is ``lam = 1``."""
    if n_lambda < 1:
        raise ValueError("n_lambda must be >= 1")
    return [1.0] if n_lambda == 1 else lambda_schedule(1.0 / (n_lambda - 1))


def run_problem(
    problem: data.Problem,
    measurements: MeasurementSet,
    kind: str = "tscm",
    *,
    n_lambda: Optional[int] = None,
    timing: bool = True,
) -> RunResult:
    """Run the continuation method (``kind="tscm"``) or the level-set baseline."""
    p = problem
    if kind == "tscm":
        lambdas = None if n_lambda is None else schedule_for(n_lambda)
        state, runlog = run_tscm(
            p.model, p.params, measurements, p.preset.plan, p.config,
            exact_sigma=p.exact_sigma, timing=timing, lambdas=lambdas,
        )
    elif kind == "lsm":
        if p.preset.initial_guess is None:
            raise ConfigError(f"preset {p.preset.name!r} has no initial guess for the baseline")
        state, runlog = run_lsm_baseline(
            p.model, p.params, measurements, p.preset.plan, p.config, p.preset.initial_guess,
            exact_sigma=p.exact_sigma, timing=timing,
        )
    else:
        raise ValueError(f"unknown run kind {kind!r}")
    return RunResult(kind, state, runlog)


@dataclass(frozen=True)
class SweepJob:
    preset_text: str
    kind: str
    rho: float
    seed: int
    n_lambda: Optional[int]
    workers: int = 1


@dataclass(frozen=True)
class SweepRow:
    value: float
    seed: int
    error: float
    iterations: int
    stage_iters: tuple[int, ...]


def _sweep_one(job: SweepJob) -> tuple[float, int, tuple[int, ...]]:
    preset = data.loads_preset(job.preset_text)
    problem = data.build_problem(preset, job.workers)
    meas = problem.measurements(job.rho, job.seed)
    res = run_problem(problem, meas, job.kind, n_lambda=job.n_lambda, timing=False)
    return res.error, res.iterations, tuple(s.iters for s in res.runlog.stages)


def run_jobs(jobs: Sequence[SweepJob], processes: int = 1) -> list[tuple[float, int, tuple[int, ...]]]:
    """Run independent experiments, optionally in worker processes (same results)."""
    if processes <= 1 or len(jobs) <= 1:
        return [_sweep_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=processes) as pool:
        return list(pool.map(_sweep_one, jobs))


def sweep(
    preset: data.ExperimentPreset,
    study: str,
    seeds: Sequence[int],
    *,
    values: Optional[Sequence[float]] = None,
    workers: int = 1,
    processes: int = 1,
) -> list[SweepRow]:
    """``study="dlambda"`` varies N(lambda); ``study="noise"`` varies rho."""
    text = data.dumps_preset(preset)
    if study == "dlambda":
        vals = list(values if values is not None else preset.n_lambda or (1, 2, 4, 8, 16))
        jobs = [SweepJob(text, "tscm", preset.noise_level, s, int(v), workers) for v in vals for s in seeds]
    elif study == "noise":
        vals = list(values if values is not None else preset.noise_ladder)
        jobs = [SweepJob(text, "tscm", float(v), s, None, workers) for v in vals for s in seeds]
    else:
        raise ConfigError(f"unknown study {study!r}; use dlambda or noise")
    out = run_jobs(jobs, processes)
    keys = [(v, s) for v in vals for s in seeds]
    return [SweepRow(float(v), s, e, n, st) for (v, s), (e, n, st) in zip(keys, out)]


def aggregate(rows: Sequence[SweepRow]) -> list[tuple[float, float, float, list[float], list[int]]]:
    """Per value: (value, median error, median iterations, errors, iterations)."""
    out = []
    for v in dict.fromkeys(r.value for r in rows):
        sel = [r for r in rows if r.value == v]
        errs = [r.error for r in sel]
        its = [r.iterations for r in sel]
        out.append((v, statistics.median(errs), statistics.median(its), errs, its))
    return out


# --------------------------------------------------------------------------
# output helpers


@dataclass
class OutputDir:
    """Stage files in a temporary directory and move it into place on success."""

    target: Path
    overwrite: bool = False

    def __enter__(self) -> Path:
        if self.target.exists() and any(self.target.iterdir()) and not self.overwrite:
            raise ConfigError(f"output directory {self.target} exists and is not empty (use --overwrite)")
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        old = None
        if self.target.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.old.", dir=self.target.parent))
            os.replace(self.target, old / "x")
        os.replace(self.tmp, self.target)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
        return False


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, preset: data.ExperimentPreset, run: dict[str, str]) -> None:
    """Resolved preset plus a ``[run]`` section; enough to repeat the run."""
    text = data.dumps_preset(preset)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = run
    buf = io.StringIO()
    cp.write(buf)
    (out / "manifest.txt").write_text(text + buf.getvalue())


def read_manifest(path: Path) -> tuple[data.ExperimentPreset, dict[str, str]]:
    text = path.read_text()
    preset = data.loads_preset(text, path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    if not cp.has_section("run"):
        raise ConfigError(f"{path}: manifest has no [run] section")
    return preset, dict(cp["run"])


def write_run_outputs(out: Path, res: RunResult, timing: bool) -> str:
    st = res.state
    data.save_field(st.field("sigma"), out / "sigma.txt")
    data.save_field(st.field("phi"), out / "phi.txt")
    data.save_field(st.field("sigma_l2"), out / "sigma_l2.txt")
    (out / "runlog.csv").write_text(res.runlog.to_csv(timing))
    (out / "stages.csv").write_text(res.runlog.stages_csv())
    data.save_runlog(res.runlog, out / "runlog.txt", timing)
    summary = summarize(res.runlog)
    (out / "summary.txt").write_text(summary)
    return summary


def summarize(runlog: RunLog) -> str:
    lines = [
        f"final_error = {runlog.final_error!r}",
        f"iterations = {runlog.n_iterations}",
        f"stages = {len(runlog.stages)}",
    ]
    for s in runlog.stages:
        lines.append(f"stage lambda={s.lam:.6g} iters={s.iters} stop={s.reason}")
    if runlog.stages:
        first = runlog.stages[0].iters
        later = max((s.iters for s in runlog.stages[1:]), default=0)
        lines.append(f"first_stage_dominant = {str(first >= later).lower()}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# subcommands


def _load_preset(args) -> data.ExperimentPreset:
    try:
        preset = data.resolve_preset(args.preset)
        overrides = {}
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides["preset.seed"] = str(args.seed)
        return preset.with_overrides(overrides) if overrides else preset
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_gen_data(args) -> int:
    preset = _load_preset(args)
    problem = data.build_problem(preset, args.workers)
    levels = [float(r) for r in args.rho] if args.rho else list(preset.noise_ladder)
    with OutputDir(Path(args.out), args.overwrite) as out:
        for rho in levels:
            meas = problem.measurements(rho, preset.seed)
            data.save_measurements(meas, out / f"measurements_rho{rho:g}.txt")
            print(f"rho={rho:g}: {meas.plan.shape[0]} omegas x {meas.plan.shape[1]} coils")
        write_manifest(out, preset, {"command": "gen-data", "rho": " ".join(f"{r!r}" for r in levels)})
    return EXIT_OK


def _measurements_for(args, problem, run: dict) -> MeasurementSet:
    preset = problem.preset
    if args.data:
        path = Path(args.data)
        meas = data.load_measurements(path)
        if meas.plan != preset.plan or meas.n_boundary != len(problem.mesh.boundary_nodes):
            raise ConfigError(f"{path}: measurements do not match the preset plan or mesh")
        run["data"] = str(path.resolve())
        run["data_sha256"] = _sha256(path)
        return meas
    rho = preset.noise_level
    run["data"] = "generated"
    run["rho"] = repr(rho)
    return problem.measurements(rho, preset.seed)


def _cmd_run(args, kind: str) -> int:
    run: dict[str, str] = {"command": "run" if kind == "tscm" else "baseline"}
    timing = not args.no_timing
    n_lambda = getattr(args, "n_lambda", None)
    if args.manifest:
        preset, old = read_manifest(Path(args.manifest))
        if old.get("data", "generated") != "generated" and not args.data:
            args.data = old["data"]
        timing = old.get("timing", "true") == "true" and timing
        if n_lambda is None and "n_lambda" in old:
            n_lambda = int(old["n_lambda"])
    else:
        preset = _load_preset(args)
    problem = data.build_problem(preset, args.workers)
    meas = _measurements_for(args, problem, run)
    run["timing"] = str(timing).lower()
    if n_lambda is not None:
        run["n_lambda"] = str(n_lambda)
    with OutputDir(Path(args.out), args.overwrite) as out:
        write_manifest(out, preset, run)
        try:
            res = run_problem(problem, meas, kind, n_lambda=n_lambda, timing=timing)
        except TscmAbort as exc:
            # keep the partial log and the last state next to the manifest
            write_run_outputs(out, RunResult(kind, exc.state, exc.runlog), timing)
            (out / "ABORTED").write_text(f"{exc}\n")
            print(f"mittscm: solver failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        summary = write_run_outputs(out, res, timing)
    sys.stdout.write(summary)
    return EXIT_OK


def cmd_run(args) -> int:
    return _cmd_run(args, "tscm")


def cmd_baseline(args) -> int:
    return _cmd_run(args, "lsm")


def cmd_verify(args) -> int:
    results = verify.run_all(flip_sign=args.negative_control)
    text = verify.report(results)
    sys.stdout.write(text)
    if args.out:
        with OutputDir(Path(args.out), args.overwrite) as out:
            (out / "verify.txt").write_text(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_sweep(args) -> int:
    preset = _load_preset(args)
    seeds = args.seeds or list(preset.seeds)
    rows = sweep(preset, args.study, seeds, workers=args.workers, processes=args.jobs)
    label = "n_lambda" if args.study == "dlambda" else "rho"
    runs = io.StringIO()
    w = csv.writer(runs, lineterminator="\n")
    w.writerow([label, "seed", "error", "iterations", "stage_iters"])
    for r in rows:
        w.writerow([f"{r.value:g}", r.seed, repr(r.error), r.iterations, " ".join(map(str, r.stage_iters))])
    agg = io.StringIO()
    w = csv.writer(agg, lineterminator="\n")
    w.writerow([label, "median_error", "median_iterations", "errors", "iterations"])
    table = aggregate(rows)
    for v, me, mn, errs, its in table:
        w.writerow([f"{v:g}", repr(me), f"{mn:g}", " ".join(map(repr, errs)), " ".join(map(str, its))])
    med = [me for _, me, _, _, _ in table]
    trend = "non-increasing" if all(b <= a for a, b in zip(med, med[1:])) else "not monotone"
    note = f"median error over {label} is {trend}\n"
    with OutputDir(Path(args.out), args.overwrite) as out:
        (out / "runs.csv").write_text(runs.getvalue())
        (out / "aggregate.csv").write_text(agg.getvalue())
        (out / "summary.txt").write_text(note)
        write_manifest(out, preset, {"command": "sweep", "study": args.study, "seeds": " ".join(map(str, seeds))})
    sys.stdout.write(agg.getvalue() + note)
    return EXIT_OK


_GNUPLOT = """set datafile separator ','
set logscale y
set xlabel 'iteration'
plot '{csv}' using 1:5 skip 1 with lines title 'objective', \\
     '' using 1:3 skip 1 with lines title 'fidelity'
"""


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    path = run_dir / "runlog.txt"
    if not path.is_file():
        raise ConfigError(f"{run_dir} is not a run directory (no runlog.txt)")
    runlog = data.load_runlog(path)
    text = summarize(runlog)
    sys.stdout.write(text)
    if args.out:
        with OutputDir(Path(args.out), args.overwrite) as out:
            (out / "runlog.csv").write_text(runlog.to_csv())
            (out / "stages.csv").write_text(runlog.stages_csv())
            err = io.StringIO()
            w = csv.writer(err, lineterminator="\n")
            w.writerow(["n", "error"])
            w.writerows([n, repr(e)] for n, e in runlog.errors)
            (out / "errors.csv").write_text(err.getvalue())
            (out / "convergence.gp").write_text(_GNUPLOT.format(csv="runlog.csv"))
            (out / "summary.txt").write_text(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _default_workers() -> int:
    text = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(text)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}={text!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mittscm", description="Topology-to-shape continuation for magnetic induction tomography.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory (created atomically)")
        p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
        p.add_argument("--workers", type=int, default=None, help=f"forward-solve threads (default ${WORKERS_ENV} or 1)")

    def preset_args(p, required=True):
        p.add_argument("--preset", required=required, help=f"preset name ({', '.join(data.PRESET_NAMES)}) or file")
        p.add_argument("--seed", type=int, default=None, help="override the noise seed")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any preset key")

    p = sub.add_parser("gen-data", help="write synthetic measurement files")
    preset_args(p)
    common(p)
    p.add_argument("--rho", nargs="+", help="noise levels (default: the preset ladder)")
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (
        ("run", cmd_run, "run the continuation method"),
        ("baseline", cmd_baseline, "run the level-set baseline from the preset initial guess"),
    ):
        p = sub.add_parser(name, help=helptext)
        preset_args(p, required=False)
        common(p)
        p.add_argument("--data", help="measurement file (default: generate from the preset)")
        p.add_argument("--manifest", help="repeat the run recorded in a manifest")
        p.add_argument("--no-timing", action="store_true", help="write 0.0 in the seconds column")
        if name == "run":
            p.add_argument("--n-lambda", type=int, default=None, help="number of lambda stages")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="run the oracle suite")
    common(p, out_required=False)
    p.add_argument("--negative-control", action="store_true", help="negate analytic gradients; checks must fail")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="N(lambda) study or noise ladder over seeds")
    p.add_argument("--study", required=True, choices=("dlambda", "noise"))
    preset_args(p)
    common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="noise seeds (default: the preset seeds)")
    p.add_argument("--jobs", type=int, default=1, help="parallel experiment processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize a run directory and emit plot-ready CSV")
    p.add_argument("run_dir", help="directory written by run or baseline")
    p.add_argument("--out", help="directory for CSV files and a gnuplot script")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "workers", 0) is None:
            args.workers = _default_workers()
        if args.command in ("run", "baseline") and not args.preset and not args.manifest:
            raise ConfigError("give --preset or --manifest")
        return args.func(args)
    except (ConfigError, data.FormatError, KeyError, ValueError) as exc:
        print(f"mittscm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, TscmAbort) as exc:
        print(f"mittscm: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
