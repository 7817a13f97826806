"""``qnetvi`` command line: simulate, infer, mcmc, report.

Exit codes: 0 ok, 2 configuration or argument error, 3 numerical flag
(bound decrease, support overflow, log-r clamping), 4 I/O error,
5 iteration limit reached before convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import shutil
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import Experiment, load_experiment
from .netmodel import ConfigError
from .observations import read_observations, write_observations
from .simulate import SimulationError, simulate_experiment, write_trajectory

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO, EXIT_MAXITER = 0, 2, 3, 4, 5

log = logging.getLogger("qnetvi")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, files, started: float, config_hash: str = "",
                   seeds=None, extra=None) -> Path:
    """Provenance record; every artifact is listed with its digest."""
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "config_sha256": config_hash,
        "seeds": seeds or {},
        "versions": {"qnetvi": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_clock_seconds": round(time.time() - started, 3),
        "files": [{"path": Path(f).name, "sha256": _sha256(Path(f))} for f in files],
    }
    if extra:
        record.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return path


def _load(path) -> Experiment:
    try:
        return load_experiment(path)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror or exc}", EXIT_IO) from None
    except ConfigError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from None


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror or exc}",
                       EXIT_IO) from None
    return out


def _read_obs(path, exp: Experiment):
    from .observations import monitored_nodes
    try:
        obs = read_observations(path, exp.spec, exp.observation.model, exp.observation.support)
    except OSError as exc:
        raise CliError(f"cannot read observations {path}: {exc.strerror or exc}",
                       EXIT_IO) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    expected = monitored_nodes(exp.spec, exp.observation.monitored)
    if len(obs) and tuple(obs.nodes) != tuple(expected):
        raise CliError(f"{path}: observed nodes {list(obs.nodes)} do not match the "
                       f"configured monitored nodes {list(expected)}", EXIT_CONFIG)
    return obs


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    started = time.time()
    exp = _load(args.config)
    out = _out_dir(args.out)
    seed = exp.simulation.seed if args.seed is None else args.seed
    try:
        traj, obs = simulate_experiment(exp, seed)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except SimulationError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    files = [out / "trajectory.csv", out / "observations.csv"]
    write_trajectory(files[0], traj, exp.spec)
    write_observations(files[1], obs, exp.spec)
    write_manifest(out, "simulate", files, started, exp.digest, {"seed": seed},
                   {"events": len(traj), "observation_support": obs.support})
    print(f"simulated {len(traj)} events, {len(obs)} observations -> {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .meanfield import EngineSettings, SupportError, TimeGrid, run_coordinate_ascent
    from .meanfield.summary import write_result

    started = time.time()
    exp = _load(args.config)
    obs = _read_obs(args.observations, exp)
    out = _out_dir(args.out)
    inf = exp.inference
    for name in ("grid", "delta", "tol", "max_iters", "nu_bar"):
        if getattr(args, name) is not None:
            setattr(inf, name, getattr(args, name))
    horizon = exp.simulation.horizon
    try:
        settings = EngineSettings.from_inference(inf)
        obs.check_horizon(horizon)
        grid = TimeGrid.build(horizon, inf.grid, obs.times)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None

    def progress(it, state):
        log.info("iteration %d done (%.1fs)", it, time.time() - started)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = run_coordinate_ascent(exp.spec, exp.rate_priors(), obs, settings, horizon,
                                           grid=grid, callback=progress)
        except SupportError as exc:
            raise CliError(str(exc), EXIT_NUMERIC) from None
    notes = sorted({str(w.message) for w in caught})
    for n in notes:
        log.warning(n)
    files = write_result(result, out)
    if len(obs):
        files.append(out / "observations.csv")
        if Path(args.observations).resolve() != files[-1].resolve():
            shutil.copyfile(args.observations, files[-1])
    status = ("converged" if result.converged else
              "no-op" if settings.max_iters == 0 else "max_iters")
    write_manifest(out, "infer", files, started, exp.digest, {},
                   {"status": status, "iterations": result.iterations,
                    "elbo": result.elbo_trace[-1], "bound_decreased": result.decreased,
                    "settings": {"delta": settings.delta, "nu_bar": _num(settings.nu_bar),
                                 "grid": inf.grid, "tol": settings.tol,
                                 "max_iters": settings.max_iters,
                                 "coupling": settings.coupling},
                    "warnings": notes})
    print(f"{status} after {result.iterations} iterations, elbo {result.elbo_trace[-1]:.6g} "
          f"-> {out}")
    numeric = result.decreased or any("clamped" in n for n in notes)
    if numeric:
        return EXIT_NUMERIC
    if status == "max_iters":
        return EXIT_MAXITER
    return EXIT_OK


def _num(x: float):
    return x if math.isfinite(x) else str(x)


def cmd_mcmc(args) -> int:
    from . import baselines as bl
    from .meanfield.posteriors import SUMMARY_COLUMNS
    from .meanfield.summary import rate_name, write_csv

    started = time.time()
    exp = _load(args.config)
    try:
        mu0, N, prior = bl.closed_loop_parameters(exp)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    obs = _read_obs(args.observations, exp)
    out = _out_dir(args.out)
    cfg = bl.MCMCConfig(args.samples, args.burn, args.scale, args.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = bl.metropolis_hastings(prior, obs, mu0, N, cfg)
    for w in caught:
        log.warning(str(w.message))
    name = rate_name(exp.spec, 1, 0)
    files = [out / "chain.csv", out / "posterior_summary.csv"]
    write_csv(files[0], ("iteration", name),
              ((n, float(v)) for n, v in enumerate(res.samples, start=args.burn)))
    write_csv(files[1], SUMMARY_COLUMNS, [res.summary_row(name)])
    write_manifest(out, "mcmc", files, started, exp.digest, {"seed": args.seed},
                   {"acceptance": res.acceptance, "proposal_scale": res.proposal_scale})
    print(f"acceptance {res.acceptance:.3f}, mean {res.samples.mean():.4g} -> {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import ReportError, build_report

    started = time.time()
    out = _out_dir(args.out)
    try:
        files = build_report([Path(d) for d in args.results], out, figures=not args.no_figures)
    except ReportError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except OSError as exc:
        raise CliError(f"{exc.filename or ''}: {exc.strerror or exc}", EXIT_IO) from None
    write_manifest(out, "report", files, started)
    print(f"report with {len(files)} files -> {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _positive_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qnetvi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qnetvi {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="sample a trajectory and noisy observations")
    s.add_argument("config")
    s.add_argument("--seed", type=int, help="overrides simulation.seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("infer", help="variational posterior of the service rates")
    s.add_argument("config")
    s.add_argument("observations")
    s.add_argument("--grid", type=int, help="number of uniform grid intervals")
    s.add_argument("--nu-bar", dest="nu_bar", type=float, help="intensity cap (inf allowed)")
    s.add_argument("--delta", type=float, help="rate augmentation")
    s.add_argument("--tol", type=float, help="relative bound tolerance")
    s.add_argument("--max-iters", dest="max_iters", type=_positive_int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("mcmc", help="stationary-likelihood sampler (closed loop only)")
    s.add_argument("config")
    s.add_argument("observations")
    s.add_argument("--samples", type=_positive_int, default=100_000)
    s.add_argument("--burn", type=_positive_int, default=10_000)
    s.add_argument("--scale", type=float, help="proposal sd on the log scale (tuned if omitted)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mcmc)

    s = sub.add_parser("report", help="merge result directories and draw figures")
    s.add_argument("results", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "mcmc":
        if args.samples <= args.burn:
            parser.error("--samples must exceed --burn")
        if args.scale is not None and not args.scale > 0:
            parser.error("--scale must be positive")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
