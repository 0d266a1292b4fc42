"""Command-line entry point.

Each subcommand loads a ``RunConfig`` (file, then ``--key value`` overrides),
runs one experiment and writes a CSV plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import warnings

import numpy as np

from . import __version__
from . import experiments as ex
from .config import DEFAULTS, ConfigError, RunConfig
from .theory import (ControlledQuadratic, relaxed_cv_bound, run_controlled_sgd,
                     exact_cv_bound)

SCHEMAS = {
    "theorem": ["t", "empirical", "std_err", "bound", "seeds"],
    "variance": ["checkpoint", "cv_step", "provider", "objective", "ratio", "trace_ratio",
                 "draws", "seed"],
    "trace": ["iter", "method", "seed", "nelbo", "nelbo_diff", "grad_norm_var"],
    "two_batch": ["kind", "batch", "epsilon", "value"],
    "timing": ["method", "reps", "steps", "mean_ms", "std_ms"],
}


def theorem_rows(cfg):
    """Controlled SGD on a quadratic against its convergence bound.

    With an empty ``theory.B_tilde`` the control variate is perfect and the
    exact-rate bound applies; otherwise the relaxed bound with noise floor.
    """
    H = np.array(cfg.matrix("theory.h"))
    b = np.array(cfg.list("theory.b", float))
    B = np.array(cfg.matrix("theory.B"))
    B_tilde = cfg.matrix("theory.B_tilde")
    theta0 = np.array(cfg.list("theory.theta0", float))
    spec = ControlledQuadratic.build(H, b, B, None if B_tilde is None else np.array(B_tilde),
                             eta=cfg["theory.eta"])
    bound = exact_cv_bound if B_tilde is None else relaxed_cv_bound
    T = cfg["theory.steps"]
    traj = run_controlled_sgd(spec, theta0, T, cfg["theory.seeds"], base_seed=cfg["seed"])
    return [{"t": t, "empirical": float(traj.mean_sq_dist[t]), "std_err": float(traj.std_err[t]),
             "bound": float(bound(spec, theta0, t)), "seeds": traj.seeds}
            for t in range(T + 1)]


COMMANDS = {
    "illustrate": ("two_batch", lambda cfg, jobs: ex.two_batch_rows(ex.illustrate_two_batches(cfg))),
    "static-variance": ("variance", ex.static_variance_experiment),
    "dynamic-variance": ("variance", ex.dynamic_variance_experiment),
    "train": ("trace", ex.nelbo_trace_experiment),
    "theorem-check": ("theorem", lambda cfg, jobs: theorem_rows(cfg)),
    "time-overhead": ("timing", lambda cfg, jobs: ex.timing_overhead(cfg)),
}


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, schema, rows, cfg):
    """Write rows atomically; the first line is a provenance comment."""
    columns = SCHEMAS[schema]
    lines = [f"# config_sha256={cfg.digest} seed={cfg['seed']} version={__version__}",
             ",".join(columns)]
    lines += [",".join(_fmt(row[c]) for c in columns) for row in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_parser():
    parser = argparse.ArgumentParser(prog="amortized-cv",
                                     description="Amortized control variate experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel seed jobs")
        for key in DEFAULTS:
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    return parser


def run_command(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        for key in DEFAULTS:
            value = getattr(args, key)
            if value is not None:
                cfg[key] = value
        cfg.validate()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    schema, fn = COMMANDS[args.command]
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"{schema}.csv")
    manifest_path = os.path.join(args.out, "manifest.json")
    created = [p for p in (csv_path, manifest_path) if not os.path.exists(p)]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            rows = fn(cfg, args.jobs)
        write_csv(csv_path, schema, rows, cfg)
        manifest = {"command": args.command, "version": __version__, "seed": cfg["seed"],
                    "config_sha256": cfg.digest, "config": dict(cfg.items()),
                    "outputs": [os.path.basename(csv_path)]}
        _atomic_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        for path in created:
            if os.path.exists(path):
                os.unlink(path)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(csv_path)
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
