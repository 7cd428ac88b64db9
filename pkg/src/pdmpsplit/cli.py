"""Command-line entry point: ``pdmpsplit <subcommand> [options]``.

Exit status is 0 on success, 1 on a configuration error and 2 when a run
trips an invariant or a deterministic check reports FAIL.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from typing import Optional, Sequence

from . import harness
from .samplers import SAMPLER_FAMILIES, STATISTICS, SUBSAMPLE_MODES, SamplerConfig
from .targets import TARGET_NAMES, Target1D, make_target
from .util import InvariantViolation

log = logging.getLogger("pdmpsplit")

# (default scale, full scale)
SCALES = {
    "bias-sweep": {"iters": (20_000, 200_000), "replicates": (20, 250)},
    "order": {"horizon": (1e4, 1e5), "replicates": (100, 250)},
    "accept": {"iters": (10_000, 100_000), "replicates": (10, 10)},
    "particles": {"iters": (20_000, 100_000)},
    "run": {"replicates": (1, 1)},
}


def _seed(text: str) -> int:
    val = int(text, 0)
    if not 0 <= val < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def _common_parser(suppress: bool) -> argparse.ArgumentParser:
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=_seed, default=d if suppress else 0)
    g.add_argument("--replicates", type=int, default=d)
    g.add_argument("--jobs", type=int, default=d if suppress else 1,
                   help="worker processes for replicate fan-out")
    g.add_argument("--out", default=d, help="output file (default: stdout)")
    g.add_argument("--format", choices=("csv", "json"), default=d if suppress else "csv")
    g.add_argument("--paper-scale", action="store_true", default=d if suppress else False,
                   help="use the full run lengths and replicate counts")
    return p


def _target_args(p, default="gauss-diag"):
    g = p.add_argument_group("target")
    g.add_argument("--target", choices=TARGET_NAMES, default=default)
    g.add_argument("--dim", type=int, default=1)
    g.add_argument("--rho", type=float, default=0.0)
    g.add_argument("--sigma2", type=float, default=1.0)
    g.add_argument("--gamma", type=float, default=1.0)
    g.add_argument("--nparticles", type=int, default=25)
    g.add_argument("--coupling", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="pdmpsplit", parents=[_common_parser(False)],
                                  description="Splitting schemes for zig-zag and bouncy particle samplers.")
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", required=True)
    common = [_common_parser(True)]

    p = sub.add_parser("run", parents=common, help="run one configured sampler")
    _target_args(p)
    p.add_argument("--sampler", choices=SAMPLER_FAMILIES, default="zzs")
    p.add_argument("--scheme", default="DBD")
    p.add_argument("--metropolis", action="store_true")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--horizon", type=float, default=1000.0)
    p.add_argument("--lambda-r", type=float, default=0.0)
    p.add_argument("--stat", choices=sorted(STATISTICS), default="radius2")
    p.add_argument("--subsample", choices=SUBSAMPLE_MODES, default="per-event-J")
    p.add_argument("--check-parity", action="store_true")
    p.add_argument("--samples", help="write replicate 0's states (iter,x1..xd,v1..vd) here")
    p.add_argument("--thin", type=int, default=1)

    p = sub.add_parser("bias-sweep", parents=common, help="empirical vs analytic bias in 1D")
    _target_args(p)
    p.add_argument("--schemes", default="RDBDR,DBRBD,DRBRD,BDRDB")
    p.add_argument("--sweep-lambda", default="0:3:0.5")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--iters", type=int)
    p.add_argument("--stat", choices=("x2", "clip4", "x1"))

    p = sub.add_parser("order", parents=common, help="bias against step size at fixed time")
    _target_args(p)
    p.add_argument("--deltas", default="0.8,0.4,0.2,0.1")
    p.add_argument("--horizon", type=float)
    p.add_argument("--schemes", default="BDB,DBD")
    p.add_argument("--sampler", choices=("bps", "zzs"), default="bps")
    p.add_argument("--lambda-r", type=float, default=0.0)

    p = sub.add_parser("accept", parents=common, help="Metropolis rejection fractions")
    p.add_argument("--structure", choices=("equicorrelated", "diagonal"), default="equicorrelated")
    p.add_argument("--values", default="0:0.9:0.1", help="rho (equicorrelated) or sigma_1^2 grid")
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--delta", type=float, default=0.3)
    p.add_argument("--lambda-r", type=float, default=0.5)
    p.add_argument("--iters", type=int)

    for name, default_target, helptext in (
            ("grid-check", "quartic1d", "exact invariance of the RDBDR lattice measure"),
            ("skewdb-check", "gauss-diag", "skew detailed balance of Metropolis zig-zag")):
        p = sub.add_parser(name, parents=common, help=helptext)
        _target_args(p, default_target)
        p.add_argument("--delta", type=float, default=0.5)
        p.add_argument("--radius", type=float, default=6.0)
        if name == "grid-check":
            p.add_argument("--sweep-lambda", default="0,1")

    p = sub.add_parser("f2", parents=common, help="second-order correction on a grid")
    _target_args(p)
    p.add_argument("--scheme", default="DBRBD")
    p.add_argument("--lambda-r", type=float, default=1.0)
    p.add_argument("--xs", default="-3:3:0.25")

    p = sub.add_parser("tvterm", parents=common, help="analytic second-order TV term against lambda_r")
    _target_args(p)
    p.add_argument("--sweep-lambda", default="0:3:0.5")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--schemes", default="RDBDR,DBRBD,DRBRD,BDRDB")

    p = sub.add_parser("particles", parents=common, help="subsampled zig-zag on a particle chain")
    p.add_argument("--nparticles", type=int, default=25)
    p.add_argument("--coupling", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--iters", type=int)
    p.add_argument("--every", type=int, default=1000)
    p.add_argument("--ula-delta", type=float, help="also run the ULA baseline with this step")
    return top


def _scaled(args, cmd: str, key: str):
    explicit = getattr(args, key, None)
    if explicit is not None:
        return explicit
    pair = SCALES[cmd][key]
    return pair[1] if args.paper_scale else pair[0]


def _target(args, need_1d: bool = False):
    t = make_target(args.target, args.dim, args.rho, args.sigma2, args.gamma,
                    args.nparticles, args.coupling)
    if need_1d and not isinstance(t, Target1D):
        raise ValueError("this experiment needs a one-dimensional target "
                         "(gauss-diag with --dim 1, quartic1d or cauchy1d)")
    return t


def _schemes(text: str) -> list[str]:
    return [s.strip().upper() for s in text.split(",") if s.strip()]


def _emit(args, rows, columns=None):
    text = harness.write_table(rows, getattr(args, "out", None), args.format, columns)
    if not getattr(args, "out", None):
        sys.stdout.write(text)


def _failed(rows) -> bool:
    return any(r.get("status") == "FAIL" for r in rows)


def cmd_run(args) -> int:
    target = _target(args)
    cfg = SamplerConfig(family=args.sampler, scheme=args.scheme, delta=args.delta,
                        lambda_r=args.lambda_r, iters=args.iters, horizon=args.horizon,
                        metropolis=args.metropolis, subsample=args.subsample,
                        thin=args.thin, record=bool(args.samples),
                        check_parity=args.check_parity)
    summary, dump = harness.experiment_run(cfg, target, args.stat, args.seed,
                                           _scaled(args, "run", "replicates"), args.jobs)
    if args.format == "json":
        text = summary.to_json() + "\n"
    else:
        row = {k: summary.to_dict()[k] for k in
               ("seed", "replicates", "stat_mean", "stat_se", "reject_frac", "grad_evals",
                "count", "config_hash")}
        text = harness.write_table([row], None, "csv")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if dump is not None:
        cols, rows = harness.sample_dump_rows(dump, cfg.thin)
        harness.write_table(rows, args.samples, "csv", cols)
    for fail in summary.failures:
        log.error("replicate %s failed: %s", fail["replicate"], fail["error"])
    return 2 if summary.failures else 0


def cmd_bias_sweep(args) -> int:
    rows = harness.experiment_bias_sweep(
        _target(args, True), _schemes(args.schemes), harness.parse_grid(args.sweep_lambda),
        args.delta, _scaled(args, "bias-sweep", "iters"),
        _scaled(args, "bias-sweep", "replicates"), args.seed, args.stat)
    _emit(args, rows)
    return 0


def cmd_order(args) -> int:
    res = harness.experiment_order(
        harness.parse_grid(args.deltas), _scaled(args, "order", "horizon"),
        _scaled(args, "order", "replicates"), args.seed, _schemes(args.schemes),
        args.sampler, args.lambda_r, _target(args, True))
    _emit(args, res.rows)
    log.warning("fit rule: %s", res.rule)
    for scheme in res.fits:
        log.warning("%s: %s", scheme, res.verdict(scheme))
    return 0


def cmd_accept(args) -> int:
    rows = harness.experiment_accept(
        args.structure, harness.parse_grid(args.values), args.dim, args.delta, args.lambda_r,
        _scaled(args, "accept", "iters"), _scaled(args, "accept", "replicates"), args.seed)
    _emit(args, rows, None if rows else ["structure", "param", "dim", "sampler",
                                         "reject_frac", "se", "radius2", "radius2_truth"])
    return 0


def cmd_grid_check(args) -> int:
    rows = harness.experiment_grid_check(_target(args, True), args.delta, args.radius,
                                         harness.parse_grid(args.sweep_lambda))
    _emit(args, rows)
    return 2 if _failed(rows) else 0


def cmd_skewdb_check(args) -> int:
    rows = harness.experiment_skewdb_check(_target(args, True), args.delta, args.radius)
    _emit(args, rows)
    return 2 if _failed(rows) else 0


def cmd_f2(args) -> int:
    rows = harness.experiment_f2(args.scheme.upper(), _target(args, True), args.lambda_r,
                                 harness.parse_grid(args.xs))
    _emit(args, rows, ["x", "f2_plus", "f2_minus", "closed_form_plus", "closed_form_minus"])
    return 0


def cmd_tvterm(args) -> int:
    rows = harness.experiment_tvterm(_target(args, True), harness.parse_grid(args.sweep_lambda),
                                     args.delta, _schemes(args.schemes))
    _emit(args, rows, ["lambda_r", "scheme", "tv2"])
    return 0


def cmd_particles(args) -> int:
    rows = harness.experiment_particles(args.nparticles, args.coupling, args.delta,
                                        _scaled(args, "particles", "iters"), args.seed,
                                        args.every, args.ula_delta)
    _emit(args, rows, ["sampler", "iter", "grad_evals", "wall", "v_est"])
    return 0


COMMANDS = {
    "run": cmd_run,
    "bias-sweep": cmd_bias_sweep,
    "order": cmd_order,
    "accept": cmd_accept,
    "grid-check": cmd_grid_check,
    "skewdb-check": cmd_skewdb_check,
    "f2": cmd_f2,
    "tvterm": cmd_tvterm,
    "particles": cmd_particles,
}


GRID_FLAGS = ("--xs", "--values", "--sweep-lambda", "--deltas")


def _join_grid_values(argv: Sequence[str]) -> list[str]:
    # argparse takes "-3:3:0.05" for an option; glue grid values to their flag.
    out, it = [], iter(argv)
    for tok in it:
        if tok in GRID_FLAGS:
            val = next(it, None)
            out.append(tok if val is None else f"{tok}={val}")
        else:
            out.append(tok)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_grid_values(sys.argv[1:] if argv is None else argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    warnings.simplefilter("always", RuntimeWarning)
    if args.replicates is not None and args.replicates < 1:
        log.error("--replicates must be at least 1")
        return 1
    try:
        return COMMANDS[args.command](args)
    except InvariantViolation as exc:
        log.error("invariant violated: %s", exc)
        return 2
    except (ValueError, json.JSONDecodeError) as exc:
        log.error("configuration error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
