"""Experiment recipes, replicate fan-out and result tables.

Replicate ``r`` of a run always draws from ``RngStream(seed, r)``; sweep
experiments give grid point ``k`` the stream ids ``(k << 32) | r`` so grid
points are independent. Every table is a list of flat dicts, written as
CSV or JSON by :func:`write_table`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad, simpson

from .bias1d import (
    BIAS_SCHEMES,
    closed_form_f2,
    grid_invariance_residual,
    psi_delta_grid,
    solve_f2,
    tv_second_order,
)
from .kernels import EvalCounter, State
from .samplers import (
    STATISTICS,
    SamplerConfig,
    StabilityError,
    ULA_GUARD,
    mh_zzs_grid_kernel,
    run_chain,
    skew_detailed_balance_residual,
    step_subsampled_zzs,
)
from .targets import Gaussian1D, GaussianSpec, GaussianTarget, ParticleChain, Target, Target1D
from .util import RngBatch, RngStream, fit_loglog, rademacher, std_normal_vec

__all__ = [
    "EXPERIMENTS",
    "RunSummary",
    "FanoutResult",
    "config_hash",
    "replicate_fanout",
    "run_replicates",
    "reference_mean",
    "experiment_run",
    "experiment_bias_sweep",
    "experiment_order",
    "OrderResult",
    "experiment_accept",
    "experiment_grid_check",
    "experiment_skewdb_check",
    "experiment_f2",
    "experiment_tvterm",
    "experiment_particles",
    "write_table",
    "parse_grid",
]

EXPERIMENTS = ("run", "bias-sweep", "order", "accept", "grid-check", "skewdb-check",
               "f2", "tvterm", "particles")
LOCKSTEP_FAMILIES = ("zzs", "bps", "ula")
GRID_RESIDUAL_TOL = 1e-8
GRID_LEAK_TOL = 1e-10
SKEWDB_TOL = 1e-12


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _stream_id(k: int, r: int) -> int:
    return (int(k) << 32) | int(r)


def _mean_se(values) -> tuple[float, float]:
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        return math.nan, math.nan
    mean = float(np.mean(vals))
    if vals.size < 2:
        return mean, math.nan
    return mean, float(np.std(vals, ddof=1) / math.sqrt(vals.size))


# ----------------------------------------------------------------------------
# Summaries and fan-out
# ----------------------------------------------------------------------------

@dataclass
class RunSummary:
    """Replicate-level result of one configured run."""

    config: dict
    seed: int
    replicates: int
    per_replicate: list
    stat_mean: float
    stat_se: float
    count: int
    reject_frac: Optional[float] = None
    reject_frac_se: Optional[float] = None
    grad_evals: int = 0
    wall_clock: float = 0.0
    failures: list = field(default_factory=list)
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=2, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        return cls(**json.loads(text))


@dataclass
class FanoutResult:
    results: dict
    failures: dict

    @property
    def ordered(self) -> list:
        return [self.results[r] for r in sorted(self.results)]


def _call_worker(worker, seed, r):
    try:
        return r, worker(RngStream(seed, r), r), None
    except Exception as exc:  # collected per replicate, reported by the caller
        return r, None, f"{type(exc).__name__}: {exc}"


def replicate_fanout(worker: Callable, seed: int, replicates: int, jobs: int = 1) -> FanoutResult:
    """Run ``worker(rng, r)`` for ``r < replicates`` on stream ``(seed, r)``.

    With ``jobs > 1`` replicates run in worker processes (``worker`` must be
    picklable). Results are keyed by replicate index, so aggregation does
    not depend on completion order. Failures are collected, not raised.
    """
    if replicates < 1:
        raise ValueError("need at least one replicate")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_call_worker, [worker] * replicates,
                                 [seed] * replicates, range(replicates)))
    else:
        outs = [_call_worker(worker, seed, r) for r in range(replicates)]
    results = {r: res for r, res, err in outs if err is None}
    failures = {r: err for r, _, err in outs if err is not None}
    return FanoutResult(results, failures)


def _chain_worker(cfg: SamplerConfig, target: Target, statistic, rng, r):
    out = run_chain(cfg, target, rng, statistic)
    rej = float(out.reject_frac) if cfg.metropolis else None
    return {"mean": float(out.stat_mean), "reject": rej, "grad": int(out.grad_evals)}


def run_replicates(cfg: SamplerConfig, target: Target, statistic="radius2", seed: int = 0,
                   replicates: int = 1, jobs: int = 1, batched: Optional[bool] = None,
                   stream_offset: int = 0) -> RunSummary:
    """Run ``replicates`` independent chains and summarise across them.

    Lockstep-capable samplers run as one batched chain when ``batched`` is
    left at its default and ``jobs == 1``; row ``r`` of the batch uses the
    same stream as replicate ``r`` of the serial path.
    """
    cfg.validate(target)
    if batched is None:
        batched = cfg.family in LOCKSTEP_FAMILIES and jobs == 1
    t0 = time.perf_counter()
    failures = []
    if batched:
        ids = [_stream_id(stream_offset, r) for r in range(replicates)]
        out = run_chain(cfg, target, RngBatch(seed, ids), statistic)
        means = [float(m) for m in np.atleast_1d(out.stat.mean)]
        rejects = list(np.atleast_1d(out.reject_frac).astype(float)) if cfg.metropolis else []
        grad = int(out.grad_evals) * replicates
    else:
        if stream_offset:
            fan = _offset_fanout(cfg, target, statistic, seed, replicates, stream_offset)
        else:
            fan = replicate_fanout(partial(_chain_worker, cfg, target, statistic),
                                   seed, replicates, jobs)
        rows = fan.ordered
        failures = [{"replicate": r, "error": e} for r, e in sorted(fan.failures.items())]
        means = [row["mean"] for row in rows]
        rejects = [row["reject"] for row in rows] if cfg.metropolis else []
        grad = sum(row["grad"] for row in rows)
    mean, se = _mean_se(means)
    rmean, rse = _mean_se(rejects) if rejects else (None, None)
    count = cfg.iters if cfg.family != "zzs-cont" else 0
    config = {"sampler": cfg.as_dict(), "target": target.describe(), "statistic": str(statistic),
              "stream_offset": stream_offset}
    return RunSummary(config=config, seed=seed, replicates=len(means), per_replicate=means,
                      stat_mean=mean, stat_se=se, count=count, reject_frac=rmean,
                      reject_frac_se=rse, grad_evals=grad,
                      wall_clock=time.perf_counter() - t0, failures=failures)


def _offset_fanout(cfg, target, statistic, seed, replicates, offset):
    results, failures = {}, {}
    for r in range(replicates):
        try:
            results[r] = _chain_worker(cfg, target, statistic,
                                       RngStream(seed, _stream_id(offset, r)), r)
        except Exception as exc:
            failures[r] = f"{type(exc).__name__}: {exc}"
    return FanoutResult(results, failures)


def experiment_run(cfg: SamplerConfig, target: Target, statistic="radius2", seed: int = 0,
                   replicates: int = 1, jobs: int = 1):
    """Single configured run; with ``cfg.record`` also returns replicate 0's samples."""
    summary = run_replicates(cfg, target, statistic, seed, replicates, jobs,
                             batched=False if jobs > 1 else None)
    dump = None
    if cfg.record and cfg.family != "zzs-cont":
        dump = run_chain(cfg, target, RngStream(seed, 0), statistic).samples
    return summary, dump


# ----------------------------------------------------------------------------
# Bias sweeps and order-of-convergence
# ----------------------------------------------------------------------------

def default_statistic(target: Target1D) -> str:
    return "clip4" if target.kind == "cauchy" else "x2"


def reference_mean(target: Target1D, statistic: str) -> float:
    """Exact expectation of a scalar statistic under ``pi`` by adaptive quadrature."""
    f = STATISTICS[statistic]

    def dens(x):
        return math.exp(-(float(target.psi(x)) - float(target.psi(target.mode()))))

    z = quad(dens, -np.inf, np.inf, limit=400)[0]
    num = quad(lambda x: float(f(np.array([x]))) * dens(x), -np.inf, np.inf, limit=400)[0]
    return num / z


def predicted_bias(sol, delta: float, statistic: str) -> float:
    """Leading-order bias ``-delta^2 / 2 * int t (f2(., +1) + f2(., -1)) pi``."""
    f = STATISTICS[statistic](sol.x[:, None])
    return 0.0 - 0.5 * delta ** 2 * float(simpson(f * (sol.f2_plus + sol.f2_minus) * sol.weight,
                                            dx=sol.du))


def experiment_bias_sweep(target: Target1D, schemes: Sequence[str], lambdas: Sequence[float],
                          delta: float, iters: int, replicates: int, seed: int = 0,
                          statistic: Optional[str] = None) -> list[dict]:
    """Empirical bias of BPS splittings against the analytic second-order terms."""
    statistic = statistic or default_statistic(target)
    truth = reference_mean(target, statistic)
    rows = []
    k = 0
    for scheme in schemes:
        if scheme not in BIAS_SCHEMES:
            raise ValueError(f"bias sweeps cover {', '.join(BIAS_SCHEMES)}")
        for lam in lambdas:
            cfg = SamplerConfig(family="bps", scheme=scheme, delta=delta, lambda_r=lam, iters=iters)
            summ = run_replicates(cfg, target, statistic, seed, replicates, stream_offset=k)
            sol = solve_f2(scheme, target, lam)
            rows.append({
                "scheme": scheme, "lambda_r": lam, "delta": delta, "statistic": statistic,
                "stat_mean": summ.stat_mean, "truth": truth, "bias": summ.stat_mean - truth,
                "abs_bias": abs(summ.stat_mean - truth), "se": summ.stat_se,
                "pred_bias": predicted_bias(sol, delta, statistic),
                "tv2": tv_second_order(sol, delta), "replicates": summ.replicates,
            })
            k += 1
    return rows


@dataclass
class OrderResult:
    rows: list
    fits: dict
    rule: str = "points with |bias| <= 2 SE are excluded from the log-log fit"

    def verdict(self, scheme: str) -> str:
        fit = self.fits.get(scheme)
        if fit is None:
            return "unbiased (no point distinguishable from 0)"
        return f"slope {fit.slope:.3f} from {len(fit.used)} points"


def experiment_order(deltas: Sequence[float], horizon: float, replicates: int, seed: int = 0,
                     schemes: Sequence[str] = ("BDB", "DBD"), family: str = "bps",
                     lambda_r: float = 0.0, target: Optional[Target1D] = None) -> OrderResult:
    """|bias of x^2| against step size at fixed physical time ``horizon``."""
    target = target or Gaussian1D(1.0)
    deltas = list(deltas)
    if len(deltas) < 3:
        raise ValueError("order experiments need at least three step sizes")
    truth = target.second_moment()
    rows, fits = [], {}
    k = 0
    for scheme in schemes:
        pts = []
        for delta in deltas:
            iters = int(math.ceil(horizon / delta - 1e-9))
            cfg = SamplerConfig(family=family, scheme=scheme, delta=delta,
                                lambda_r=lambda_r, iters=iters)
            summ = run_replicates(cfg, target, "x2", seed, replicates, batched=True,
                                  stream_offset=k)
            k += 1
            bias = summ.stat_mean - truth
            used = abs(bias) > 2.0 * summ.stat_se
            rows.append({"scheme": scheme, "delta": delta, "iters": iters, "bias": bias,
                         "abs_bias": abs(bias), "se": summ.stat_se, "in_fit": bool(used)})
            if used:
                pts.append((delta, abs(bias)))
        fits[scheme] = fit_loglog(*zip(*pts)) if len(pts) >= 2 else None
    return OrderResult(rows, fits)


# ----------------------------------------------------------------------------
# Metropolis rejection fractions
# ----------------------------------------------------------------------------

def experiment_accept(structure: str, values: Sequence[float], dim: int = 20, delta: float = 0.3,
                      lambda_r: float = 0.5, iters: int = 10_000, replicates: int = 10,
                      seed: int = 0, samplers: Sequence[str] = ("zzs", "bps")) -> list[dict]:
    """Rejection fraction of MH-ZZS and MH-BPS over a covariance grid."""
    if iters == 0:
        return []
    rows = []
    k = 0
    for val in values:
        if structure == "equicorrelated":
            spec = GaussianSpec(dim, structure, rho=val)
        else:
            spec = GaussianSpec(dim, "diagonal", sigma2=val)
        target = GaussianTarget(spec)
        for fam in samplers:
            cfg = SamplerConfig(family=fam, scheme="DBD" if fam == "zzs" else "RDBDR",
                                delta=delta, lambda_r=lambda_r, iters=iters, metropolis=True)
            summ = run_replicates(cfg, target, "radius2", seed, replicates, batched=True,
                                  stream_offset=k)
            k += 1
            rows.append({"structure": structure, "param": val, "dim": dim,
                         "sampler": f"mh-{fam}", "reject_frac": summ.reject_frac,
                         "se": summ.reject_frac_se, "radius2": summ.stat_mean,
                         "radius2_truth": target.second_moment()})
    return rows


# ----------------------------------------------------------------------------
# Deterministic checks
# ----------------------------------------------------------------------------

def experiment_grid_check(target: Target1D, delta: float = 0.5, radius: float = 6.0,
                          lambdas: Sequence[float] = (0.0, 1.0), x0: float = 0.0) -> list[dict]:
    """Exact invariance of the RDBDR lattice measure, per refreshment rate."""
    n_max = int(math.floor(radius / delta))
    if n_max < 2:
        warnings.warn("step size is comparable to the truncation radius; "
                      "boundary leakage dominates the check", RuntimeWarning)
        n_max = max(n_max, 2)
    gm = psi_delta_grid(target, x0, delta, n_max)
    rows = []
    for lam in lambdas:
        res, leak = grid_invariance_residual(gm, target, lam)
        if leak > GRID_LEAK_TOL:
            warnings.warn(f"boundary leakage {leak:.3g} exceeds {GRID_LEAK_TOL:g}", RuntimeWarning)
        rows.append({"lambda_r": lam, "delta": delta, "n_max": n_max, "residual": res,
                     "leakage": leak,
                     "status": "PASS" if res <= GRID_RESIDUAL_TOL and leak <= GRID_LEAK_TOL
                     else "FAIL"})
    return rows


def experiment_skewdb_check(target: Target1D, delta: float = 0.5, radius: float = 6.0,
                            x0: float = 0.0) -> list[dict]:
    """Skew detailed balance of the Metropolis-adjusted zig-zag kernel on a lattice."""
    n_max = int(math.floor(radius / delta))
    P, y, _ = mh_zzs_grid_kernel(target, x0, delta, n_max)
    mu = np.exp(-(target.psi(y) - np.min(target.psi(y))))
    mu /= mu.sum()
    res = skew_detailed_balance_residual(P, mu)
    return [{"delta": delta, "n_max": n_max, "residual": res,
             "status": "PASS" if res <= SKEWDB_TOL else "FAIL"}]


def experiment_f2(scheme: str, target: Target1D, lambda_r: float, xs: Sequence[float]) -> list[dict]:
    sol = solve_f2(scheme, target, lambda_r)
    xs = np.asarray(xs, dtype=float)
    fp, fm = sol.plus(xs), sol.minus(xs)
    try:
        cp = closed_form_f2(scheme, target, lambda_r, xs, 1.0)
        cm = closed_form_f2(scheme, target, lambda_r, xs, -1.0)
    except ValueError:
        cp = cm = np.full(xs.shape, math.nan)
    return [{"x": float(x), "f2_plus": float(a), "f2_minus": float(b),
             "closed_form_plus": float(c), "closed_form_minus": float(d)}
            for x, a, b, c, d in zip(xs, fp, fm, cp, cm)]


def experiment_tvterm(target: Target1D, lambdas: Sequence[float], delta: float = 0.5,
                      schemes: Sequence[str] = BIAS_SCHEMES) -> list[dict]:
    rows = []
    for scheme in schemes:
        for lam in lambdas:
            rows.append({"lambda_r": float(lam), "scheme": scheme,
                         "tv2": tv_second_order(solve_f2(scheme, target, lam), delta)})
    return rows


# ----------------------------------------------------------------------------
# Particle chain
# ----------------------------------------------------------------------------

def experiment_particles(n: int = 25, coupling: float = 1.0, delta: float = 0.05,
                         iters: int = 20_000, seed: int = 0, every: int = 1000,
                         ula_delta: Optional[float] = None, x0: Optional[np.ndarray] = None,
                         burn_in: int = 0) -> list[dict]:
    """Running estimate of the empirical variance versus cost.

    The zig-zag run uses per-event-J subsampling, counting one unit per
    scalar force term evaluated. The optional ULA baseline steps with the
    full force, costing ``N`` chain terms plus ``N (N - 1)`` pair terms.
    """
    pc = ParticleChain(n, coupling)
    rows = []
    rng = RngStream(seed, 0)
    x = std_normal_vec(rng, n) if x0 is None else np.array(x0, dtype=float)
    s = State(x.copy(), rademacher(rng, n), "zzs")
    counter = EvalCounter()
    total, kept = 0.0, 0
    t0 = time.perf_counter()
    for it in range(1, iters + 1):
        s = step_subsampled_zzs(s, delta, pc, "per-event-J", rng, counter)
        if it > burn_in:
            total += float(pc.empirical_variance(s.x))
            kept += 1
        if it % every == 0 or it == iters:
            rows.append({"sampler": "zzs-sub", "iter": it, "grad_evals": counter.grad,
                         "wall": time.perf_counter() - t0,
                         "v_est": total / kept if kept else math.nan})
    if ula_delta:
        rng = RngStream(seed, 1)
        xu = x.copy()
        per_step = n + n * (n - 1)
        total, kept = 0.0, 0
        t0 = time.perf_counter()
        for it in range(1, iters + 1):
            xu = xu - ula_delta * pc.gradient(xu) + math.sqrt(2 * ula_delta) * std_normal_vec(rng, n)
            if not np.linalg.norm(xu) <= ULA_GUARD:
                raise StabilityError(f"ULA diverged at iteration {it}")
            if it > burn_in:
                total += float(pc.empirical_variance(xu))
                kept += 1
            if it % every == 0 or it == iters:
                rows.append({"sampler": "ula", "iter": it, "grad_evals": it * per_step,
                             "wall": time.perf_counter() - t0,
                             "v_est": total / kept if kept else math.nan})
    return rows


# ----------------------------------------------------------------------------
# Output
# ----------------------------------------------------------------------------

def parse_grid(text: str) -> list[float]:
    """``"a:b:step"`` (inclusive) or a comma list; grids must be strictly monotone."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] == 0:
            raise ValueError(f"bad grid {text!r}; expected start:stop:step")
        a, b, h = parts
        n = int(math.floor((b - a) / h + 1e-9)) + 1
        if n < 1:
            raise ValueError(f"empty grid {text!r}")
        vals = [round(a + i * h, 12) for i in range(n)]
    else:
        vals = [float(p) for p in text.split(",") if p.strip()]
    if not vals:
        raise ValueError("empty grid")
    diffs = np.diff(vals)
    if len(vals) > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise ValueError(f"grid {text!r} is not strictly monotone")
    return vals


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(rows: list[dict], path: Optional[str], fmt: str = "csv",
                columns: Optional[Sequence[str]] = None) -> str:
    """Serialise rows as CSV (fixed column order) or JSON; write to ``path`` if given."""
    if fmt == "json":
        text = json.dumps(rows, indent=2, allow_nan=True, default=_json_default) + "\n"
    elif fmt == "csv":
        cols = list(columns) if columns else (list(rows[0].keys()) if rows else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in cols])
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def sample_dump_rows(samples: np.ndarray, thin: int = 1) -> tuple[list[str], list[dict]]:
    """Rows for the ``iter,x1..xd,v1..vd`` sample dump."""
    d = samples.shape[-1] // 2
    cols = ["iter"] + [f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)]
    rows = []
    for k, z in enumerate(samples):
        row = {"iter": (k + 1) * thin}
        row.update({c: float(val) for c, val in zip(cols[1:], z)})
        rows.append(row)
    return cols, rows
