"""Chain drivers: splitting samplers, Metropolis-adjusted variants, subsampled
and continuous-time zig-zag, and the unadjusted Langevin baseline.

Splitting and Metropolis samplers accept either a single stream (state
arrays of shape ``(d,)``) or an :class:`~pdmpsplit.util.RngBatch` (state
arrays ``(R, d)``); row ``r`` of a batched run reproduces the single-chain
run on stream ``r``. Event-driven samplers run one chain at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .kernels import (
    EvalCounter,
    State,
    _reflect_where,
    apply_scheme,
    parse_scheme,
    refresh_window,
    subsampled_zzs_bounce_window,
    zzs_flip_probability,
)
from .targets import (
    FactorizedTarget,
    GaussianTarget,
    ParticleChain,
    SingleFactor,
    Target,
    Target1D,
)
from .util import (
    InvariantViolation,
    OnlineStat,
    rademacher,
    std_normal_vec,
    unit_sphere,
)

__all__ = [
    "SAMPLER_FAMILIES",
    "SUBSAMPLE_MODES",
    "STATISTICS",
    "SamplerConfig",
    "ChainOutput",
    "BoundViolation",
    "StabilityError",
    "ParityError",
    "init_state",
    "step_unadjusted",
    "step_mh_zzs",
    "step_mh_bps",
    "step_subsampled_zzs",
    "step_ula",
    "run_chain",
    "run_continuous_zzs",
    "dbd_zzs_parity_ok",
    "mh_zzs_grid_kernel",
    "skew_detailed_balance_residual",
]

SAMPLER_FAMILIES = ("zzs", "bps", "zzs-sub", "zzs-cont", "ula")
SUBSAMPLE_MODES = ("fixed-J", "per-event-J")
ULA_GUARD = 1e8
BOUND_SLACK = 1e-10


class BoundViolation(InvariantViolation):
    """Thinning bound exceeded by the true rate."""


class StabilityError(InvariantViolation):
    """Iterates left any reasonable region (divergence)."""


class ParityError(InvariantViolation):
    """Zig-zag lattice parity broken."""


def _radius2(x):
    return np.sum(x * x, axis=-1)


STATISTICS: dict[str, Callable] = {
    "radius2": _radius2,
    "x2": _radius2,
    "x1": lambda x: x[..., 0],
    "clip4": lambda x: np.minimum(4.0, _radius2(x)),
    "empvar": ParticleChain.empirical_variance,
}


@dataclass
class SamplerConfig:
    """Everything needed to run one chain apart from the target and stream.

    ``family`` is one of ``zzs``, ``bps`` (splitting, optionally with a
    Metropolis correction), ``zzs-sub`` (subsampled DBD zig-zag),
    ``zzs-cont`` (exact continuous-time zig-zag over ``horizon``) or
    ``ula``.
    """

    family: str = "zzs"
    scheme: str = "DBD"
    delta: float = 0.1
    lambda_r: float = 0.0
    iters: int = 1000
    horizon: float = 0.0
    metropolis: bool = False
    subsample: str = "per-event-J"
    thin: int = 1
    record: bool = False
    check_parity: bool = False

    def validate(self, target: Target) -> None:
        if self.family not in SAMPLER_FAMILIES:
            raise ValueError(f"unknown sampler family {self.family!r}")
        if self.family == "zzs-cont":
            if not self.horizon > 0:
                raise ValueError("continuous zig-zag needs a positive horizon")
        else:
            if not self.delta > 0:
                raise ValueError("step size must be positive")
            if self.iters < 0:
                raise ValueError("iteration count must be non-negative")
        if self.lambda_r < 0:
            raise ValueError("refreshment rate must be non-negative")
        if self.thin < 1:
            raise ValueError("thinning must be >= 1")
        if self.family in ("zzs-cont", "ula") and target.grad_lipschitz is None:
            raise ValueError(f"{self.family} requires a target with a gradient Lipschitz bound")
        if self.family in ("zzs", "bps"):
            spec = parse_scheme(self.scheme, self.delta)
            mh_scheme = "DBD" if self.family == "zzs" else "RDBDR"
            if self.metropolis and spec.name != mh_scheme:
                raise ValueError(f"Metropolis-adjusted {self.family} is defined for {mh_scheme} only")
            if self.check_parity and (self.family != "zzs" or spec.name != "DBD" or self.metropolis):
                raise ValueError("parity checks apply to unadjusted DBD zig-zag only")
        if self.family == "zzs-sub":
            if self.subsample not in SUBSAMPLE_MODES:
                raise ValueError(f"unknown subsampling mode {self.subsample!r}")
            if self.scheme.upper() != "DBD":
                raise ValueError("subsampled zig-zag uses the DBD scheme")
            if self.subsample == "per-event-J" and not isinstance(target, ParticleChain):
                raise ValueError("per-event-J subsampling needs a particle chain target")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ChainOutput:
    """Summary of one run (or ``R`` lockstep runs: arrays over the batch)."""

    stat: OnlineStat
    iters: int
    proposals: int = 0
    rejections: object = 0
    grad_evals: int = 0
    final: Optional[State] = None
    samples: Optional[np.ndarray] = None
    time_average: Optional[float] = None
    horizon: Optional[float] = None
    events: int = 0

    @property
    def stat_mean(self):
        return self.time_average if self.time_average is not None else self.stat.mean

    @property
    def reject_frac(self):
        if self.proposals == 0:
            return 0.0 * np.asarray(self.rejections, dtype=float)
        return np.asarray(self.rejections, dtype=float) / self.proposals


# ----------------------------------------------------------------------------
# Initialisation
# ----------------------------------------------------------------------------

def sample_target(target: Target, rng) -> np.ndarray:
    """Exact draws from ``pi`` where available; iid N(0, 1) for particle chains."""
    if isinstance(target, GaussianTarget):
        return target.sample(std_normal_vec(rng, target.dim))
    if isinstance(target, Target1D):
        u = rng.uniform(rng.batch_shape + (1,))
        return np.asarray(target.inverse_cdf(u), dtype=float)
    if isinstance(target, (ParticleChain, SingleFactor)) or hasattr(target, "dim"):
        return std_normal_vec(rng, target.dim)
    raise ValueError("cannot initialise this target")


def init_state(target: Target, family: str, rng) -> State:
    """Position from ``pi`` (see :func:`sample_target`), velocity from its law."""
    x = sample_target(target, rng)
    kf = "bps" if family == "bps" else "zzs"
    v = unit_sphere(rng, target.dim) if kf == "bps" else rademacher(rng, target.dim)
    return State(x, v, kf)


# ----------------------------------------------------------------------------
# Single steps
# ----------------------------------------------------------------------------

def step_unadjusted(s: State, cfg: SamplerConfig, target: Target, rng,
                    counter: Optional[EvalCounter] = None) -> State:
    if cfg.metropolis:
        raise ValueError("step_unadjusted called with a Metropolis configuration")
    return apply_scheme(s, parse_scheme(cfg.scheme, cfg.delta), target, cfg.lambda_r, rng, counter)


def _accept(rng, log_a) -> np.ndarray:
    u = rng.uniform(rng.batch_shape)
    return np.log(u) < log_a


def mh_zzs_log_acceptance(target: Target, x, x_tilde, v, flipped, g_half, delta):
    """``psi(x) - psi(x~) + delta * sum over unflipped i of v_i d_i psi(x + delta v / 2)``."""
    kept = np.sum(np.where(flipped, 0.0, v * g_half), axis=-1)
    return target.potential(x) - target.potential(x_tilde) + delta * kept


def step_mh_zzs(s: State, delta: float, target: Target, rng,
                counter: Optional[EvalCounter] = None):
    """Metropolis-adjusted DBD zig-zag step.

    Returns ``(state, accepted)``. On rejection the position is kept and
    the velocity is reversed.
    """
    x, v = s.x, s.v
    x_half = x + 0.5 * delta * v
    g = target.gradient(x_half)
    if counter is not None:
        counter.grad += 1
    u = rng.uniform(v.shape)
    flipped = u < zzs_flip_probability(v, g, delta)
    v_t = np.where(flipped, -v, v)
    x_t = x_half + 0.5 * delta * v_t
    acc = _accept(rng, mh_zzs_log_acceptance(target, x, x_t, v, flipped, g, delta))
    a = np.asarray(acc)[..., None]
    return State(np.where(a, x_t, x), np.where(a, v_t, -v), s.family), acc


def step_mh_bps(s: State, delta: float, lam_r: float, target: Target, rng,
                counter: Optional[EvalCounter] = None):
    """Metropolis-adjusted bouncy particle step (refresh, DBD proposal, refresh).

    On rejection the position is kept and the post-refresh velocity is
    reversed; the closing half refreshment applies in both cases.
    """
    s = refresh_window(s, 0.5 * delta, lam_r, rng)
    x, v = s.x, s.v
    x_half = x + 0.5 * delta * v
    g = target.gradient(x_half)
    if counter is not None:
        counter.grad += 1
    u = rng.uniform(rng.batch_shape)
    vg = np.sum(v * g, axis=-1)
    reflected = u < -np.expm1(-delta * np.maximum(vg, 0.0))
    v_t = _reflect_where(v, g, reflected)
    x_t = x_half + 0.5 * delta * v_t
    rate_fwd = np.maximum(vg, 0.0)
    rate_bwd = np.maximum(-np.sum(v_t * g, axis=-1), 0.0)
    log_a = target.potential(x) - target.potential(x_t) + delta * (rate_fwd - rate_bwd)
    acc = _accept(rng, log_a)
    a = np.asarray(acc)[..., None]
    s = State(np.where(a, x_t, x), np.where(a, v_t, -v), s.family)
    return refresh_window(s, 0.5 * delta, lam_r, rng), acc


def step_subsampled_zzs(s: State, delta: float, ft: FactorizedTarget, mode: str, rng,
                        counter: Optional[EvalCounter] = None) -> State:
    s = State(s.x + 0.5 * delta * s.v, s.v, s.family)
    s = subsampled_zzs_bounce_window(s, ft, delta, mode, rng, counter)
    return State(s.x + 0.5 * delta * s.v, s.v, s.family)


def step_ula(x: np.ndarray, delta: float, target: Target, rng,
             counter: Optional[EvalCounter] = None) -> np.ndarray:
    g = target.gradient(x)
    if counter is not None:
        counter.grad += 1
    xi = std_normal_vec(rng, x.shape[-1])
    return x - delta * g + math.sqrt(2.0 * delta) * xi


def dbd_zzs_parity_ok(x0, v0, xn, vn, n: int, delta: float, tol: float = 1e-6) -> bool:
    """Lattice invariant of DBD zig-zag: ``(x_n - x_0)/delta + (v_n - v_0)/2 - n`` is even."""
    k = (np.asarray(xn) - x0) / delta + 0.5 * (np.asarray(vn) - v0) - n
    r = np.round(k)
    return bool(np.all(np.abs(k - r) <= tol) and np.all(np.mod(r, 2) == 0))


# ----------------------------------------------------------------------------
# Chain driver
# ----------------------------------------------------------------------------

def _resolve_statistic(statistic):
    if callable(statistic):
        return statistic
    try:
        return STATISTICS[statistic]
    except KeyError:
        raise ValueError(f"unknown statistic {statistic!r}") from None


def run_chain(cfg: SamplerConfig, target: Target, rng, statistic="radius2",
              x0: Optional[np.ndarray] = None, v0: Optional[np.ndarray] = None) -> ChainOutput:
    """Run ``cfg.iters`` steps (or the continuous horizon) and average ``statistic``.

    The statistic is evaluated after every step. When ``x0``/``v0`` are
    omitted the chain starts from the target (or its proxy) and the
    velocity law.
    """
    cfg.validate(target)
    f = _resolve_statistic(statistic)
    if cfg.family == "zzs-cont":
        if x0 is None:
            x0 = sample_target(target, rng)
        if v0 is None:
            v0 = rademacher(rng, target.dim)
        return run_continuous_zzs(target, cfg.horizon, rng, x0, v0, statistic)
    if cfg.family == "ula":
        return _run_ula(cfg, target, rng, f, x0)

    kfam = "bps" if cfg.family == "bps" else "zzs"
    s = init_state(target, kfam, rng)
    if x0 is not None:
        s.x = np.broadcast_to(np.asarray(x0, dtype=float), s.x.shape).copy()
    if v0 is not None:
        s.v = np.broadcast_to(np.asarray(v0, dtype=float), s.v.shape).copy()
    start = s.copy()
    counter = EvalCounter()
    stat = OnlineStat(rng.batch_shape)
    rejections = np.zeros(rng.batch_shape, dtype=np.int64)
    samples = [] if cfg.record else None
    spec = parse_scheme(cfg.scheme if cfg.family != "zzs-sub" else "DBD", cfg.delta)
    ft = None
    if cfg.family == "zzs-sub":
        if rng.batch_shape:
            raise ValueError("subsampled zig-zag runs one chain per stream")
        ft = target if isinstance(target, FactorizedTarget) else SingleFactor(target)

    for n in range(1, cfg.iters + 1):
        if cfg.family == "zzs-sub":
            s = step_subsampled_zzs(s, cfg.delta, ft, cfg.subsample, rng, counter)
        elif cfg.metropolis:
            if kfam == "zzs":
                s, acc = step_mh_zzs(s, cfg.delta, target, rng, counter)
            else:
                s, acc = step_mh_bps(s, cfg.delta, cfg.lambda_r, target, rng, counter)
            rejections += ~np.asarray(acc)
        else:
            s = apply_scheme(s, spec, target, cfg.lambda_r, rng, counter)
        stat.push(f(s.x))
        if cfg.check_parity and not dbd_zzs_parity_ok(start.x, start.v, s.x, s.v, n, cfg.delta):
            raise ParityError(f"lattice parity broken at iteration {n}")
        if samples is not None and n % cfg.thin == 0:
            samples.append(np.concatenate([s.x, s.v], axis=-1))
        if n % 1024 == 0 and not np.all(np.isfinite(s.x)):
            raise StabilityError(f"non-finite position at iteration {n}")

    out = ChainOutput(stat, cfg.iters, grad_evals=counter.grad, final=s)
    if cfg.metropolis:
        out.proposals = cfg.iters
        out.rejections = rejections if rng.batch_shape else int(rejections)
    if samples is not None:
        out.samples = np.stack(samples) if samples else np.empty((0,) + s.x.shape[:-1] + (2 * target.dim,))
    return out


def _run_ula(cfg, target, rng, f, x0):
    x = sample_target(target, rng) if x0 is None else np.broadcast_to(
        np.asarray(x0, dtype=float), rng.batch_shape + (target.dim,)).copy()
    counter = EvalCounter()
    stat = OnlineStat(rng.batch_shape)
    samples = [] if cfg.record else None
    for n in range(1, cfg.iters + 1):
        x = step_ula(x, cfg.delta, target, rng, counter)
        if not np.all(np.linalg.norm(x, axis=-1) <= ULA_GUARD):
            raise StabilityError(f"ULA diverged (|x| > {ULA_GUARD:g}) at iteration {n}")
        stat.push(f(x))
        if samples is not None and n % cfg.thin == 0:
            samples.append(np.concatenate([x, np.zeros_like(x)], axis=-1))
    out = ChainOutput(stat, cfg.iters, grad_evals=counter.grad,
                      final=State(x, np.zeros_like(x), "zzs"))
    if samples is not None:
        out.samples = np.stack(samples)
    return out


# ----------------------------------------------------------------------------
# Continuous-time zig-zag by thinning
# ----------------------------------------------------------------------------

def _first_arrival(a: np.ndarray, b: float, e: np.ndarray) -> np.ndarray:
    """Solve ``a t + b t^2 / 2 = e`` for ``t >= 0`` (``inf`` when both rates vanish)."""
    if b > 0:
        return 2.0 * e / (a + np.sqrt(a * a + 2.0 * b * e))
    with np.errstate(divide="ignore"):
        return np.where(a > 0, e / np.where(a > 0, a, 1.0), np.inf)


def run_continuous_zzs(target: Target, horizon: float, rng, x0, v0,
                       statistic="radius2") -> ChainOutput:
    """Exact zig-zag process on ``[0, horizon]`` with affine rate bounds.

    Rates are bounded by ``(v_i d_i psi(x))_+ + t L sqrt(d)`` along each
    segment; each proposal costs one gradient evaluation. Returns the exact
    time average of ``|x|^2`` along the piecewise-linear path.
    """
    if statistic not in ("radius2", "x2"):
        raise ValueError("continuous zig-zag time-averages the squared radius only")
    if rng.batch_shape:
        raise ValueError("continuous zig-zag runs one chain per stream")
    L = target.grad_lipschitz
    if L is None:
        raise ValueError("continuous zig-zag requires a gradient Lipschitz bound")
    x = np.array(x0, dtype=float).reshape(target.dim)
    v = np.array(v0, dtype=float).reshape(target.dim)
    d = target.dim
    b = L * math.sqrt(d)
    g = target.gradient(x)
    n_grad = 1
    t = 0.0
    integral = 0.0
    events = 0
    while True:
        a = np.maximum(v * g, 0.0)
        e = -np.log(rng.uniform((d,)))
        taus = _first_arrival(a, b, e)
        i = int(np.argmin(taus))
        tau = float(taus[i])
        step = min(tau, horizon - t)
        integral += (x @ x) * step + (x @ v) * step ** 2 + (v @ v) * step ** 3 / 3.0
        if t + tau >= horizon:
            x = x + step * v
            t = horizon
            break
        x = x + tau * v
        t += tau
        g = target.gradient(x)
        n_grad += 1
        bound = a[i] + tau * b
        rate = max(v[i] * g[i], 0.0)
        ratio = rate / bound if bound > 0 else (0.0 if rate == 0 else math.inf)
        if ratio > 1.0 + BOUND_SLACK:
            raise BoundViolation(
                f"rate {rate:.6g} exceeds bound {bound:.6g} for component {i} at time {t:.6g}")
        if rng.uniform() < ratio:
            v[i] = -v[i]
            events += 1
    stat = OnlineStat()
    avg = integral / horizon
    stat.push(avg)
    return ChainOutput(stat, 0, grad_evals=n_grad, final=State(x, v, "zzs"),
                       time_average=avg, horizon=horizon, events=events)


# ----------------------------------------------------------------------------
# Exact kernels on a lattice (one dimension)
# ----------------------------------------------------------------------------

def mh_zzs_grid_kernel(target: Target1D, x0: float, delta: float, n_max: int):
    """Transition matrix of Metropolis-adjusted DBD zig-zag on ``x0 + delta Z``.

    States are ``(n, w)`` with ``|n| <= n_max`` and ``w = ±1``, indexed as
    ``2 (n + n_max) + (w < 0)``. Moves leaving the window are dropped, so
    rows at the boundary may sum to less than one.

    Returns:
        ``(P, y, w)``: the matrix and the position/velocity of each state.
    """
    m = 2 * n_max + 1
    ys = x0 + delta * np.arange(-n_max, n_max + 1)
    y = np.repeat(ys, 2)
    w = np.tile([1.0, -1.0], m)
    P = np.zeros((2 * m, 2 * m))
    for k in range(2 * m):
        st = State(np.array([y[k]]), np.array([w[k]]), "zzs")
        x_half = st.x + 0.5 * delta * st.v
        g = target.gradient(x_half)
        p_flip = float(zzs_flip_probability(st.v, g, delta)[0])
        x_t = x_half + 0.5 * delta * st.v
        log_a = float(mh_zzs_log_acceptance(target, st.x, x_t, st.v, np.array([False]), g, delta))
        acc = min(1.0, math.exp(min(log_a, 0.0)))
        rev = k ^ 1
        nxt = k + (2 if w[k] > 0 else -2)
        move = (1.0 - p_flip) * acc
        if 0 <= nxt < 2 * m:
            P[k, nxt] += move
        # A flipped proposal returns to x with -v and is always accepted;
        # a rejected forward proposal lands on the same state.
        P[k, rev] += p_flip + (1.0 - p_flip) * (1.0 - acc)
    return P, y, w


def skew_detailed_balance_residual(P: np.ndarray, mu: np.ndarray) -> float:
    """``max |mu(z) P(z, z') - mu(z') P(flip z', flip z)|`` with velocity flip."""
    flip = np.arange(P.shape[0]) ^ 1
    lhs = mu[:, None] * P
    rhs = mu[None, :] * P[np.ix_(flip, flip)].T
    return float(np.max(np.abs(lhs - rhs)))
