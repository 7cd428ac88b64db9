"""Splitting building blocks for zig-zag (ZZS) and bouncy particle (BPS) samplers.

A splitting scheme is a palindromic word over three operators:

* ``D``  free transport, ``x <- x + t v``;
* ``B``  bounce window: jump events of the velocity at the frozen position;
* ``R``  refreshment window: resample ``v`` from its invariant law.

The middle letter acts for the full step ``delta`` and every other letter
for ``delta / 2``. States hold arrays of shape ``(d,)`` for one chain or
``(R, d)`` for ``R`` chains stepped in lockstep; every random draw is
taken with a fixed shape so both layouts consume identical streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .targets import FactorizedTarget, ParticleChain, Target
from .util import InvariantViolation, exp_draw, rademacher, unit_sphere, uniform_index

__all__ = [
    "State",
    "SchemeSpec",
    "SchemeError",
    "EvalCounter",
    "JumpGuardError",
    "parse_scheme",
    "drift",
    "reflect",
    "refresh_window",
    "zzs_flip_probability",
    "zzs_bounce_window",
    "bps_bounce_window",
    "subsampled_zzs_bounce_window",
    "apply_scheme",
    "FAMILIES",
    "SCHEME_NAMES",
]

FAMILIES = ("zzs", "bps")
SCHEME_NAMES = ("DBD", "BDB", "RDBDR", "DBRBD", "DRBRD", "BDRDB")
JUMP_GUARD = 1000


class SchemeError(ValueError):
    """Malformed splitting word."""


class JumpGuardError(InvariantViolation):
    """Too many velocity jumps inside one bounce window."""


@dataclass
class State:
    x: np.ndarray
    v: np.ndarray
    family: str = "zzs"

    def copy(self) -> "State":
        return State(self.x.copy(), self.v.copy(), self.family)


@dataclass
class EvalCounter:
    """Running count of gradient evaluations (full gradients or force terms)."""

    grad: int = 0


@dataclass(frozen=True)
class SchemeSpec:
    tokens: tuple[str, ...]
    durations: tuple[float, ...]
    delta: float

    @property
    def name(self) -> str:
        return "".join(self.tokens)


def parse_scheme(word: str, delta: float) -> SchemeSpec:
    """Validate a splitting word and attach window lengths.

    Raises:
        SchemeError: unknown letter (with its position), even length,
            length above 5, non-palindrome, or an operator whose windows
            do not add up to ``delta``.
    """
    if not delta > 0:
        raise SchemeError(f"step size must be positive, got {delta}")
    word = word.strip().upper()
    for pos, ch in enumerate(word):
        if ch not in "DBR":
            raise SchemeError(f"unknown operator {ch!r} at position {pos} in {word!r}")
    n = len(word)
    if n == 0 or n % 2 == 0 or n > 5:
        raise SchemeError(f"scheme {word!r} must have odd length 1, 3 or 5")
    for pos in range(n // 2):
        if word[pos] != word[n - 1 - pos]:
            raise SchemeError(
                f"scheme {word!r} is not a palindrome: position {pos} is {word[pos]!r} "
                f"but position {n - 1 - pos} is {word[n - 1 - pos]!r}"
            )
    mid = n // 2
    durations = tuple(delta if k == mid else delta / 2 for k in range(n))
    for op in set(word):
        total = sum(t for ch, t in zip(word, durations) if ch == op)
        if abs(total - delta) > 1e-12 * delta:
            raise SchemeError(f"operator {op!r} acts for {total / delta:g} steps in {word!r}")
    if abs(sum(durations) - delta * (n + 1) / 2) > 1e-12 * delta:
        raise SchemeError("window lengths inconsistent")
    return SchemeSpec(tuple(word), durations, float(delta))


# ----------------------------------------------------------------------------
# Elementary operators on arrays
# ----------------------------------------------------------------------------

def drift(s: State, t: float) -> State:
    return State(s.x + t * s.v, s.v, s.family)


def reflect(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Mirror ``v`` in the hyperplane orthogonal to ``g`` (row-wise)."""
    gg = np.sum(g * g, axis=-1, keepdims=True)
    if np.any(gg == 0):
        raise ValueError("cannot reflect against a zero gradient")
    return v - 2.0 * np.sum(v * g, axis=-1, keepdims=True) / gg * g


def _reflect_where(v, g, mask):
    """Reflect rows selected by ``mask``; other rows (and zero gradients) pass."""
    gg = np.sum(g * g, axis=-1, keepdims=True)
    safe = np.where(gg > 0, gg, 1.0)
    refl = v - 2.0 * np.sum(v * g, axis=-1, keepdims=True) / safe * g
    return np.where(np.asarray(mask)[..., None] & (gg > 0), refl, v)


def _jump_prob(rate, t):
    return -np.expm1(-t * rate)


def refresh_window(s: State, t: float, lam_r: float, rng) -> State:
    """Refresh with probability ``1 - exp(-lam_r t)`` from the velocity law.

    A candidate velocity is always drawn so that the number of uniforms
    consumed does not depend on the outcome.
    """
    d = s.v.shape[-1]
    u = rng.uniform(rng.batch_shape)
    fresh = unit_sphere(rng, d) if s.family == "bps" else rademacher(rng, d)
    hit = u < _jump_prob(lam_r, t)
    v = np.where(np.asarray(hit)[..., None], fresh, s.v)
    return State(s.x, v, s.family)


def zzs_flip_probability(v: np.ndarray, g: np.ndarray, t: float) -> np.ndarray:
    """Per-component flip probabilities ``1 - exp(-t (v_i g_i)_+)``."""
    return _jump_prob(np.maximum(v * g, 0.0), t)


def zzs_bounce_window(s: State, target: Target, t: float, rng,
                      counter: Optional[EvalCounter] = None) -> State:
    g = target.gradient(s.x)
    if counter is not None:
        counter.grad += 1
    u = rng.uniform(s.v.shape)
    v = np.where(u < zzs_flip_probability(s.v, g, t), -s.v, s.v)
    return State(s.x, v, s.family)


def bps_bounce_window(s: State, target: Target, t: float, rng,
                      counter: Optional[EvalCounter] = None) -> State:
    g = target.gradient(s.x)
    if counter is not None:
        counter.grad += 1
    u = rng.uniform(rng.batch_shape)
    rate = np.maximum(np.sum(s.v * g, axis=-1), 0.0)
    v = _reflect_where(s.v, g, u < _jump_prob(rate, t))
    return State(s.x, v, s.family)


# ----------------------------------------------------------------------------
# Subsampled zig-zag bounce window (single chain only)
# ----------------------------------------------------------------------------

def _fixed_j_window(s, ft: FactorizedTarget, t, rng, counter):
    j = uniform_index(rng, ft.num_factors)
    g = ft.factor_gradient(j, s.x)
    if counter is not None:
        counter.grad += 1
    v = s.v.copy()
    d = v.size
    elapsed = np.zeros(d)
    active = np.ones(d, dtype=bool)
    jumps = np.zeros(d, dtype=np.int64)
    while active.any():
        tau = exp_draw(rng, np.maximum(v * g, 0.0))
        fire = active & (elapsed + tau < t)
        v[fire] = -v[fire]
        elapsed[fire] += tau[fire]
        jumps += fire
        if jumps.max() > JUMP_GUARD:
            raise JumpGuardError(f"more than {JUMP_GUARD} jumps in one window")
        active = fire
    return State(s.x, v, s.family)


def _per_event_j_window(s, pc: ParticleChain, t, rng, counter):
    # Two superposed clocks per component: the exact chain force with rate
    # (v_i F_i)_+, and a mean-field clock of constant rate a that fires a
    # flip with probability (v_i a W'(x_i - x_J))_+ / a for a fresh J.
    x = s.x
    v = s.v.copy()
    n = v.size
    a = pc.meanfield_bound
    f = pc.chain_force(x)
    n_evals = n
    elapsed = np.zeros(n)
    active = np.ones(n, dtype=bool)
    jumps = np.zeros(n, dtype=np.int64)
    rate_m = np.full(n, a)
    while active.any():
        tau_c = exp_draw(rng, np.maximum(v * f, 0.0))
        tau_m = exp_draw(rng, rate_m)
        jidx = uniform_index(rng, n, (n,))
        u = rng.uniform((n,))
        tau = np.minimum(tau_c, tau_m)
        fire = active & (elapsed + tau < t)
        chain_fire = fire & (tau_c <= tau_m)
        mf_fire = fire & ~chain_fire
        flip = chain_fire.copy()
        if mf_fire.any():
            idx = np.flatnonzero(mf_fire)
            force = pc.meanfield_force(idx, jidx[idx], x)
            n_evals += idx.size
            flip[idx] = u[idx] * a < np.maximum(v[idx] * force, 0.0)
        v[flip] = -v[flip]
        elapsed[fire] += tau[fire]
        jumps += fire
        if jumps.max() > JUMP_GUARD:
            raise JumpGuardError(f"more than {JUMP_GUARD} clock events in one window")
        active = fire
    if counter is not None:
        counter.grad += n_evals
    return State(x, v, s.family)


def subsampled_zzs_bounce_window(s: State, ft: FactorizedTarget, t: float, mode: str, rng,
                                 counter: Optional[EvalCounter] = None) -> State:
    """Zig-zag bounce window driven by unbiased gradient estimates.

    ``mode="fixed-J"`` draws one factor index per window and runs each
    component's jump process with that factor's frozen rates.
    ``mode="per-event-J"`` (particle chains) keeps the chain force exact
    and thins a constant-rate clock for the mean-field part, with a new
    partner index at every clock event.
    """
    if s.x.ndim != 1:
        raise ValueError("subsampled windows run one chain at a time")
    if mode == "fixed-J":
        return _fixed_j_window(s, ft, t, rng, counter)
    if mode == "per-event-J":
        if not isinstance(ft, ParticleChain):
            raise ValueError("per-event-J mode needs a particle chain target")
        return _per_event_j_window(s, ft, t, rng, counter)
    raise ValueError(f"unknown subsampling mode {mode!r}")


# ----------------------------------------------------------------------------
# Scheme application
# ----------------------------------------------------------------------------

def apply_scheme(s: State, spec: SchemeSpec, target: Target, lam_r: float, rng,
                 counter: Optional[EvalCounter] = None) -> State:
    """One splitting step: apply each window of ``spec`` in order."""
    bounce = bps_bounce_window if s.family == "bps" else zzs_bounce_window
    for tok, t in zip(spec.tokens, spec.durations):
        if tok == "D":
            s = State(s.x + t * s.v, s.v, s.family)
        elif tok == "B":
            s = bounce(s, target, t, rng, counter)
        else:
            s = refresh_window(s, t, lam_r, rng)
    return s
