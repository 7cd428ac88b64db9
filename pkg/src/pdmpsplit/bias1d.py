"""Second-order bias of BPS splitting schemes in one dimension.

In one dimension the velocity lives on ``{-1, +1}`` and the invariant
measure of a splitting scheme with step ``delta`` expands as

    mu_delta(x, v) = pi(x) / 2 * (1 + delta^2 f2(x, v) + O(delta^3)),

where ``f2`` solves a first-order linear system driven by a source
``h(x, v)`` specific to each scheme. This module evaluates ``h``, solves
for ``f2`` by quadrature, provides the known closed forms for three
targets, and builds the exact invariant lattice measure of RDBDR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.interpolate import CubicSpline

from .kernels import parse_scheme
from .targets import Target1D

__all__ = [
    "BIAS_SCHEMES",
    "QuadConfig",
    "F2Solution",
    "TailMassError",
    "h_function",
    "solve_f2",
    "closed_form_f2",
    "tv_second_order",
    "GridMeasure",
    "psi_delta_grid",
    "grid_invariance_residual",
]

BIAS_SCHEMES = ("DBRBD", "BDRDB", "RDBDR", "DRBRD")
_PSI_CLIP = 500.0


class TailMassError(ValueError):
    """Quadrature window misses too much probability mass."""


def _pos(a):
    return np.maximum(a, 0.0)


def h_function(scheme: str, target: Target1D, lam_r: float, x, v) -> np.ndarray:
    """Source term ``h(x, v)`` of the second-order correction.

    ``v`` is ``+1`` or ``-1`` (scalar or array broadcastable with ``x``).
    """
    scheme = parse_scheme(scheme, 1.0).name
    if scheme not in BIAS_SCHEMES:
        raise ValueError(f"no second-order source for scheme {scheme!r}")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    p1, p2, p3 = target.psi1(x), target.psi2(x), target.psi3(x)
    s = v * p1
    lam = float(lam_r)
    b = 0.5 * v * p3
    if scheme == "RDBDR":
        return b / 12.0
    if scheme == "DRBRD":
        d = 1.5 * lam * (p1 * p1 + s * (3.0 * _pos(-s) + _pos(s)))
        return (d + b + 1.5 * lam * lam * s) / 12.0
    a = 1.5 * lam * (p1 * p1 + 2.0 * s * _pos(-s))
    if scheme == "DBRBD":
        return (a + b) / 12.0
    c = 3.0 * _pos(-s) * (p1 * p1 - 2.0 * p2) - v * p3
    return (-a + c) / 12.0


# ----------------------------------------------------------------------------
# Quadrature solver
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadConfig:
    """Quadrature grid for :func:`solve_f2`.

    Light-tailed targets use ``x`` itself on ``[-x_max, x_max]``, trimmed
    where ``psi - min psi`` exceeds 500. Cauchy targets use
    ``x = gamma sinh(t)`` with ``|t| <= t_max``, which turns the power
    tails into exponential ones. ``n_points`` is forced odd so that 0 is a
    node.
    """

    x_max: float = 12.0
    t_max: float = 24.0
    n_points: int = 400_001
    tail_tol: float = 1e-8


@dataclass
class F2Solution:
    x: np.ndarray
    f2_plus: np.ndarray
    f2_minus: np.ndarray
    g: np.ndarray
    weight: np.ndarray
    du: float
    scheme: str
    lam_r: float
    f2_plus_at_0: float
    source_total: float
    tail_mass: float

    def __post_init__(self):
        self._sp = CubicSpline(self.x, self.f2_plus)
        self._sm = CubicSpline(self.x, self.f2_minus)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < self.x[0]) or np.any(x > self.x[-1]):
            raise ValueError("evaluation point outside the quadrature window")
        return x

    def plus(self, x):
        return self._sp(self._check(x))

    def minus(self, x):
        return self._sm(self._check(x))

    def __call__(self, x, v):
        v = np.asarray(v)
        return np.where(v > 0, self.plus(x), self.minus(x))


def _grid(target: Target1D, quad: QuadConfig):
    n = quad.n_points | 1
    if target.kind == "cauchy":
        u = np.linspace(-quad.t_max, quad.t_max, n)
        x = target.gamma * np.sinh(u)
        jac = target.gamma * np.cosh(u)
    else:
        u = np.linspace(-quad.x_max, quad.x_max, n)
        psi = target.psi(u)
        keep = psi - psi.min() <= _PSI_CLIP
        idx = np.flatnonzero(keep)
        lo, hi = idx[0], idx[-1]
        # Keep the window symmetric in index so 0 stays the centre node.
        c = n // 2
        half = min(c - lo, hi - c)
        u = u[c - half:c + half + 1]
        x = u
        jac = np.ones_like(u)
    return u, x, jac


def _cumulative_from(y, du, centre):
    """``int_{u_centre}^{u_k} y`` at every node, by composite Simpson."""
    out = np.zeros_like(y)
    right = y[centre:]
    left = y[:centre + 1][::-1]
    out[centre:] = cumulative_simpson(right, dx=du, initial=0.0)
    out[:centre + 1] = -cumulative_simpson(left, dx=du, initial=0.0)[::-1]
    return out


def solve_f2(scheme: str, target: Target1D, lam_r: float,
             quad: QuadConfig = QuadConfig()) -> F2Solution:
    """Solve for ``f2(., +1)`` and ``f2(., -1)`` by quadrature.

    With ``h_s = h(., +1) + h(., -1)``:

    * ``g(x) = e^{psi(x)} int_{-inf}^x h_s e^{-psi}`` equals
      ``f2(x, -1) - f2(x, +1)``;
    * ``f2(x, +1) = f2(0, +1) + int_0^x ((lam_r / 2 + (-psi')_+) g - h(., +1))``;
    * ``f2(0, +1)`` is fixed by ``int (f2(., +1) + f2(., -1)) pi = 0``.

    ``g`` is integrated from the left below the mode and from the right
    above it, so neither side subtracts nearly equal numbers.
    """
    scheme = parse_scheme(scheme, 1.0).name
    u, x, jac = _grid(target, quad)
    du = u[1] - u[0]
    centre = u.size // 2
    tail = target.tail_mass(float(x[0]), float(x[-1]))
    if tail > quad.tail_tol:
        raise TailMassError(
            f"mass {tail:.3g} outside [{x[0]:.4g}, {x[-1]:.4g}] exceeds {quad.tail_tol:g}")

    psi = target.psi(x)
    psi = psi - psi.min()
    w = np.exp(-psi)
    hp = h_function(scheme, target, lam_r, x, 1.0)
    hm = h_function(scheme, target, lam_r, x, -1.0)
    hs_w = (hp + hm) * w * jac

    total = float(simpson(hs_w, dx=du))
    from_left = cumulative_simpson(hs_w, dx=du, initial=0.0)
    from_right = -cumulative_simpson(hs_w[::-1], dx=du, initial=0.0)[::-1]
    mode = int(np.argmin(psi))
    integral = np.where(np.arange(x.size) <= mode, from_left, from_right)
    g = np.exp(psi) * integral

    p1 = target.psi1(x)
    drive = ((0.5 * lam_r + _pos(-p1)) * g - hp) * jac
    k = _cumulative_from(drive, du, centre)

    wj = w * jac
    z = float(simpson(wj, dx=du))
    f0 = -float(simpson((0.5 * g + k) * wj, dx=du)) / z
    fp = f0 + k
    fm = fp + g
    return F2Solution(x=x, f2_plus=fp, f2_minus=fm, g=g, weight=wj / z, du=du, scheme=scheme,
                      lam_r=float(lam_r), f2_plus_at_0=f0, source_total=total, tail_mass=tail)


COMPAT_TOL = 1e-6


def tv_second_order(sol: F2Solution, delta: float) -> float:
    """Leading total-variation gap ``delta^2 / 4 * int |f2(., +1) + f2(., -1)| pi``.

    The supremum over sets of ``|int_A s pi|`` equals ``int |s| pi / 2``
    only when ``int s pi = 0``; a solution violating that is rejected.
    """
    if delta < 0:
        raise ValueError("step size must be non-negative")
    s = sol.f2_plus + sol.f2_minus
    compat = float(simpson(s * sol.weight, dx=sol.du))
    if abs(compat) > COMPAT_TOL:
        raise ValueError(f"f2 violates the compatibility condition (int = {compat:.3g})")
    val = float(simpson(np.abs(s) * sol.weight, dx=sol.du))
    return 0.25 * delta * delta * val


# ----------------------------------------------------------------------------
# Closed forms
# ----------------------------------------------------------------------------

def _gauss_f2(scheme, s2, lam, x, v):
    s = math.sqrt(s2)
    c = 2.0 * math.sqrt(2.0) / (s * math.sqrt(math.pi))
    ax3 = np.abs(x) ** 3
    if scheme == "DBRBD":
        return lam / 24.0 * (c - ax3 / s2 ** 2)
    if scheme == "BDRDB":
        wrong_side = np.where(v > 0, x < 0, x > 0)
        return 1.0 / (8.0 * s2) - x * x / (4.0 * s2 ** 2) * wrong_side
    if scheme == "RDBDR":
        return np.zeros(np.broadcast(x, v).shape)
    return lam / 12.0 * (c - ax3 / s2 ** 2) + lam * lam / 16.0 * (1.0 - x * x / s2)


def _quartic_f2(scheme, lam, x, v):
    g34, g14, g54 = math.gamma(0.75), math.gamma(0.25), math.gamma(1.25)
    r = g34 / g14
    x7 = np.abs(x) ** 7
    if scheme == "DBRBD":
        return lam / 7.0 * (1.0 / (2.0 * g54) - 2.0 * x7) + 0.5 * (r - x * x)
    if scheme == "BDRDB":
        wrong_side = np.where(v > 0, x < 0, x >= 0)
        return 0.5 * r + x * x - 4.0 * x ** 6 * wrong_side
    if scheme == "RDBDR":
        return 0.5 * r - 0.5 * x * x + 0.0 * v
    return (lam / 7.0 * (1.0 / g54 - 4.0 * x7) + 0.5 * (r - x * x)
            + lam * lam / 8.0 * (0.25 - x ** 4))


def _cauchy_f2(scheme, gam, lam, x, v):
    g2 = gam * gam
    r2 = g2 + x * x
    third = (1.0 / (4.0 * g2) + (x * x - g2) / r2 ** 2) / 12.0
    bracket = math.pi / 4.0 - np.abs(np.arctan(x / gam)) + gam * np.abs(x) / r2 - 1.0 / math.pi
    if scheme == "DBRBD":
        return lam / (4.0 * gam) * bracket + third
    if scheme == "RDBDR":
        return third + 0.0 * v
    if scheme == "DRBRD":
        return (lam / (2.0 * gam) * bracket + third
                + lam * lam / 8.0 * (math.log(4.0) - np.log1p(x * x / g2)))
    denom = 48.0 * g2 * r2 ** 2
    same_side = (x * x - 3.0 * g2) ** 2 / denom
    opposite = (x ** 4 - 54.0 * x * x * g2 + 9.0 * g2 * g2) / denom
    return np.where(x * v >= 0, same_side, opposite)


def closed_form_f2(scheme: str, target: Target1D, lam_r: float, x, v) -> np.ndarray:
    """Known analytic ``f2`` for the 1D Gaussian, quartic and Cauchy targets."""
    scheme = parse_scheme(scheme, 1.0).name
    if scheme not in BIAS_SCHEMES:
        raise ValueError(f"no closed form for scheme {scheme!r}")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    lam = float(lam_r)
    if target.kind == "gaussian":
        out = _gauss_f2(scheme, target.sigma2, lam, x, v)
    elif target.kind == "quartic":
        out = _quartic_f2(scheme, lam, x, v)
    elif target.kind == "cauchy":
        out = _cauchy_f2(scheme, target.gamma, lam, x, v)
    else:
        raise ValueError(f"no closed forms for target kind {target.kind!r}")
    return np.broadcast_to(out, np.broadcast(x, v).shape).astype(float)


# ----------------------------------------------------------------------------
# Exact lattice measure of RDBDR
# ----------------------------------------------------------------------------

@dataclass
class GridMeasure:
    """Velocity-symmetric measure ``∝ exp(-psi_delta)`` on ``x0 + delta {-n..n}``."""

    x0: float
    delta: float
    n_max: int
    y: np.ndarray
    psi_delta: np.ndarray
    prob: np.ndarray


def psi_delta_grid(target: Target1D, x0: float, delta: float, n_max: int) -> GridMeasure:
    """Discrete potential of the RDBDR invariant lattice measure.

    ``psi_delta(x0) = psi(x0)`` and each step of ``w delta`` adds
    ``w delta psi'(midpoint)``, i.e. a midpoint rule for ``psi``.
    """
    if n_max < 1 or not delta > 0:
        raise ValueError("need n_max >= 1 and delta > 0")
    k = np.arange(1, n_max + 1)
    up = delta * np.cumsum(target.psi1(x0 + (k - 0.5) * delta))
    down = -delta * np.cumsum(target.psi1(x0 - (k - 0.5) * delta))
    p0 = float(target.psi(x0))
    psi_d = np.concatenate([p0 + down[::-1], [p0], p0 + up])
    y = x0 + delta * np.arange(-n_max, n_max + 1)
    w = np.exp(-(psi_d - psi_d.min()))
    return GridMeasure(float(x0), float(delta), int(n_max), y, psi_d, w / w.sum())


def _rdbdr_grid_kernel(target: Target1D, gm: GridMeasure, lam_r: float):
    """Exact RDBDR transition matrix on the lattice, states ``2 n + (w < 0)``.

    Returns the matrix and, per state, the probability of leaving the window.
    """
    delta = gm.delta
    m = gm.y.size
    q = 0.5 * -math.expm1(-lam_r * delta / 2)     # half refresh flips w w.p. q
    P = np.zeros((2 * m, 2 * m))
    leak = np.zeros(2 * m)

    def inner(k):
        # D(delta/2) B(delta) D(delta/2) from state k: {target state: prob}
        n, w = k // 2, (1.0 if k % 2 == 0 else -1.0)
        mid = gm.y[n] + 0.5 * delta * w
        p_flip = float(-np.expm1(-delta * max(w * float(target.psi1(mid)), 0.0)))
        stay = 2 * n + (1 if w < 0 else 0)
        return [(stay ^ 1, p_flip), (2 * (n + int(w)) + (1 if w < 0 else 0), 1.0 - p_flip)]

    for k in range(2 * m):
        for k1, p1 in ((k, 1.0 - q), (k ^ 1, q)):
            for k2, p2 in inner(k1):
                if not 0 <= k2 < 2 * m:
                    leak[k] += p1 * p2
                    continue
                for k3, p3 in ((k2, 1.0 - q), (k2 ^ 1, q)):
                    P[k, k3] += p1 * p2 * p3
    return P, leak


def grid_invariance_residual(gm: GridMeasure, target: Target1D, lam_r: float):
    """Check that ``gm`` is invariant for RDBDR on its lattice.

    Returns ``(residual, leakage)``: the L1 gap between ``mu`` and ``mu P``
    over states whose predecessors all lie inside the window, and the
    mass sent past the window boundary in one step.
    """
    P, leak = _rdbdr_grid_kernel(target, gm, lam_r)
    mu = np.repeat(gm.prob, 2) / 2.0
    moved = mu @ P
    # The outermost two sites can receive mass from outside the window.
    interior = np.zeros(mu.size, dtype=bool)
    interior[4:-4] = True
    residual = float(np.sum(np.abs(moved - mu)[interior]))
    leakage = float(mu @ leak)
    return residual, leakage
