"""Target densities ``pi(x) ∝ exp(-psi(x))`` with gradients.

All ``potential``/``gradient`` methods accept a single point of shape
``(d,)`` or a batch of shape ``(R, d)``; potentials return ``()`` or
``(R,)`` accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lapack
from scipy.special import gammaincc
from scipy.stats import norm

__all__ = [
    "Target",
    "Target1D",
    "GaussianSpec",
    "GaussianTarget",
    "Gaussian1D",
    "Quartic1D",
    "Cauchy1D",
    "FactorizedTarget",
    "SingleFactor",
    "ParticleChain",
    "make_gaussian",
    "make_target",
    "TARGET_NAMES",
]


class Target:
    """Base class: potential, gradient and an optional gradient bound."""

    dim: int
    grad_lipschitz: Optional[float] = None

    def potential(self, x: np.ndarray):
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def partial(self, i: int, x: np.ndarray):
        return self.gradient(x)[..., i]

    def describe(self) -> dict:
        return {"name": type(self).__name__, "dim": self.dim}


# ----------------------------------------------------------------------------
# Gaussians
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianSpec:
    """Zero-mean Gaussian covariance description.

    ``structure`` is ``"equicorrelated"`` (unit variances, off-diagonal
    ``rho``) or ``"diagonal"`` (first variance ``sigma2``, others 1).
    """

    dim: int
    structure: str
    rho: float = 0.0
    sigma2: float = 1.0

    def covariance(self) -> np.ndarray:
        d = self.dim
        if d < 1:
            raise ValueError("dimension must be >= 1")
        if self.structure == "equicorrelated":
            cov = np.full((d, d), float(self.rho))
            np.fill_diagonal(cov, 1.0)
        elif self.structure == "diagonal":
            if not self.sigma2 > 0:
                raise ValueError("sigma2 must be positive")
            cov = np.eye(d)
            cov[0, 0] = float(self.sigma2)
        else:
            raise ValueError(f"unknown covariance structure {self.structure!r}")
        return cov


def _cholesky_lower(cov: np.ndarray) -> np.ndarray:
    c, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info > 0:
        raise ValueError(
            f"covariance is not positive definite: Cholesky failed at pivot {info} "
            f"(leading minor of order {info})"
        )
    if info < 0:
        raise ValueError(f"invalid covariance argument {-info}")
    return np.tril(c)


class GaussianTarget(Target):
    """``psi(x) = x' P x / 2`` with precision ``P`` precomputed once."""

    def __init__(self, spec: GaussianSpec):
        self.spec = spec
        self.dim = spec.dim
        self.cov = spec.covariance()
        self.chol = _cholesky_lower(self.cov)
        linv = lapack.dtrtri(self.chol, lower=1)[0]
        self.prec = linv.T @ linv
        self.prec = 0.5 * (self.prec + self.prec.T)
        self.grad_lipschitz = float(np.linalg.eigvalsh(self.prec)[-1])

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum((x @ self.prec) * x, axis=-1)

    def gradient(self, x):
        return np.asarray(x, dtype=float) @ self.prec

    def sample(self, z: np.ndarray) -> np.ndarray:
        """Map standard normals ``z`` (shape ``(..., d)``) to draws of the target."""
        return z @ self.chol.T

    def second_moment(self) -> float:
        return float(np.trace(self.cov))

    def describe(self):
        return {"name": "gaussian", "dim": self.dim, "structure": self.spec.structure,
                "rho": self.spec.rho, "sigma2": self.spec.sigma2}


def make_gaussian(spec: GaussianSpec) -> GaussianTarget:
    return GaussianTarget(spec)


# ----------------------------------------------------------------------------
# One-dimensional targets with closed-form derivatives
# ----------------------------------------------------------------------------

class Target1D(Target):
    """Scalar target with ``psi', psi'', psi'''`` available in closed form.

    ``potential`` and ``gradient`` follow the ``(..., 1)`` convention of
    :class:`Target`; ``psi``/``psi1``/``psi2``/``psi3`` act on plain arrays.
    """

    dim = 1
    kind: str = ""

    def psi(self, x):
        raise NotImplementedError

    def psi1(self, x):
        raise NotImplementedError

    def psi2(self, x):
        raise NotImplementedError

    def psi3(self, x):
        raise NotImplementedError

    def potential(self, x):
        return self.psi(np.asarray(x, dtype=float)[..., 0])

    def gradient(self, x):
        return self.psi1(np.asarray(x, dtype=float))

    def tail_mass(self, lo: float, hi: float) -> float:
        """Probability of ``(-inf, lo) ∪ (hi, inf)``."""
        raise NotImplementedError

    def mode(self) -> float:
        return 0.0

    def second_moment(self) -> float:
        raise NotImplementedError

    def inverse_cdf(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def param(self) -> Optional[float]:
        return None


class Gaussian1D(Target1D):
    """``psi(x) = x^2 / (2 sigma^2)``."""

    kind = "gaussian"

    def __init__(self, sigma2: float = 1.0):
        if not sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        self.sigma2 = float(sigma2)
        self.grad_lipschitz = 1.0 / self.sigma2

    @property
    def param(self):
        return self.sigma2

    def psi(self, x):
        return 0.5 * np.square(x) / self.sigma2

    def psi1(self, x):
        return np.asarray(x) / self.sigma2

    def psi2(self, x):
        return np.full(np.shape(x), 1.0 / self.sigma2)

    def psi3(self, x):
        return np.zeros(np.shape(x))

    def tail_mass(self, lo, hi):
        s = math.sqrt(self.sigma2)
        return float(norm.cdf(lo / s) + norm.sf(hi / s))

    def second_moment(self):
        return self.sigma2

    def inverse_cdf(self, u):
        return math.sqrt(self.sigma2) * norm.ppf(u)

    def describe(self):
        return {"name": "gaussian1d", "dim": 1, "sigma2": self.sigma2}


class Quartic1D(Target1D):
    """``psi(x) = x^4``; the gradient is not globally Lipschitz."""

    kind = "quartic"

    def __init__(self):
        self.grad_lipschitz = None
        self._inv = None

    def psi(self, x):
        return np.asarray(x) ** 4

    def psi1(self, x):
        return 4.0 * np.asarray(x) ** 3

    def psi2(self, x):
        return 12.0 * np.asarray(x) ** 2

    def psi3(self, x):
        return 24.0 * np.asarray(x)

    def tail_mass(self, lo, hi):
        # P(X > a) = Gamma(1/4, a^4) / (2 Gamma(1/4)) for the normalised density.
        def upper(a):
            return 0.5 * float(gammaincc(0.25, a ** 4)) if a > 0 else 1.0 - upper(-a)
        return upper(-lo) + upper(hi)

    def second_moment(self):
        return math.gamma(0.75) / math.gamma(0.25)

    def inverse_cdf(self, u):
        if self._inv is None:
            grid = np.linspace(-4.0, 4.0, 200_001)
            dens = np.exp(-grid ** 4)
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
            cdf /= cdf[-1]
            self._inv = (cdf, grid)
        cdf, grid = self._inv
        return np.interp(u, cdf, grid)

    def describe(self):
        return {"name": "quartic1d", "dim": 1}


class Cauchy1D(Target1D):
    """``psi(x) = log(gamma^2 + x^2)``; heavy tails, bounded gradient."""

    kind = "cauchy"

    def __init__(self, gamma: float = 1.0):
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        self.gamma = float(gamma)
        self.grad_lipschitz = 2.0 / self.gamma ** 2

    @property
    def param(self):
        return self.gamma

    def psi(self, x):
        return np.log(self.gamma ** 2 + np.square(x))

    def psi1(self, x):
        x = np.asarray(x)
        return 2.0 * x / (self.gamma ** 2 + x * x)

    def psi2(self, x):
        x = np.asarray(x)
        g2 = self.gamma ** 2
        return 2.0 * (g2 - x * x) / (g2 + x * x) ** 2

    def psi3(self, x):
        x = np.asarray(x)
        g2 = self.gamma ** 2
        return 4.0 * x * (x * x - 3.0 * g2) / (g2 + x * x) ** 3

    def tail_mass(self, lo, hi):
        g = self.gamma
        return float(0.5 + math.atan(lo / g) / math.pi + 0.5 - math.atan(hi / g) / math.pi)

    def second_moment(self):
        return math.inf

    def inverse_cdf(self, u):
        return self.gamma * np.tan(np.pi * (np.asarray(u) - 0.5))

    def describe(self):
        return {"name": "cauchy1d", "dim": 1, "gamma": self.gamma}


# ----------------------------------------------------------------------------
# Factorised targets
# ----------------------------------------------------------------------------

class FactorizedTarget(Target):
    """``grad psi = (1/N_f) sum_j grad psi_j``: unbiased one-factor estimates."""

    num_factors: int

    def factor_gradient(self, j: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def factor_partial(self, j: int, i: int, x: np.ndarray) -> float:
        return float(self.factor_gradient(j, x)[i])


class SingleFactor(FactorizedTarget):
    """Wrap any target as a one-factor factorisation (exact gradient)."""

    def __init__(self, target: Target):
        self.base = target
        self.dim = target.dim
        self.num_factors = 1
        self.grad_lipschitz = target.grad_lipschitz

    def potential(self, x):
        return self.base.potential(x)

    def gradient(self, x):
        return self.base.gradient(x)

    def factor_gradient(self, j, x):
        return self.base.gradient(x)


def _v(s):
    return s ** 4


def _dv(s):
    return 4.0 * s ** 3


def _w(s):
    return -np.sqrt(1.0 + s * s)


def _dw(s):
    return -s / np.sqrt(1.0 + s * s)


class ParticleChain(FactorizedTarget):
    """Nearest-neighbour quartic chain with a mean-field attraction/repulsion.

    ``psi(x) = sum_i V(x_i - x_{i+1}) + (a/N) sum_{i<j} W(x_i - x_j)`` with
    ``V(s) = s^4`` and ``W(s) = -sqrt(1 + s^2)``. Free ends: the chain term
    uses ``x_0 = x_1`` and ``x_{N+1} = x_N``.

    Factor ``j`` replaces the mean-field sum by ``a W'(x_i - x_j)``; the
    factor with ``j == i`` contributes no mean-field force, so averaging
    over all ``N`` factors gives the exact gradient.
    """

    def __init__(self, n: int, coupling: float = 1.0):
        if n < 2:
            raise ValueError("need at least two particles")
        if coupling < 0:
            raise ValueError("coupling must be non-negative")
        self.dim = int(n)
        self.num_factors = int(n)
        self.coupling = float(coupling)
        self.grad_lipschitz = None

    @property
    def meanfield_bound(self) -> float:
        """Upper bound on ``|a W'(s)|`` (``|W'| < 1``)."""
        return self.coupling

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        chain = np.sum(_v(x[..., :-1] - x[..., 1:]), axis=-1)
        diff = x[..., :, None] - x[..., None, :]
        iu = np.triu_indices(self.dim, 1)
        mf = np.sum(_w(diff[..., iu[0], iu[1]]), axis=-1)
        return chain + self.coupling / self.dim * mf

    def chain_force(self, x):
        """``d/dx_i sum_k V(x_k - x_{k+1})`` for every ``i``."""
        x = np.asarray(x, dtype=float)
        dv = _dv(x[..., :-1] - x[..., 1:])
        f = np.zeros_like(x)
        f[..., :-1] += dv
        f[..., 1:] -= dv
        return f

    def meanfield_force(self, i: int, j, x):
        """Per-partner force ``a W'(x_i - x_j)`` (unscaled by ``1/N``)."""
        return self.coupling * _dw(x[i] - x[j])

    def meanfield_gradient(self, x):
        x = np.asarray(x, dtype=float)
        diff = x[..., :, None] - x[..., None, :]
        return self.coupling / self.dim * np.sum(_dw(diff), axis=-1)

    def gradient(self, x):
        return self.chain_force(x) + self.meanfield_gradient(x)

    def factor_gradient(self, j, x):
        x = np.asarray(x, dtype=float)
        return self.chain_force(x) + self.coupling * _dw(x - x[j])

    def factor_partial(self, j, i, x):
        return float(self.chain_force(x)[i] + self.coupling * _dw(x[i] - x[j]))

    @staticmethod
    def empirical_variance(x):
        """``(1/N^2) sum_{i,j} (x_i - x_j)^2``, computed as ``(2/N) sum x^2 - 2 mean^2``."""
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        return 2.0 / n * np.sum(x * x, axis=-1) - 2.0 * np.mean(x, axis=-1) ** 2

    def describe(self):
        return {"name": "particles", "dim": self.dim, "coupling": self.coupling}


TARGET_NAMES = ("gauss-equi", "gauss-diag", "quartic1d", "cauchy1d", "particles")


def make_target(name: str, dim: int = 1, rho: float = 0.0, sigma2: float = 1.0,
                gamma: float = 1.0, nparticles: int = 25, coupling: float = 1.0) -> Target:
    """Build a target from its command-line name."""
    if name == "gauss-equi":
        return GaussianTarget(GaussianSpec(dim, "equicorrelated", rho=rho))
    if name == "gauss-diag":
        if dim == 1:
            return Gaussian1D(sigma2)
        return GaussianTarget(GaussianSpec(dim, "diagonal", sigma2=sigma2))
    if name == "quartic1d":
        return Quartic1D()
    if name == "cauchy1d":
        return Cauchy1D(gamma)
    if name == "particles":
        return ParticleChain(nparticles, coupling)
    raise ValueError(f"unknown target {name!r}; choose from {', '.join(TARGET_NAMES)}")
