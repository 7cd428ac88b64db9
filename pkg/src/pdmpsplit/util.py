"""Random streams, draw helpers, streaming moments and log-log fits.

Every replicate owns a counter-based Philox4x64-10 stream keyed by
``(seed, stream_id)``, so replicate ``r`` sees the same numbers no matter
how many other replicates run next to it, or in which order.

Two stream flavours share one interface:

* :class:`RngStream` drives a single chain. ``uniform(shape)`` returns an
  array of ``shape`` (or a float for ``shape=()``).
* :class:`RngBatch` drives ``R`` chains in lockstep. ``uniform(shape)``
  requires ``shape[0] == R`` and row ``r`` holds exactly the numbers that
  ``RngStream(seed, stream_ids[r])`` would have produced.

Both read from a buffer refilled in blocks, which keeps per-draw overhead
low and preserves the underlying sequence exactly.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtri

__all__ = [
    "InvariantViolation",
    "RngStream",
    "RngBatch",
    "exp_draw",
    "std_normal_vec",
    "unit_sphere",
    "rademacher",
    "uniform_index",
    "OnlineStat",
    "LogLogFit",
    "fit_loglog",
]

# Half an ulp of the 53-bit grid: maps [0, 1) onto the open interval (0, 1).
_HALF_ULP = 2.0 ** -54
_BLOCK = 8192


class InvariantViolation(RuntimeError):
    """A run-time guard tripped; the run is aborted rather than continued."""


def _philox(seed: int, stream_id: int) -> np.random.Generator:
    if seed < 0 or stream_id < 0:
        raise ValueError("seed and stream_id must be non-negative")
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream_id)]))


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(n) for n in shape)


class RngStream:
    """Single Philox stream with open-interval uniforms.

    Args:
        seed: Non-negative master seed.
        stream_id: Non-negative stream index (one per replicate).
        block: Number of uniforms generated per refill.
    """

    batch_shape: tuple[int, ...] = ()

    def __init__(self, seed: int, stream_id: int = 0, block: int = _BLOCK):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = _philox(seed, stream_id)
        self._block = int(block)
        self._buf = np.empty(0)
        self._pos = 0
        self.draws = 0

    def _take(self, n: int) -> np.ndarray:
        avail = self._buf.size - self._pos
        if n <= avail:
            out = self._buf[self._pos:self._pos + n]
            self._pos += n
        else:
            fresh = self._gen.random(max(self._block, n - avail))
            out = np.concatenate([self._buf[self._pos:], fresh[:n - avail]])
            self._buf = fresh
            self._pos = n - avail
        self.draws += n
        return out

    def uniform(self, shape=()) -> float | np.ndarray:
        """Uniforms on the open interval (0, 1)."""
        shape = _as_shape(shape)
        n = math.prod(shape)
        vals = self._take(n) + _HALF_ULP
        if shape == ():
            return float(vals[0])
        return vals.reshape(shape)


class RngBatch:
    """Lockstep bundle of ``R`` independent Philox streams.

    Args:
        seed: Master seed shared by all rows.
        stream_ids: One stream id per row.
        block: Uniforms generated per row per refill.
    """

    def __init__(self, seed: int, stream_ids: Sequence[int], block: int = _BLOCK):
        ids = [int(s) for s in stream_ids]
        if not ids:
            raise ValueError("RngBatch needs at least one stream")
        self.seed = int(seed)
        self.stream_ids = tuple(ids)
        self.batch_shape = (len(ids),)
        self._gens = [_philox(seed, s) for s in ids]
        self._block = int(block)
        self._buf = np.empty((len(ids), 0))
        self._pos = 0
        self.draws = 0

    @property
    def size(self) -> int:
        return self.batch_shape[0]

    def _take(self, n: int) -> np.ndarray:
        avail = self._buf.shape[1] - self._pos
        if n <= avail:
            out = self._buf[:, self._pos:self._pos + n]
            self._pos += n
        else:
            m = max(self._block, n - avail)
            fresh = np.stack([g.random(m) for g in self._gens])
            out = np.concatenate([self._buf[:, self._pos:], fresh[:, :n - avail]], axis=1)
            self._buf = fresh
            self._pos = n - avail
        self.draws += n
        return out

    def uniform(self, shape) -> np.ndarray:
        """Uniforms on (0, 1); ``shape[0]`` must equal the batch size."""
        shape = _as_shape(shape)
        if not shape or shape[0] != self.size:
            raise ValueError(f"leading dimension must be {self.size}, got {shape}")
        n = math.prod(shape[1:])
        return (self._take(n) + _HALF_ULP).reshape(shape)

    def row(self, r: int) -> RngStream:
        """Fresh single stream equal to row ``r`` at its start."""
        return RngStream(self.seed, self.stream_ids[r], self._block)


Rng = RngStream | RngBatch


def exp_draw(rng: Rng, rate) -> float | np.ndarray:
    """Exponential waiting times ``-log(U) / rate``; rate 0 gives ``inf``.

    The output shape is ``np.shape(rate)``; for a batch the leading axis of
    ``rate`` must be the batch axis.
    """
    rate = np.asarray(rate, dtype=float)
    if np.any(rate < 0) or np.any(np.isnan(rate)):
        raise ValueError("exponential rate must be non-negative")
    e = -np.log(rng.uniform(rate.shape))
    with np.errstate(divide="ignore"):
        out = np.where(rate > 0, e / np.where(rate > 0, rate, 1.0), np.inf)
    return float(out) if out.ndim == 0 else out


def std_normal_vec(rng: Rng, d: int) -> np.ndarray:
    """Standard normals of shape ``batch_shape + (d,)`` by inverse CDF."""
    return ndtri(rng.uniform(rng.batch_shape + (d,)))


def unit_sphere(rng: Rng, d: int) -> np.ndarray:
    """Uniform draws on the unit sphere in ``R^d`` (``±1`` when ``d == 1``)."""
    while True:
        z = std_normal_vec(rng, d)
        nrm = np.linalg.norm(z, axis=-1, keepdims=True)
        if np.all(nrm > 1e-300):
            return z / nrm
        # Underflow has probability ~0; redraw rather than bias the direction.


def rademacher(rng: Rng, d: int) -> np.ndarray:
    """Independent ``±1`` coordinates of shape ``batch_shape + (d,)``."""
    u = rng.uniform(rng.batch_shape + (d,))
    return np.where(u < 0.5, 1.0, -1.0)


def uniform_index(rng: Rng, n: int, shape=()) -> int | np.ndarray:
    """Uniform integers in ``{0, ..., n-1}``."""
    u = rng.uniform(shape)
    k = np.minimum(np.floor(np.asarray(u) * n), n - 1).astype(np.int64)
    return int(k) if k.ndim == 0 else k


class OnlineStat:
    """One-pass mean and variance (Welford), elementwise over a batch shape.

    Args:
        shape: Shape of each pushed value; ``()`` for scalars.
    """

    def __init__(self, shape=()):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def push(self, value) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (value - self.mean)

    def extend(self, values) -> None:
        """Push each entry along axis 0 of ``values``."""
        for v in np.asarray(values):
            self.push(v)

    def merge(self, other: "OnlineStat") -> "OnlineStat":
        """Combine two disjoint streams (Chan et al. pairwise update)."""
        out = OnlineStat(np.shape(self.mean))
        n = self.count + other.count
        if n == 0:
            return out
        delta = other.mean - self.mean
        out.count = n
        out.mean = self.mean + delta * (other.count / n)
        out.m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / n)
        return out

    @property
    def variance(self):
        if self.count < 2:
            return np.full(np.shape(self.mean), np.nan)
        return self.m2 / (self.count - 1)

    def row(self, r: int) -> "OnlineStat":
        """Scalar view of batch entry ``r``."""
        out = OnlineStat()
        out.count = self.count
        out.mean = np.asarray(self.mean)[r]
        out.m2 = np.asarray(self.m2)[r]
        return out


class LogLogFit(NamedTuple):
    slope: float
    intercept: float
    used: tuple[int, ...]
    rejected: tuple[int, ...]


def fit_loglog(xs, ys) -> LogLogFit:
    """Least-squares fit of ``log|y| = slope * log(x) + intercept``.

    Points with non-positive ``x`` or ``y`` are rejected and reported in
    ``rejected``; fewer than two usable points raises ``ValueError``.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    ok = (xs > 0) & (ys > 0) & np.isfinite(xs) & np.isfinite(ys)
    used = tuple(int(i) for i in np.flatnonzero(ok))
    rejected = tuple(int(i) for i in np.flatnonzero(~ok))
    if len(used) < 2:
        raise ValueError("need at least two positive points for a log-log fit")
    slope, intercept = np.polyfit(np.log(xs[ok]), np.log(ys[ok]), 1)
    return LogLogFit(float(slope), float(intercept), used, rejected)
