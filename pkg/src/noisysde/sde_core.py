"""Meshes, Wiener paths, iterated Ito integrals and coefficient fields.

Everything stochastic in this package is driven by a counter-based
deterministic stream: a 64-bit mix of (stream id, counter) feeds either the
inverse normal CDF (Wiener increments) or a uniform map (drift sampling
times, oracle corruptions).  Trajectories are therefore order-independent
and safe to generate concurrently: no shared generator state exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import ndtri


class SdeError(Exception):
    """Base class for errors raised by this package."""


class InvalidArgumentError(SdeError, ValueError):
    """An argument fails a precondition (non-positive step, bad factor, ...)."""


class UnsupportedOperationError(SdeError, TypeError):
    """The operation needs a capability the input does not provide."""


# --------------------------------------------------------------------------
# Counter-based deterministic streams
# --------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_ROUND2 = 0xD6E8FEB86659FD93


class StreamPurpose(IntEnum):
    """Domain separators so Wiener, randomization and noise draws never collide."""

    WIENER = 1
    XI = 2
    XI_REF = 3
    DRIFT_NOISE = 4
    DIFF_NOISE = 5
    INIT = 6
    VALIDATE = 7


def _mix64(z: int) -> int:
    # splitmix64 finalizer on plain Python ints
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def derive_stream(*parts: int) -> int:
    """Fold integers (seed, trajectory index, purpose, ...) into one stream id.

    Deterministic and free of sequential state, so any worker can derive the
    stream for any trajectory independently.
    """
    acc = 0x6A09E667F3BCC909
    for p in parts:
        acc = _mix64(acc ^ ((int(p) & _MASK64) * _GOLDEN & _MASK64))
    return acc


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MIX_A)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


def _words(stream: Union[int, np.ndarray], counters: Union[int, np.ndarray]) -> np.ndarray:
    s = np.asarray(stream, dtype=np.uint64)
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (c * np.uint64(_GOLDEN)) ^ s
        z = _mix_array(z)
        z = _mix_array(z ^ np.uint64(_ROUND2))
    return z

def counter_uniforms(stream, counters) -> np.ndarray:
    """Uniforms in the open interval (0, 1), one per (stream, counter) pair.

    `stream` and `counters` broadcast against each other, so one call yields
    a whole (trajectories x steps) table.
    """
    w = _words(stream, counters)
    return ((w >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def counter_gaussians(stream, counters) -> np.ndarray:
    """Standard normals via the inverse CDF applied to counter uniforms."""
    return ndtri(counter_uniforms(stream, counters))


def point_keyed_uniforms(stream, t, y) -> np.ndarray:
    """Uniforms in (0, 1) determined by (stream, t, y): a fixed random field.

    Hashing the IEEE-754 bit patterns of t and y makes repeated queries of
    the same point return the same value, which models a fixed (if rough)
    corruption function rather than fresh per-call noise.
    """
    tb = np.atleast_1d(np.asarray(t, dtype=np.float64)).view(np.uint64)
    yb = np.atleast_1d(np.asarray(y, dtype=np.float64)).view(np.uint64)
    with np.errstate(over="ignore"):
        z = _mix_array(tb * np.uint64(_MIX_A)) ^ _mix_array(yb * np.uint64(_MIX_B))
    u = counter_uniforms(stream, z)
    if np.isscalar(t) and np.isscalar(y):
        return u[0] if u.ndim else float(u)
    return u


# --------------------------------------------------------------------------
# Meshes and Wiener paths
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Mesh:
    """Equidistant grid t_i = i*h on [0, T] with h = T/n."""

    horizon: float
    n: int

    def __post_init__(self) -> None:
        if not (self.horizon > 0.0 and math.isfinite(self.horizon)):
            raise InvalidArgumentError(f"horizon must be positive, got {self.horizon}")
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise InvalidArgumentError(f"n must be a positive integer, got {self.n}")

    @property
    def h(self) -> float:
        return self.horizon / self.n

    def nodes(self) -> np.ndarray:
        """All n+1 grid points; endpoints are exact."""
        ts = np.arange(self.n + 1, dtype=np.float64) * (self.horizon / self.n)
        ts[-1] = self.horizon
        return ts


@dataclass(frozen=True)
class WienerPath:
    """Gaussian increments of one Brownian trajectory on a fine mesh."""

    mesh: Mesh
    increments: np.ndarray
    stream: int = 0

    def __post_init__(self) -> None:
        inc = np.asarray(self.increments, dtype=np.float64)
        if inc.shape != (self.mesh.n,):
            raise InvalidArgumentError(
                f"expected {self.mesh.n} increments, got shape {inc.shape}"
            )
        inc = inc.copy()
        inc.flags.writeable = False
        object.__setattr__(self, "increments", inc)

    def terminal(self) -> float:
        """W(T), the total of all increments."""
        return float(np.sum(self.increments))


def wiener_increments(n_fine: int, horizon: float, streams) -> np.ndarray:
    """Increment table for one stream (shape (n_fine,)) or many ((B, n_fine)).

    Entry (k, j) depends only on (streams[k], j); regenerating any subset of
    trajectories in any order gives bit-identical values.
    """
    if n_fine < 1:
        raise InvalidArgumentError(f"n_fine must be >= 1, got {n_fine}")
    if horizon <= 0.0:
        raise InvalidArgumentError(f"horizon must be positive, got {horizon}")
    counters = np.arange(n_fine, dtype=np.uint64)
    s = np.asarray(streams, dtype=np.uint64)
    if s.ndim == 0:
        z = counter_gaussians(s, counters)
    else:
        z = counter_gaussians(s[:, None], counters[None, :])
    return z * math.sqrt(horizon / n_fine)


def wiener_generate(n_fine: int, horizon: float, stream: int) -> WienerPath:
    """Generate a Brownian path: n_fine iid N(0, T/n_fine) increments.

    Fully determined by the stream id; call twice with the same arguments and
    the increments are bit-identical.
    """
    inc = wiener_increments(n_fine, horizon, derive_stream(stream, StreamPurpose.WIENER))
    return WienerPath(Mesh(horizon, n_fine), inc, stream)


def coarsen_increments(increments: np.ndarray, factor: int) -> np.ndarray:
    """Block sums of `factor` consecutive increments along the last axis."""
    if not (isinstance(factor, (int, np.integer)) and factor >= 1):
        raise InvalidArgumentError(f"factor must be a positive integer, got {factor}")
    arr = np.asarray(increments, dtype=np.float64)
    n = arr.shape[-1]
    if n % factor != 0:
        raise InvalidArgumentError(f"factor {factor} does not divide {n} increments")
    shape = arr.shape[:-1] + (n // factor, factor)
    return arr.reshape(shape).sum(axis=-1)


def coarsen(path: WienerPath, factor: int) -> np.ndarray:
    """Exact block sums of a path's increments onto the divisor mesh.

    No re-sampling happens here: the coarse trajectory is driven by the same
    Brownian motion as the fine one, which is what makes a dense-mesh run a
    valid reference for a coarse-mesh run.
    """
    return coarsen_increments(path.increments, factor)


# --------------------------------------------------------------------------
# Coefficient fields and the SDE problem
# --------------------------------------------------------------------------

DRIFT = "drift"
DIFFUSION = "diffusion"


@dataclass(frozen=True)
class CoefficientField:
    """An evaluable map (t, y) -> R with declared regularity metadata.

    `lipschitz` is the declared class constant K (spatial Lipschitz bound,
    bound on the first two y-derivatives, and time-Hoelder scale all at
    once); `holder` is the time-Hoelder exponent in (0, 1].  The metadata is
    declared by the problem author and spot-checked statistically, never
    inferred.
    """

    fn: Callable[..., np.ndarray]
    lipschitz: float
    holder: float
    d_y: Optional[Callable[..., np.ndarray]] = None
    role: str = DIFFUSION

    def __post_init__(self) -> None:
        if self.lipschitz <= 0.0:
            raise InvalidArgumentError("lipschitz constant must be positive")
        if not (0.0 < self.holder <= 1.0):
            raise InvalidArgumentError("holder exponent must lie in (0, 1]")
        if self.role not in (DRIFT, DIFFUSION):
            raise InvalidArgumentError(f"unknown role {self.role!r}")

    def __call__(self, t, y):
        return self.fn(t, y)

    @property
    def has_derivative(self) -> bool:
        return self.d_y is not None

    def derivative(self, t, y):
        if self.d_y is None:
            raise UnsupportedOperationError(
                "coefficient field carries no spatial derivative"
            )
        return self.d_y(t, y)


def growth_constant(lipschitz: float, horizon: float, gamma1: float, gamma2: float) -> float:
    """Linear-growth envelope scale: |f(t,y)| <= K1*(1+|y|) on [0,T]."""
    return lipschitz * (1.0 + max(horizon**gamma1, horizon**gamma2))


InitialValue = Union[float, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class SdeProblem:
    """Scalar SDE dX = a(t,X) dt + b(t,X) dW on [0, T] with X(0) = eta.

    `terminal_solution`, when present, maps (T, W(T)) to the exact X(T) and
    lets the harness skip the dense-mesh reference run.  `initial` is either
    a constant or a map from per-trajectory uniforms to samples of eta.
    """

    drift: CoefficientField
    diffusion: CoefficientField
    initial: InitialValue
    horizon: float
    terminal_solution: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.horizon <= 0.0:
            raise InvalidArgumentError("horizon must be positive")
        if self.drift.role != DRIFT:
            raise InvalidArgumentError("drift field must have role 'drift'")
        if self.diffusion.role != DIFFUSION:
            raise InvalidArgumentError("diffusion field must have role 'diffusion'")

    def initial_values(self, streams) -> np.ndarray:
        """eta per trajectory; constant problems broadcast, samplers draw."""
        s = np.atleast_1d(np.asarray(streams, dtype=np.uint64))
        if callable(self.initial):
            u = counter_uniforms(s, np.uint64(0))
            return np.asarray(self.initial(u), dtype=np.float64)
        return np.full(s.shape, float(self.initial))


# --------------------------------------------------------------------------
# Operators
# --------------------------------------------------------------------------


def ito_double_integral(delta_w, delta_t):
    """Iterated Ito integral of W against itself over one step: (dW^2 - dt)/2."""
    if np.any(np.asarray(delta_t) <= 0.0):
        raise InvalidArgumentError(f"delta_t must be positive, got {delta_t}")
    dw = np.asarray(delta_w, dtype=np.float64)
    out = 0.5 * (dw * dw - delta_t)
    return float(out) if np.isscalar(delta_w) else out


def delta_h(f: Callable, t, y, h):
    """Forward difference quotient in space: (f(t, y+h) - f(t, y)) / h."""
    if np.any(np.asarray(h) <= 0.0):
        raise InvalidArgumentError(f"spatial step h must be positive, got {h}")
    return (f(t, y + h) - f(t, y)) / h


def l1h(f: Callable, t, y, h):
    """Derivative-free Milstein operator: f(t,y) * delta_h(f)(t,y)."""
    return f(t, y) * delta_h(f, t, y, h)


def l1(f: CoefficientField, t, y):
    """Milstein operator f * df/dy; requires the field to carry a derivative."""
    return f(t, y) * f.derivative(t, y)


# --------------------------------------------------------------------------
# Statistical spot checks for declared regularity
# --------------------------------------------------------------------------


def field_regularity_excess(
    fld: CoefficientField,
    horizon: float,
    *,
    samples: int = 2000,
    stream: int = 0,
    y_scale: float = 20.0,
    growth: Optional[float] = None,
) -> float:
    """Worst relative violation of the declared field bounds over random points.

    Checks |f(t,y)-f(t,z)| <= K|y-z|, |f(t,y)-f(s,y)| <= K(1+|y|)|t-s|^gamma
    and |f(t,y)| <= K1(1+|y|); returns max(excess)/bound, so any value <= 0
    means the declared metadata held on every sampled point.
    """
    key = derive_stream(stream, StreamPurpose.VALIDATE)
    c = np.arange(samples, dtype=np.uint64)
    t = counter_uniforms(key, c) * horizon
    s = counter_uniforms(key, c + np.uint64(samples)) * horizon
    y = (counter_uniforms(key, c + np.uint64(2 * samples)) * 2.0 - 1.0) * y_scale
    z = (counter_uniforms(key, c + np.uint64(3 * samples)) * 2.0 - 1.0) * y_scale
    k = fld.lipschitz
    k1 = growth if growth is not None else k * (1.0 + horizon**fld.holder)
    lip = np.abs(fld(t, y) - fld(t, z)) - k * np.abs(y - z)
    hoe = np.abs(fld(t, y) - fld(s, y)) - k * (1.0 + np.abs(y)) * np.abs(t - s) ** fld.holder
    grw = np.abs(fld(t, y)) - k1 * (1.0 + np.abs(y))
    scale = max(k, k1)
    return float(max(lip.max(), hoe.max(), grw.max()) / scale)


def operator_bound_excess(
    fld: CoefficientField,
    horizon: float,
    growth: float,
    *,
    samples: int = 10_000,
    stream: int = 0,
    y_scale: float = 20.0,
) -> float:
    """Worst violation of the difference-operator envelopes, relative scale.

    Over sampled (t, y, h=T/n): |l1h| <= K*K1*(1+|y|) and, when the field has
    a derivative, |l1 - l1h| <= K*K1*(1+|y|)*h.  Non-positive return means no
    sampled violation.
    """
    key = derive_stream(stream, StreamPurpose.VALIDATE, 1)
    c = np.arange(samples, dtype=np.uint64)
    t = counter_uniforms(key, c) * horizon
    y = (counter_uniforms(key, c + np.uint64(samples)) * 2.0 - 1.0) * y_scale
    nn = np.floor(counter_uniforms(key, c + np.uint64(2 * samples)) * 1024).astype(int) + 1
    h = horizon / nn
    k = fld.lipschitz
    env = k * growth * (1.0 + np.abs(y))
    lh = l1h(fld, t, y, h)
    worst = np.abs(lh) - env
    if fld.has_derivative:
        diff = np.abs(l1(fld, t, y) - lh) - env * h
        worst = np.maximum(worst, diff)
    return float(worst.max() / (k * growth))
