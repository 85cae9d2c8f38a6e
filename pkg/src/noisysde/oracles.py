"""Inexact-information layer: corrupted drift and diffusion evaluations.

A noisy oracle returns base(t, y) + delta * p(t, y) where p stays inside a
declared corruption class:

* K1     - |p(t,y)| <= 1 + |y|         (linear growth)
* K1_LIP - K1 and |p(t,y)-p(t,z)| <= |y-z|
* K2     - |p(t,y)| <= 1               (uniformly bounded)

Three noise modes are supported.  "function" takes a user-supplied p (the
worst-case constant corruption of the lower-bound argument is `p = 1`).
"per-call" draws a fresh bounded uniform on every evaluation, keyed by
(stream, call counter) so the draw never depends on shared state.
"point-keyed" makes the corruption a fixed random function of (t, y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .sde_core import (
    CoefficientField,
    InvalidArgumentError,
    SdeError,
    StreamPurpose,
    counter_uniforms,
    derive_stream,
    point_keyed_uniforms,
)


class CorruptionClass(Enum):
    K1 = "K1"
    K1_LIP = "K1Lip"
    K2 = "K2"


class EnvelopeViolationError(SdeError):
    """A sampled corruption escaped its declared class envelope."""


MODE_FUNCTION = "function"
MODE_PER_CALL = "per-call"
MODE_POINT_KEYED = "point-keyed"
_MODES = (MODE_FUNCTION, MODE_PER_CALL, MODE_POINT_KEYED)


@dataclass(frozen=True)
class NoisyOracle:
    """A coefficient field wrapped with precision level delta and a noise model.

    delta = 0 reduces to the exact field bit-for-bit (no draw is even made).
    With `uniform01` the random draw is uniform on [0, 1] before scaling,
    reproducing the literal experimental protocol; the default draws
    symmetrically on [-1, 1], which is mean-zero and still inside every
    class envelope.  `saturate_growth` multiplies K1/K1_LIP draws by
    (1 + |y|) to exercise the full growth envelope instead of the bounded
    subset.  `relative` multiplies the draw by the base value, modeling
    reduced-precision (roundoff) evaluation.
    """

    base: CoefficientField
    delta: float
    corruption: CorruptionClass = CorruptionClass.K2
    mode: str = MODE_PER_CALL
    p: Optional[Callable[..., np.ndarray]] = None
    stream: int = 0
    uniform01: bool = False
    saturate_growth: bool = False
    relative: bool = False
    rel_bound: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.delta <= 1.0):
            raise InvalidArgumentError(f"delta must lie in [0, 1], got {self.delta}")
        if self.mode not in _MODES:
            raise InvalidArgumentError(f"unknown noise mode {self.mode!r}")
        if self.mode == MODE_FUNCTION and self.p is None:
            raise InvalidArgumentError("function mode needs an explicit corruption p")

    def __call__(self, t, y):
        return corrupt_eval(self, t, y)

    @property
    def noise_purpose(self) -> StreamPurpose:
        return (
            StreamPurpose.DRIFT_NOISE
            if self.base.role == "drift"
            else StreamPurpose.DIFF_NOISE
        )

    def with_stream(self, stream: int) -> "NoisyOracle":
        return replace(self, stream=stream)

    def context(self, streams=None) -> "OracleContext":
        """Per-trajectory evaluation context carrying the call counter."""
        return OracleContext(self, streams)


def as_oracle(coefficient) -> NoisyOracle:
    """Wrap a raw field as an exact (delta = 0) oracle; pass oracles through."""
    if isinstance(coefficient, NoisyOracle):
        return coefficient
    return NoisyOracle(coefficient, 0.0)


def _shaped_draw(oracle: NoisyOracle, key, u: np.ndarray, t, y):
    """Map unit uniforms to an admissible corruption value."""
    if oracle.corruption is CorruptionClass.K1_LIP:
        # A per-draw value cannot be Lipschitz across calls; use a smooth
        # random member of the class instead: unit-Lipschitz in y for any t.
        phase = counter_uniforms(key, np.uint64(0)) * 2.0 * math.pi
        speed = counter_uniforms(key, np.uint64(1)) * 2.0 * math.pi
        return np.sin(np.asarray(y) + phase + speed * np.asarray(t))
    s = u if oracle.uniform01 else 2.0 * u - 1.0
    if oracle.corruption is CorruptionClass.K1 and oracle.saturate_growth:
        return s * (1.0 + np.abs(y))
    return s


def corrupt_eval(oracle: NoisyOracle, t, y, call_index: int = 0, streams=None):
    """One corrupted evaluation: base(t, y) + delta * p(t, y).

    `call_index` is the position in the caller's evaluation sequence (only
    per-call mode consumes it); `streams` optionally overrides the oracle's
    stream id per trajectory, broadcasting against y.
    """
    value = oracle.base(t, y)
    if oracle.delta == 0.0:
        return value
    if oracle.mode == MODE_FUNCTION:
        corr = oracle.p(t, y)
    else:
        sid = oracle.stream if streams is None else streams
        key = (
            np.asarray(sid, dtype=np.uint64)
            ^ np.uint64(derive_stream(int(oracle.noise_purpose)))
        )
        if oracle.mode == MODE_PER_CALL:
            u = counter_uniforms(key, np.uint64(call_index))
        else:
            u = point_keyed_uniforms(key, t, y)
        corr = _shaped_draw(oracle, key, u, t, y)
        if oracle.relative:
            corr = oracle.rel_bound * corr * value
    return value + oracle.delta * corr


class OracleContext:
    """Stateful view of an oracle for one trajectory (or one batch of them).

    Each call advances an internal counter, so per-call noise is fresh on
    every evaluation yet fully reproducible: draw i of trajectory k depends
    only on (stream_k, i).
    """

    __slots__ = ("oracle", "streams", "calls")

    def __init__(self, oracle: NoisyOracle, streams=None):
        self.oracle = oracle
        self.streams = streams
        self.calls = 0

    def __call__(self, t, y):
        out = corrupt_eval(self.oracle, t, y, self.calls, self.streams)
        self.calls += 1
        return out


def make_uniform_corruption(
    delta: float,
    corruption: CorruptionClass,
    stream: int,
    *,
    mode: str = MODE_PER_CALL,
    uniform01: bool = False,
    saturate_growth: bool = False,
) -> Callable[[CoefficientField], NoisyOracle]:
    """Factory for uniformly-drawn corruptions at precision delta.

    Returns a wrapper turning an exact field into a noisy oracle whose draws
    are bounded by delta before any growth saturation, matching the
    experimental protocol of injecting a scaled uniform at each evaluation.
    """
    if not (0.0 <= delta <= 1.0):
        raise InvalidArgumentError(f"delta must lie in [0, 1], got {delta}")

    def wrap(base: CoefficientField) -> NoisyOracle:
        return NoisyOracle(
            base,
            delta,
            corruption,
            mode=mode,
            stream=stream,
            uniform01=uniform01,
            saturate_growth=saturate_growth,
        )

    return wrap


def make_relative_roundoff(
    bound: float,
    base: CoefficientField,
    stream: int,
    *,
    delta: float = 1.0,
    alpha: Optional[Callable[..., np.ndarray]] = None,
) -> NoisyOracle:
    """Reduced-precision model: corruption p(t,y) = alpha(t,y) * f(t,y).

    With the default random alpha, |alpha| <= bound per call (bound = 2**-11
    models half-precision roundoff).  A deterministic alpha can be supplied
    instead.
    """
    if bound < 0.0:
        raise InvalidArgumentError(f"bound must be non-negative, got {bound}")
    if alpha is not None:
        return NoisyOracle(
            base,
            delta,
            CorruptionClass.K1,
            mode=MODE_FUNCTION,
            p=lambda t, y: alpha(t, y) * base(t, y),
            stream=stream,
        )
    return NoisyOracle(
        base,
        delta,
        CorruptionClass.K1,
        mode=MODE_PER_CALL,
        stream=stream,
        relative=True,
        rel_bound=bound,
    )


def corruption_excess(
    oracle: NoisyOracle,
    horizon: float,
    *,
    samples: int = 10_000,
    stream: int = 0,
    y_scale: float = 20.0,
) -> float:
    """Worst violation of the declared class envelope over sampled points.

    Samples (t, y) pairs, evaluates the oracle with fresh per-call indices
    and measures |corruption| against the class bound (and the Lipschitz
    bound for K1_LIP).  Non-positive return means every sample obeyed the
    envelope.
    """
    if oracle.delta == 0.0:
        return -1.0
    key = derive_stream(stream, StreamPurpose.VALIDATE, 3)
    c = np.arange(samples, dtype=np.uint64)
    t = counter_uniforms(key, c) * horizon
    y = (counter_uniforms(key, c + np.uint64(samples)) * 2.0 - 1.0) * y_scale
    base = oracle.base(t, y)
    vals = np.array(
        [corrupt_eval(oracle, t[i], y[i], call_index=i) for i in range(samples)]
    )
    p = (vals - base) / oracle.delta
    if oracle.relative:
        env = oracle.rel_bound * np.abs(base)
    elif oracle.corruption is CorruptionClass.K2:
        env = np.ones_like(p)
    else:
        env = 1.0 + np.abs(y)
    worst = float((np.abs(p) - env).max())
    if oracle.corruption is CorruptionClass.K1_LIP:
        z = (counter_uniforms(key, c + np.uint64(2 * samples)) * 2.0 - 1.0) * y_scale
        pz = (
            np.array(
                [corrupt_eval(oracle, t[i], z[i], call_index=i) for i in range(samples)]
            )
            - oracle.base(t, z)
        ) / oracle.delta
        worst = max(worst, float((np.abs(p - pz) - np.abs(y - z)).max()))
    return worst


def check_corruption(oracle: NoisyOracle, horizon: float, **kwargs) -> None:
    """Raise EnvelopeViolationError if a sampled corruption leaves its class."""
    excess = corruption_excess(oracle, horizon, **kwargs)
    if excess > 1e-12:
        raise EnvelopeViolationError(
            f"corruption escaped its {oracle.corruption.value} envelope "
            f"(worst excess {excess:.3e})"
        )
