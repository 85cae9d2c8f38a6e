"""The four steppers and the trajectory driver.

All steppers advance x over one step of width h given the Wiener increment
(and, for the Milstein pair, the iterated Ito integral I = (dW^2 - h)/2):

* euler            x + a(t_i, x) h + b(t_i, x) dW
* rand-euler       x + a(xi_i, x) h + b(t_i, x) dW
* milstein         rand-euler + b(t_i,x) * db/dy(t_i,x) * I
* df-rand-milstein rand-euler + b(t_i,x) * (b(t_i,x+h) - b(t_i,x))/h * I

The derivative-free variant needs only coefficient values, so it is the one
scheme that stays well-defined under noisy oracles.  The spatial shift in
its difference quotient is the time step h = T/n itself (an override exists
for experimentation but is not part of the analyzed scheme).

Step arithmetic is elementwise, so the same kernels drive a single
trajectory or a whole batch; batches are how the Monte Carlo harness gets
its throughput.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple, Union

import numpy as np

from .oracles import NoisyOracle, as_oracle
from .sde_core import (
    CoefficientField,
    InvalidArgumentError,
    Mesh,
    SdeProblem,
    StreamPurpose,
    UnsupportedOperationError,
    counter_uniforms,
    derive_stream,
    ito_double_integral,
)


class SchemeKind(Enum):
    EULER = "euler"
    RAND_EULER = "rand-euler"
    MILSTEIN = "milstein"
    DF_RAND_MILSTEIN = "df-rand-milstein"

    @property
    def needs_derivative(self) -> bool:
        return self is SchemeKind.MILSTEIN

    @property
    def needs_exact_info(self) -> bool:
        # No noisy-derivative oracle model exists, so the classical
        # randomized Milstein scheme is rejected under noise rather than
        # silently approximated.
        return self is SchemeKind.MILSTEIN

    @property
    def uses_xi(self) -> bool:
        return self is not SchemeKind.EULER

    @property
    def coefficient_calls_per_step(self) -> int:
        if self is SchemeKind.DF_RAND_MILSTEIN or self is SchemeKind.MILSTEIN:
            return 3
        return 2

    @property
    def diffusion_calls_per_step(self) -> int:
        return 2 if self is SchemeKind.DF_RAND_MILSTEIN else 1


@dataclass(frozen=True)
class RandomizationStream:
    """Drift sampling times xi_i uniform on [t_i, t_{i+1}], one per step.

    Keyed independently of every Wiener stream, and deterministic given
    (stream, i, mesh).
    """

    stream: int

    def sample(self, mesh: Mesh) -> np.ndarray:
        key = derive_stream(self.stream, StreamPurpose.XI)
        u = counter_uniforms(key, np.arange(mesh.n, dtype=np.uint64))
        nodes = mesh.nodes()
        return np.minimum(nodes[:-1] + mesh.h * u, nodes[1:])


def xi_batch(streams, mesh: Mesh, purpose: StreamPurpose = StreamPurpose.XI) -> np.ndarray:
    """Sampling-time table of shape (B, n) for per-trajectory streams."""
    keys = np.array([derive_stream(int(s), purpose) for s in np.atleast_1d(streams)],
                    dtype=np.uint64)
    u = counter_uniforms(keys[:, None], np.arange(mesh.n, dtype=np.uint64)[None, :])
    nodes = mesh.nodes()
    return np.minimum(nodes[:-1][None, :] + mesh.h * u, nodes[1:][None, :])


@dataclass(frozen=True)
class SchemeRun:
    """One trajectory: terminal value, optional full grid path, call count."""

    terminal: float
    trajectory: Optional[np.ndarray]
    evaluations: int


# --------------------------------------------------------------------------
# Step kernels (validation-free; shared by the public steps and the driver)
# --------------------------------------------------------------------------


def _kernel_euler(x, a, b, t_i, h, dw):
    return x + a(t_i, x) * h + b(t_i, x) * dw


def _kernel_rand_euler(x, a, b, t_i, h, xi_i, dw):
    return x + a(xi_i, x) * h + b(t_i, x) * dw


def _kernel_milstein(x, a, b_val, b_deriv, t_i, h, xi_i, dw, ito):
    bt = b_val(t_i, x)
    return x + a(xi_i, x) * h + bt * dw + bt * b_deriv(t_i, x) * ito


def _kernel_df_milstein(x, a, b, t_i, h, xi_i, dw, ito, shift):
    bt = b(t_i, x)
    bth = b(t_i, x + shift)
    return x + a(xi_i, x) * h + bt * dw + bt * ((bth - bt) / shift) * ito


def _check_step(h, t_i, xi_i) -> None:
    if np.any(np.asarray(h) <= 0.0):
        raise InvalidArgumentError(f"step h must be positive, got {h}")
    if xi_i is not None:
        lo = np.asarray(xi_i) < np.asarray(t_i)
        hi = np.asarray(xi_i) > np.asarray(t_i) + h
        if np.any(lo) or np.any(hi):
            raise InvalidArgumentError(
                f"xi={xi_i} outside the step interval [{t_i}, t_i+h]"
            )


# --------------------------------------------------------------------------
# Public single-step operations
# --------------------------------------------------------------------------


def step_euler(x, a, b, t_i, h, dw):
    """Euler step: drift and diffusion both sampled at the left endpoint."""
    _check_step(h, t_i, None)
    return _kernel_euler(x, a, b, t_i, h, dw)


def step_rand_euler(x, a, b, t_i, h, xi_i, dw):
    """Euler step with the drift sampled at the random time xi_i."""
    _check_step(h, t_i, xi_i)
    return _kernel_rand_euler(x, a, b, t_i, h, xi_i, dw)


def step_rand_milstein(x, a, b, t_i, h, xi_i, dw, ito):
    """Randomized Milstein step; b must carry its spatial derivative.

    `ito` is the iterated integral (dw**2 - h)/2 for this step.
    """
    _check_step(h, t_i, xi_i)
    bb = as_oracle(b)
    if bb.delta != 0.0 or not bb.base.has_derivative:
        raise UnsupportedOperationError(
            "randomized Milstein needs an exact diffusion with a derivative"
        )
    return _kernel_milstein(x, a, bb.base, bb.base.derivative, t_i, h, xi_i, dw, ito)


def step_df_rand_milstein(x, a, b, t_i, h, xi_i, dw, ito, *, shift=None):
    """Derivative-free randomized Milstein step under (possibly) noisy info.

    Replaces b * db/dy with b(t,x) * (b(t,x+h) - b(t,x))/h using the same
    evaluation of b(t,x) in both the dW term and the difference quotient.
    """
    _check_step(h, t_i, xi_i)
    return _kernel_df_milstein(x, a, b, t_i, h, xi_i, dw, ito, h if shift is None else shift)


# --------------------------------------------------------------------------
# Trajectory driver
# --------------------------------------------------------------------------

Coefficient = Union[CoefficientField, NoisyOracle]


def drive_df_exact_chunk(
    drift: Callable,
    diffusion: Callable,
    x: np.ndarray,
    t_left: np.ndarray,
    h: float,
    increments: np.ndarray,
    xi: np.ndarray,
) -> np.ndarray:
    """Advance a derivative-free Milstein batch over one contiguous run of steps.

    Exact-information fast path used by the harness to stream dense reference
    meshes chunk by chunk without materializing the whole increment table;
    the arithmetic per step is identical to simulate_batch's.
    """
    for i in range(t_left.size):
        dw = increments[:, i]
        ito = 0.5 * (dw * dw - h)
        x = _kernel_df_milstein(x, drift, diffusion, t_left[i], h, xi[:, i], dw, ito, h)
    return x


def _capability_check(kind: SchemeKind, drift: NoisyOracle, diffusion: NoisyOracle) -> None:
    if kind.needs_exact_info and (drift.delta != 0.0 or diffusion.delta != 0.0):
        raise UnsupportedOperationError(
            f"{kind.value} is defined for exact information only"
        )
    if kind.needs_derivative and not diffusion.base.has_derivative:
        raise UnsupportedOperationError(
            f"{kind.value} needs a diffusion coefficient with a spatial derivative"
        )


def simulate_batch(
    drift: Coefficient,
    diffusion: Coefficient,
    kind: SchemeKind,
    mesh: Mesh,
    increments: np.ndarray,
    xi: Optional[np.ndarray],
    x0: np.ndarray,
    *,
    noise_streams=None,
    record: bool = False,
    df_shift: Optional[float] = None,
) -> np.ndarray:
    """Run one scheme over a batch of trajectories in lockstep.

    Args:
        increments: Wiener increments on the mesh, shape (B, n).
        xi: drift sampling times, shape (B, n); ignored by plain Euler.
        x0: initial values, shape (B,).
        noise_streams: per-trajectory noise stream ids (B,), overriding the
            oracles' own stream so every trajectory sees independent noise.
        record: keep the full path, returning shape (B, n+1) instead of (B,).
        df_shift: experimental override of the derivative-free spatial shift
            (default: the time step h, which is what the scheme prescribes).

    The state update is elementwise, so each trajectory's output is
    independent of which other trajectories share the batch.
    """
    a_or = as_oracle(drift)
    b_or = as_oracle(diffusion)
    _capability_check(kind, a_or, b_or)
    n = mesh.n
    increments = np.asarray(increments, dtype=np.float64)
    if increments.ndim != 2 or increments.shape[1] != n:
        raise InvalidArgumentError(
            f"increments must have shape (B, {n}), got {increments.shape}"
        )
    nb = increments.shape[0]
    if kind.uses_xi:
        if xi is None or np.asarray(xi).shape != (nb, n):
            raise InvalidArgumentError(f"xi must have shape ({nb}, {n})")
        nodes = mesh.nodes()
        if np.any(xi < nodes[:-1][None, :]) or np.any(xi > nodes[1:][None, :]):
            raise InvalidArgumentError("xi values leave their step intervals")
    h = mesh.h
    shift = h if df_shift is None else float(df_shift)
    if shift <= 0.0:
        raise InvalidArgumentError("df_shift must be positive")
    a_ctx = a_or.context(noise_streams)
    b_ctx = b_or.context(noise_streams)
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (nb,):
        raise InvalidArgumentError(f"x0 must have shape ({nb},), got {x.shape}")
    path = None
    if record:
        path = np.empty((nb, n + 1), dtype=np.float64)
        path[:, 0] = x
    t = mesh.nodes()
    milstein_pair = kind in (SchemeKind.MILSTEIN, SchemeKind.DF_RAND_MILSTEIN)
    ito_all = ito_double_integral(increments, h) if milstein_pair else None
    for i in range(n):
        dw = increments[:, i]
        if kind is SchemeKind.EULER:
            x = _kernel_euler(x, a_ctx, b_ctx, t[i], h, dw)
        elif kind is SchemeKind.RAND_EULER:
            x = _kernel_rand_euler(x, a_ctx, b_ctx, t[i], h, xi[:, i], dw)
        elif kind is SchemeKind.MILSTEIN:
            x = _kernel_milstein(
                x, a_ctx, b_ctx, b_or.base.derivative, t[i], h, xi[:, i], dw,
                ito_all[:, i],
            )
        else:
            x = _kernel_df_milstein(
                x, a_ctx, b_ctx, t[i], h, xi[:, i], dw, ito_all[:, i], shift
            )
        if record:
            path[:, i + 1] = x
    return path if record else x


def run_scheme(
    problem: SdeProblem,
    oracles: Tuple[Coefficient, Coefficient],
    kind: SchemeKind,
    mesh: Mesh,
    increments: np.ndarray,
    xi: Union[RandomizationStream, np.ndarray, None],
    *,
    record_trajectory: bool = False,
    initial_stream: int = 0,
) -> SchemeRun:
    """Run one trajectory of the chosen stepper from eta over all n steps.

    `increments` are the Wiener increments on `mesh` (length n); `xi` is a
    RandomizationStream (or a precomputed length-n array of sampling times).
    Deterministic given all stream ids.
    """
    if mesh.horizon != problem.horizon:
        raise InvalidArgumentError("mesh and problem horizons differ")
    inc = np.asarray(increments, dtype=np.float64)
    if inc.shape != (mesh.n,):
        raise InvalidArgumentError(
            f"expected {mesh.n} increments on the mesh, got shape {inc.shape}"
        )
    drift, diffusion = oracles
    if isinstance(xi, RandomizationStream):
        xi_vals = xi.sample(mesh)
    elif xi is None:
        xi_vals = None
    else:
        xi_vals = np.asarray(xi, dtype=np.float64)
    if kind.uses_xi and xi_vals is None:
        raise InvalidArgumentError(f"{kind.value} needs drift sampling times xi")
    x0 = problem.initial_values(
        np.array([derive_stream(initial_stream, StreamPurpose.INIT)], dtype=np.uint64)
    )
    out = simulate_batch(
        drift,
        diffusion,
        kind,
        mesh,
        inc[None, :],
        None if xi_vals is None else xi_vals[None, :],
        x0,
        record=record_trajectory,
    )
    evals = kind.coefficient_calls_per_step * mesh.n
    if record_trajectory:
        return SchemeRun(float(out[0, -1]), out[0], evals)
    return SchemeRun(float(out[0]), None, evals)
