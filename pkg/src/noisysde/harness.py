"""Monte Carlo strong-error estimation and convergence-rate regression.

The protocol per trajectory k: generate the Brownian path once at the fine
resolution r*n (stream keyed by (seed, k)), coarsen it by exact block sums,
run the scheme under test with noisy oracles on the coarse mesh, run the
reference on the fine mesh with EXACT coefficients (or evaluate the closed
form when the problem has one), and accumulate |X_ref - X_n|^q.  Coarse and
reference runs are therefore driven by the same Brownian motion, and any
worker may compute any trajectory because every random quantity is keyed,
never drawn from shared state.

The error estimate is (mean |X_ref - X_n|^q)^(1/q) with a CLT standard
error on the q-th-power samples mapped through the q-th root.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .oracles import CorruptionClass, NoisyOracle, MODE_FUNCTION, MODE_PER_CALL, MODE_POINT_KEYED
from .sde_core import (
    DIFFUSION,
    DRIFT,
    CoefficientField,
    InvalidArgumentError,
    Mesh,
    SdeError,
    SdeProblem,
    StreamPurpose,
    WienerPath,
    counter_gaussians,
    counter_uniforms,
    derive_stream,
)
from .schemes import SchemeKind, drive_df_exact_chunk, simulate_batch, xi_batch


class DegenerateFitError(SdeError):
    """A rate fit hit a zero error estimate; the slope is reported, not guessed."""


# --------------------------------------------------------------------------
# Built-in problems
# --------------------------------------------------------------------------


def _sine_drift(m, g1, t, y):
    return np.sin(m * y * np.power(t, g1))


def _sine_drift_dy(m, g1, t, y):
    tg = np.power(t, g1)
    return m * tg * np.cos(m * y * tg)


def _sine_diffusion(m, g2, t, y):
    return np.cos(m * y * np.power(t, g2))


def _sine_diffusion_dy(m, g2, t, y):
    tg = np.power(t, g2)
    return -m * tg * np.sin(m * y * tg)


def _linear(c, t, y):
    return c * y


def _const(c, t, y):
    return np.broadcast_arrays(np.asarray(t, dtype=np.float64) * 0.0 + c, y)[0]


def _zero(t, y):
    return np.broadcast_arrays(np.asarray(t, dtype=np.float64) * 0.0, y)[0]


def _gbm_solution(mu, sigma, eta, horizon, w_t):
    return eta * np.exp((mu - 0.5 * sigma**2) * horizon + sigma * np.asarray(w_t))


def _constant_solution(mu, sigma, eta, horizon, w_t):
    return eta + mu * horizon + sigma * np.asarray(w_t)


def paper_sine_problem(
    gamma1: float = 0.2,
    m: float = 100.0,
    eta: float = 1.0,
    horizon: float = 1.0,
) -> SdeProblem:
    """The oscillatory Hoelder test problem:

        dX = sin(M X t^g1) dt + cos(M X t^g2) dW,  X(0) = eta,

    with g2 = min(g1 + 0.5, 1).  M = 100 makes the coefficients genuinely
    rough at unit scale.  The declared class constant is M^2, the bound on
    the second y-derivative.
    """
    gamma2 = min(gamma1 + 0.5, 1.0)
    k = m * m
    drift = CoefficientField(
        partial(_sine_drift, m, gamma1),
        lipschitz=k,
        holder=gamma1,
        d_y=partial(_sine_drift_dy, m, gamma1),
        role=DRIFT,
    )
    diffusion = CoefficientField(
        partial(_sine_diffusion, m, gamma2),
        lipschitz=k,
        holder=gamma2,
        d_y=partial(_sine_diffusion_dy, m, gamma2),
        role=DIFFUSION,
    )
    return SdeProblem(drift, diffusion, eta, horizon, name="paper-sine")


def gbm_problem(
    mu: float = 0.1,
    sigma: float = 0.2,
    eta: float = 1.0,
    horizon: float = 1.0,
) -> SdeProblem:
    """Geometric Brownian motion with its closed-form terminal solution."""
    drift = CoefficientField(
        partial(_linear, mu),
        lipschitz=max(abs(mu), 1e-12),
        holder=1.0,
        d_y=partial(_const, mu),
        role=DRIFT,
    )
    diffusion = CoefficientField(
        partial(_linear, sigma),
        lipschitz=max(abs(sigma), 1e-12),
        holder=1.0,
        d_y=partial(_const, sigma),
        role=DIFFUSION,
    )
    return SdeProblem(
        drift,
        diffusion,
        eta,
        horizon,
        terminal_solution=partial(_gbm_solution, mu, sigma, eta),
        name="gbm",
    )


def constant_problem(
    mu: float = 0.5,
    sigma: float = 1.5,
    eta: float = 0.0,
    horizon: float = 1.0,
) -> SdeProblem:
    """Constant coefficients: X(T) = eta + mu*T + sigma*W(T), exact for all schemes."""
    drift = CoefficientField(
        partial(_const, mu),
        lipschitz=max(abs(mu), 1e-12),
        holder=1.0,
        d_y=_zero,
        role=DRIFT,
    )
    diffusion = CoefficientField(
        partial(_const, sigma),
        lipschitz=max(abs(sigma), 1e-12),
        holder=1.0,
        d_y=_zero,
        role=DIFFUSION,
    )
    return SdeProblem(
        drift,
        diffusion,
        eta,
        horizon,
        terminal_solution=partial(_constant_solution, mu, sigma, eta),
        name="constant",
    )


_BUILTIN_PARAMS = {
    "paper-sine": ("gamma1", "m", "eta", "horizon"),
    "gbm": ("mu", "sigma", "eta", "horizon"),
    "constant": ("mu", "sigma", "eta", "horizon"),
}
_BUILTINS: Dict[str, Callable[..., SdeProblem]] = {
    "paper-sine": paper_sine_problem,
    "gbm": gbm_problem,
    "constant": constant_problem,
}


def builtin_problem(name: str, **params) -> SdeProblem:
    """Look up a built-in problem by id; unknown names or params are errors."""
    if name not in _BUILTINS:
        raise InvalidArgumentError(
            f"unknown problem {name!r}; built-ins: {sorted(_BUILTINS)}"
        )
    allowed = _BUILTIN_PARAMS[name]
    for key in params:
        if key not in allowed:
            raise InvalidArgumentError(
                f"problem {name!r} does not take parameter {key!r} (allowed: {allowed})"
            )
    return _BUILTINS[name](**params)


# --------------------------------------------------------------------------
# Precision schedules and noise specification
# --------------------------------------------------------------------------

SCHEDULE_INV_SQRT = "n^-0.5"


@dataclass(frozen=True)
class DeltaSchedule:
    """A precision level: either a constant in [0,1] or the rule n^(-1/2)."""

    kind: str  # "const" | "inv-sqrt"
    value: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("const", "inv-sqrt"):
            raise InvalidArgumentError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "const" and not (0.0 <= self.value <= 1.0):
            raise InvalidArgumentError(
                f"constant precision must lie in [0, 1], got {self.value}"
            )

    def at(self, n: int) -> float:
        if self.kind == "const":
            return self.value
        return float(n) ** -0.5

    @property
    def label(self) -> str:
        return repr(self.value) if self.kind == "const" else SCHEDULE_INV_SQRT

    @staticmethod
    def parse(spec) -> "DeltaSchedule":
        if isinstance(spec, DeltaSchedule):
            return spec
        if isinstance(spec, (int, float)):
            return DeltaSchedule("const", float(spec))
        text = str(spec).strip().lower().replace("**", "^")
        if text in (SCHEDULE_INV_SQRT, "n^-1/2", "inv-sqrt"):
            return DeltaSchedule("inv-sqrt")
        try:
            return DeltaSchedule("const", float(text))
        except ValueError:
            raise InvalidArgumentError(
                f"cannot parse precision schedule {spec!r}; "
                f"use a number in [0,1] or '{SCHEDULE_INV_SQRT}'"
            ) from None


@dataclass(frozen=True)
class PrecisionPair:
    delta1: DeltaSchedule
    delta2: DeltaSchedule

    @property
    def label(self) -> str:
        return f"d1={self.delta1.label},d2={self.delta2.label}"

    @staticmethod
    def of(d1, d2) -> "PrecisionPair":
        return PrecisionPair(DeltaSchedule.parse(d1), DeltaSchedule.parse(d2))


EXACT_INFO = PrecisionPair.of(0.0, 0.0)

NOISE_MODE_CONST_ONE = "const-one"
_NOISE_MODES = (MODE_PER_CALL, MODE_POINT_KEYED, NOISE_MODE_CONST_ONE)


def _one(t, y):
    return np.broadcast_arrays(np.asarray(t, dtype=np.float64) * 0.0 + 1.0, y)[0]


@dataclass(frozen=True)
class NoiseSpec:
    """How corruptions are generated for the drift and diffusion oracles.

    The default matches the experimental protocol: fresh bounded noise at
    every evaluation, linear-growth class for the drift, uniformly-bounded
    class for the diffusion.  `const-one` pins the corruption to the
    worst-case constant function p = 1.
    """

    mode: str = MODE_PER_CALL
    drift_class: CorruptionClass = CorruptionClass.K1
    diffusion_class: CorruptionClass = CorruptionClass.K2
    uniform01: bool = False
    saturate_growth: bool = False

    def __post_init__(self) -> None:
        if self.mode not in _NOISE_MODES:
            raise InvalidArgumentError(
                f"noise mode must be one of {_NOISE_MODES}, got {self.mode!r}"
            )

    def oracle(self, base: CoefficientField, delta: float) -> Union[CoefficientField, NoisyOracle]:
        if delta == 0.0:
            return base
        cls = self.drift_class if base.role == DRIFT else self.diffusion_class
        if self.mode == NOISE_MODE_CONST_ONE:
            return NoisyOracle(base, delta, cls, mode=MODE_FUNCTION, p=_one)
        return NoisyOracle(
            base,
            delta,
            cls,
            mode=self.mode,
            uniform01=self.uniform01,
            saturate_growth=self.saturate_growth,
        )


# --------------------------------------------------------------------------
# Experiment configuration and result types
# --------------------------------------------------------------------------

_DEFAULT_GRID = (16, 32, 64, 128, 256, 512, 1024)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a convergence sweep needs; identical configs give identical tables.

    `ref_factor` is the mesh refinement of the reference run (1000 reproduces the
    full benchmark protocol; the desk-scale default of 100 keeps a full
    sweep in CI minutes).  `xi_seed` separates the drift-sampling randomization from
    the Wiener seed so their independence can be exercised.
    """

    problem: str = "paper-sine"
    problem_params: Mapping[str, float] = field(default_factory=dict)
    schemes: Tuple[SchemeKind, ...] = (SchemeKind.DF_RAND_MILSTEIN,)
    n_grid: Tuple[int, ...] = _DEFAULT_GRID
    q: float = 2.0
    trajectories: int = 1000
    ref_factor: int = 100
    precisions: Tuple[PrecisionPair, ...] = (EXACT_INFO,)
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0
    xi_seed: Optional[int] = None
    batch_size: int = 0

    def __post_init__(self) -> None:
        if not self.schemes:
            raise InvalidArgumentError("scheme list must not be empty")
        if not self.n_grid:
            raise InvalidArgumentError("n grid must not be empty")
        for n in self.n_grid:
            if not (isinstance(n, (int, np.integer)) and n >= 1):
                raise InvalidArgumentError(f"mesh cardinality must be >= 1, got {n}")
        if len(set(self.n_grid)) != len(self.n_grid):
            raise InvalidArgumentError("n grid contains duplicates")
        if self.q < 2.0:
            raise InvalidArgumentError(f"error exponent q must be >= 2, got {self.q}")
        if self.trajectories < 1:
            raise InvalidArgumentError("trajectory count must be >= 1")
        if len(self.n_grid) >= 3 and self.trajectories < 100:
            raise InvalidArgumentError(
                "rate fits need at least 100 trajectories; "
                "shrink the n grid below 3 points or raise K"
            )
        if self.ref_factor < 1:
            raise InvalidArgumentError("reference factor must be >= 1")
        if not self.precisions:
            raise InvalidArgumentError("precision schedule list must not be empty")

    def build_problem(self) -> SdeProblem:
        return builtin_problem(self.problem, **dict(self.problem_params))

    def xi_base_seed(self) -> int:
        return self.seed if self.xi_seed is None else self.xi_seed


@dataclass(frozen=True)
class ErrorRow:
    """One Monte Carlo estimate keyed by (scheme, n, delta1, delta2)."""

    scheme: str
    n: int
    delta1: float
    delta2: float
    q: float
    error: float
    stderr: float
    seconds: float
    schedule: str = ""

    def key(self) -> Tuple[str, int, float, float]:
        return (self.scheme, self.n, self.delta1, self.delta2)


@dataclass(frozen=True)
class ErrorTable:
    rows: Tuple[ErrorRow, ...]

    def __post_init__(self) -> None:
        keys = [r.key() for r in self.rows]
        if len(set(keys)) != len(keys):
            raise InvalidArgumentError(
                "error table rows must be uniquely keyed by (scheme, n, d1, d2); "
                "two precision schedules coincide on some n"
            )
        for r in self.rows:
            if r.error < 0.0:
                raise InvalidArgumentError("error estimates cannot be negative")

    def subset(self, scheme: Optional[str] = None, schedule: Optional[str] = None):
        out = self.rows
        if scheme is not None:
            out = tuple(r for r in out if r.scheme == scheme)
        if schedule is not None:
            out = tuple(r for r in out if r.schedule == schedule)
        return out

    def row(self, scheme: str, n: int) -> ErrorRow:
        hits = [r for r in self.rows if r.scheme == scheme and r.n == n]
        if len(hits) != 1:
            raise InvalidArgumentError(
                f"expected exactly one row for ({scheme}, {n}), found {len(hits)}"
            )
        return hits[0]


@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of -log(error) against log(n); positive = decay."""

    slope: float
    intercept: float
    r2: float
    scheme: str = ""
    schedule: str = ""


# --------------------------------------------------------------------------
# Reference solutions
# --------------------------------------------------------------------------


def reference_terminal(
    problem: SdeProblem,
    path: WienerPath,
    xi_stream: int = 0,
    *,
    initial_stream: int = 0,
) -> float:
    """Ground-truth X(T) for one Brownian path.

    Closed-form problems are evaluated exactly at W(T); otherwise the
    derivative-free randomized Milstein scheme runs with EXACT coefficients
    over the path's own (fine) mesh.  Noise never enters the reference: it
    would contaminate the quantity being measured.
    """
    if problem.terminal_solution is not None:
        return float(problem.terminal_solution(problem.horizon, path.terminal()))
    mesh = path.mesh
    xi = xi_batch([xi_stream], mesh, StreamPurpose.XI_REF)
    x0 = problem.initial_values(
        np.array([derive_stream(initial_stream, StreamPurpose.INIT)], dtype=np.uint64)
    )
    out = simulate_batch(
        problem.drift,
        problem.diffusion,
        SchemeKind.DF_RAND_MILSTEIN,
        mesh,
        path.increments[None, :],
        xi,
        x0,
    )
    return float(out[0])


# --------------------------------------------------------------------------
# Batch machinery
# --------------------------------------------------------------------------


def _auto_batch(config: ExperimentConfig, n: int) -> int:
    # The fine pass is streamed in chunks, so batch width is memory-cheap and
    # wide batches amortize the per-step dispatch overhead.
    if config.batch_size > 0:
        return config.batch_size
    return int(min(config.trajectories, 512))


def _batch_bounds(total: int, size: int):
    return [(k0, min(k0 + size, total)) for k0 in range(0, total, size)]


@dataclass
class _BatchState:
    """Shared per-(n, batch) quantities reused by every row at this n."""

    mesh: Mesh
    coarse: np.ndarray        # (B, n)
    xi: np.ndarray            # (B, n)
    ref: np.ndarray           # (B,)
    x0: np.ndarray            # (B,)
    noise_streams: np.ndarray  # (B,)


def _prepare_batch(problem: SdeProblem, config: ExperimentConfig, n: int, k0: int, k1: int) -> _BatchState:
    """Stream the fine mesh once per batch: reference terminals + coarse increments.

    Fine increments and reference sampling times come straight from their
    counters chunk by chunk, so memory stays bounded and neither the coarse
    block sums nor the reference stepping depend on the chunk size.
    """
    t_hor = problem.horizon
    r = config.ref_factor
    mesh = Mesh(t_hor, n)
    ks = np.arange(k0, k1)
    base = np.array([derive_stream(config.seed, int(k)) for k in ks], dtype=np.uint64)
    xi_base = np.array(
        [derive_stream(config.xi_base_seed(), int(k)) for k in ks], dtype=np.uint64
    )
    w_streams = np.array(
        [derive_stream(int(b), StreamPurpose.WIENER) for b in base], dtype=np.uint64
    )[:, None]
    init_streams = np.array(
        [derive_stream(int(b), StreamPurpose.INIT) for b in base], dtype=np.uint64
    )
    x0 = problem.initial_values(init_streams)

    n_fine = r * n
    h_fine = t_hor / n_fine
    sqrt_h = math.sqrt(h_fine)
    need_run = problem.terminal_solution is None
    xi_ref_keys = None
    if need_run:
        xi_ref_keys = np.array(
            [derive_stream(int(b), StreamPurpose.XI_REF) for b in xi_base],
            dtype=np.uint64,
        )[:, None]
    nb = len(ks)
    coarse = np.empty((nb, n), dtype=np.float64)
    x = x0.copy()
    blocks = max(1, 8192 // r)
    for j0 in range(0, n, blocks):
        j1 = min(j0 + blocks, n)
        counters = np.arange(j0 * r, j1 * r, dtype=np.uint64)
        w_chunk = counter_gaussians(w_streams, counters[None, :]) * sqrt_h
        coarse[:, j0:j1] = w_chunk.reshape(nb, j1 - j0, r).sum(axis=2)
        if need_run:
            t_left = counters.astype(np.float64) * h_fine
            u = counter_uniforms(xi_ref_keys, counters[None, :])
            xi_chunk = np.minimum(t_left[None, :] + h_fine * u, t_left[None, :] + h_fine)
            x = drive_df_exact_chunk(
                problem.drift, problem.diffusion, x, t_left, h_fine, w_chunk, xi_chunk
            )
    if need_run:
        ref = x
    else:
        ref = np.asarray(
            problem.terminal_solution(t_hor, coarse.sum(axis=1)), dtype=np.float64
        )
    xi = xi_batch(xi_base, mesh, StreamPurpose.XI)
    return _BatchState(mesh, coarse, xi, ref, x0, base)


def _row_qpow(
    problem: SdeProblem,
    config: ExperimentConfig,
    scheme: SchemeKind,
    d1: float,
    d2: float,
    state: _BatchState,
) -> np.ndarray:
    drift = config.noise.oracle(problem.drift, d1)
    diffusion = config.noise.oracle(problem.diffusion, d2)
    terminal = simulate_batch(
        drift,
        diffusion,
        scheme,
        state.mesh,
        state.coarse,
        state.xi,
        state.x0,
        noise_streams=state.noise_streams,
    )
    return np.abs(state.ref - terminal) ** config.q


def _sweep_task(problem: SdeProblem, config: ExperimentConfig, n: int, k0: int, k1: int):
    """Compute every row's q-power samples for one batch of trajectories."""
    t0 = time.perf_counter()
    state = _prepare_batch(problem, config, n, k0, k1)
    ref_seconds = time.perf_counter() - t0
    out = {}
    for scheme in config.schemes:
        for pair in config.precisions:
            d1, d2 = pair.delta1.at(n), pair.delta2.at(n)
            t1 = time.perf_counter()
            qpow = _row_qpow(problem, config, scheme, d1, d2, state)
            out[(scheme.value, pair.label)] = (qpow, time.perf_counter() - t1)
    return n, k0, ref_seconds, out


def _finalize_row(
    scheme: SchemeKind,
    pair: PrecisionPair,
    n: int,
    q: float,
    qpow: np.ndarray,
    seconds: float,
) -> ErrorRow:
    mean = float(np.mean(qpow))
    err = mean ** (1.0 / q)
    if qpow.size > 1 and mean > 0.0:
        se_mean = float(np.std(qpow, ddof=1)) / math.sqrt(qpow.size)
        stderr = se_mean * err ** (1.0 - q) / q
    else:
        stderr = 0.0
    return ErrorRow(
        scheme=scheme.value,
        n=int(n),
        delta1=pair.delta1.at(n),
        delta2=pair.delta2.at(n),
        q=q,
        error=err,
        stderr=stderr,
        seconds=seconds,
        schedule=pair.label,
    )


def _validate_against_problem(config: ExperimentConfig, problem: SdeProblem) -> None:
    if problem.terminal_solution is None and config.ref_factor < 2:
        raise InvalidArgumentError(
            "reference factor must be >= 2 when the problem has no closed-form solution"
        )
    keys = set()
    for scheme in config.schemes:
        for pair in config.precisions:
            for n in config.n_grid:
                key = (scheme.value, n, pair.delta1.at(n), pair.delta2.at(n))
                if key in keys:
                    raise InvalidArgumentError(
                        f"precision schedules collide at row {key}; rows must be "
                        "uniquely keyed by (scheme, n, delta1, delta2)"
                    )
                keys.add(key)


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------


def estimate_strong_error(
    config: ExperimentConfig,
    scheme: SchemeKind,
    n: int,
    delta1: float,
    delta2: float,
    *,
    problem: Optional[SdeProblem] = None,
) -> ErrorRow:
    """One Monte Carlo strong-error estimate at fixed (scheme, n, d1, d2).

    Identical streams to the full sweep: calling this for each grid point
    separately reproduces run_experiment's table bit for bit.
    """
    prob = problem if problem is not None else config.build_problem()
    pair = PrecisionPair.of(delta1, delta2)
    cfg = replace(config, schemes=(scheme,), precisions=(pair,), n_grid=(int(n),))
    _validate_against_problem(cfg, prob)
    k = cfg.trajectories
    qpow = np.empty(k, dtype=np.float64)
    seconds = 0.0
    t0 = time.perf_counter()
    for k0, k1 in _batch_bounds(k, _auto_batch(cfg, n)):
        state = _prepare_batch(prob, cfg, n, k0, k1)
        qpow[k0:k1] = _row_qpow(prob, cfg, scheme, pair.delta1.at(n), pair.delta2.at(n), state)
    seconds = time.perf_counter() - t0
    return _finalize_row(scheme, pair, n, cfg.q, qpow, seconds)


def fit_rate(rows: Sequence[ErrorRow]) -> RateFit:
    """Least-squares regression of -log(error) on log(n).

    The slope approximates the empirical convergence rate (positive means
    the error decays); requires at least three distinct mesh sizes and
    strictly positive errors.
    """
    if len(rows) < 3 or len({r.n for r in rows}) < 3:
        raise InvalidArgumentError("a rate fit needs at least 3 distinct mesh sizes")
    errs = np.array([r.error for r in rows], dtype=np.float64)
    if np.any(errs <= 0.0):
        raise DegenerateFitError(
            "zero error estimate in the fit window; the empirical rate is undefined"
        )
    x = np.log(np.array([r.n for r in rows], dtype=np.float64))
    y = -np.log(errs)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot > 0.0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0
    sch = {r.scheme for r in rows}
    lab = {r.schedule for r in rows}
    return RateFit(
        slope=float(slope),
        intercept=float(intercept),
        r2=r2,
        scheme=sch.pop() if len(sch) == 1 else "",
        schedule=lab.pop() if len(lab) == 1 else "",
    )


ProgressFn = Callable[[int, int], None]


def run_experiment(
    config: ExperimentConfig,
    *,
    problem: Optional[SdeProblem] = None,
    workers: int = 1,
    progress: Optional[ProgressFn] = None,
) -> Tuple[ErrorTable, Tuple[RateFit, ...]]:
    """Full sweep over (scheme, n, precision schedule) plus rate fits.

    Deterministic given the master seed: trajectories are keyed work units
    and the reduction order is fixed, so the resulting table is identical
    for any worker count or batch size.  Rate fits are produced per
    (scheme, schedule) whenever the grid has at least 3 mesh sizes.
    """
    prob = problem if problem is not None else config.build_problem()
    _validate_against_problem(config, prob)
    k = config.trajectories
    tasks = []
    for n in config.n_grid:
        for k0, k1 in _batch_bounds(k, _auto_batch(config, n)):
            tasks.append((n, k0, k1))
    acc: Dict[Tuple[str, str, int], np.ndarray] = {}
    secs: Dict[Tuple[str, str, int], float] = {}
    ref_secs: Dict[int, float] = {n: 0.0 for n in config.n_grid}
    for scheme in config.schemes:
        for pair in config.precisions:
            for n in config.n_grid:
                acc[(scheme.value, pair.label, n)] = np.empty(k, dtype=np.float64)
                secs[(scheme.value, pair.label, n)] = 0.0

    def _absorb(n, k0, ref_s, out):
        ref_secs[n] += ref_s
        for (scheme_v, label), (qpow, s) in out.items():
            arr = acc[(scheme_v, label, n)]
            arr[k0 : k0 + qpow.size] = qpow
            secs[(scheme_v, label, n)] += s

    done = 0
    if workers <= 1:
        for n, k0, k1 in tasks:
            _absorb(*_sweep_task(prob, config, n, k0, k1))
            done += 1
            if progress is not None:
                progress(done, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_sweep_task, prob, config, n, k0, k1) for n, k0, k1 in tasks]
            for fut in as_completed(futs):
                _absorb(*fut.result())
                done += 1
                if progress is not None:
                    progress(done, len(tasks))

    per_n_rows = max(1, len(config.schemes) * len(config.precisions))
    rows = []
    for scheme in config.schemes:
        for pair in config.precisions:
            for n in config.n_grid:
                key = (scheme.value, pair.label, n)
                seconds = secs[key] + ref_secs[n] / per_n_rows
                rows.append(
                    _finalize_row(scheme, pair, n, config.q, acc[key], seconds)
                )
    table = ErrorTable(tuple(rows))
    fits = []
    if len(config.n_grid) >= 3:
        for scheme in config.schemes:
            for pair in config.precisions:
                group = [
                    r
                    for r in table.rows
                    if r.scheme == scheme.value and r.schedule == pair.label
                ]
                fits.append(fit_rate(group))
    return table, tuple(fits)
