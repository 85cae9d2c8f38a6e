"""Command-line frontend: convergence sweeps, trajectory dumps, self-tests.

Configuration is a TOML file; every CLI flag overrides its file value.
Unknown keys anywhere in the file are hard errors, so typos never silently
fall back to defaults.  Exit codes: 0 success, 1 validation error,
2 runtime/numeric error, 3 self-test failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version-dependent import
    import tomli as tomllib

from . import harness, oracles, schemes, sde_core
from .harness import (
    ErrorTable,
    ExperimentConfig,
    NoiseSpec,
    PrecisionPair,
    builtin_problem,
)
from .oracles import CorruptionClass, NoisyOracle
from .schemes import RandomizationStream, SchemeKind, run_scheme
from .sde_core import (
    CoefficientField,
    InvalidArgumentError,
    Mesh,
    SdeError,
    derive_stream,
    growth_constant,
    wiener_generate,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_SELFTEST = 3


class ConfigError(SdeError):
    """Raised for any malformed or contradictory configuration input."""


# --------------------------------------------------------------------------
# Config file handling
# --------------------------------------------------------------------------

_SECTION_KEYS = {
    "problem": {"name", "gamma1", "m", "mu", "sigma", "eta", "horizon"},
    "run": {
        "schemes",
        "n_grid",
        "q",
        "trajectories",
        "ref_factor",
        "seed",
        "xi_seed",
        "batch_size",
        "workers",
    },
    "noise": {"mode", "drift_class", "diffusion_class", "uniform01", "saturate_growth"},
    "output": {"outdir", "errors_csv", "rates_csv", "plot_svg", "trajectory_csv"},
}

_CLASSES = {c.value: c for c in CorruptionClass}


def _check_keys(section: str, table: dict) -> None:
    allowed = _SECTION_KEYS[section]
    for key in table:
        if key not in allowed:
            raise ConfigError(
                f"unknown key [{section}].{key}; allowed: {sorted(allowed)}"
            )


def load_config_file(path: Path) -> dict:
    """Parse and structurally validate a TOML experiment config."""
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
    known = set(_SECTION_KEYS) | {"precision"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown section [{key}]; allowed: {sorted(known)}")
    for section in _SECTION_KEYS:
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"[{section}] must be a table")
            _check_keys(section, raw[section])
    for i, entry in enumerate(raw.get("precision", [])):
        if not isinstance(entry, dict):
            raise ConfigError("[[precision]] entries must be tables")
        for key in entry:
            if key not in ("delta1", "delta2"):
                raise ConfigError(
                    f"unknown key [[precision]][{i}].{key}; allowed: delta1, delta2"
                )
    return raw


def _parse_schemes(values) -> tuple:
    out = []
    for v in values:
        try:
            out.append(SchemeKind(v))
        except ValueError:
            raise ConfigError(
                f"unknown scheme {v!r}; choose from "
                f"{[k.value for k in SchemeKind]}"
            ) from None
    return tuple(out)


def config_from_file(raw: dict, overrides: argparse.Namespace) -> tuple:
    """Merge file values and CLI overrides into (ExperimentConfig, problem params, output dict, workers)."""
    prob = dict(raw.get("problem", {}))
    run = dict(raw.get("run", {}))
    noise_raw = dict(raw.get("noise", {}))
    output = dict(raw.get("output", {}))

    problem_name = prob.pop("name", "paper-sine")
    precisions = [
        PrecisionPair.of(e.get("delta1", 0.0), e.get("delta2", 0.0))
        for e in raw.get("precision", [])
    ] or [PrecisionPair.of(0.0, 0.0)]

    if getattr(overrides, "delta1", None) is not None or getattr(overrides, "delta2", None) is not None:
        d1 = overrides.delta1 if overrides.delta1 is not None else "0"
        d2 = overrides.delta2 if overrides.delta2 is not None else "0"
        precisions = [PrecisionPair.of(d1, d2)]

    try:
        noise = NoiseSpec(
            mode=noise_raw.get("mode", oracles.MODE_PER_CALL),
            drift_class=_CLASSES.get(noise_raw.get("drift_class", "K1"))
            or _bad_class(noise_raw.get("drift_class")),
            diffusion_class=_CLASSES.get(noise_raw.get("diffusion_class", "K2"))
            or _bad_class(noise_raw.get("diffusion_class")),
            uniform01=bool(noise_raw.get("uniform01", False)),
            saturate_growth=bool(noise_raw.get("saturate_growth", False)),
        )
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc

    workers = int(run.pop("workers", 1))
    if overrides.workers is not None:
        workers = overrides.workers

    kwargs = dict(
        problem=problem_name,
        problem_params=prob,
        n_grid=tuple(int(n) for n in run.get("n_grid", harness._DEFAULT_GRID)),
        q=float(run.get("q", 2.0)),
        trajectories=int(run.get("trajectories", 1000)),
        ref_factor=int(run.get("ref_factor", 100)),
        precisions=tuple(precisions),
        noise=noise,
        seed=int(run.get("seed", 0)),
        batch_size=int(run.get("batch_size", 0)),
    )
    if run.get("xi_seed") is not None:
        kwargs["xi_seed"] = int(run["xi_seed"])
    if "schemes" in run:
        kwargs["schemes"] = _parse_schemes(run["schemes"])
    if overrides.seed is not None:
        kwargs["seed"] = overrides.seed
    if overrides.trajectories is not None:
        kwargs["trajectories"] = overrides.trajectories
    if overrides.ref_factor is not None:
        kwargs["ref_factor"] = overrides.ref_factor
    if getattr(overrides, "paper_scale", False):
        kwargs["trajectories"] = 10_000
        kwargs["ref_factor"] = 1000
    try:
        config = ExperimentConfig(**kwargs)
        config.build_problem()  # validates problem name and params early
    except (InvalidArgumentError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return config, output, workers


def _bad_class(name):
    raise ConfigError(
        f"unknown corruption class {name!r}; allowed: {sorted(_CLASSES)}"
    )


# --------------------------------------------------------------------------
# CSV / SVG emission
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    # repr gives the shortest round-trip decimal; locale-independent.
    return repr(float(x))


def write_errors_csv(path: Path, table: ErrorTable, *, timing: bool = True) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "n", "delta1", "delta2", "q", "error", "stderr", "seconds"])
        for r in table.rows:
            w.writerow(
                [
                    r.scheme,
                    r.n,
                    _fmt(r.delta1),
                    _fmt(r.delta2),
                    _fmt(r.q),
                    _fmt(r.error),
                    _fmt(r.stderr),
                    f"{r.seconds:.3f}" if timing else "0.000",
                ]
            )


def write_rates_csv(path: Path, fits) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "delta-schedule", "slope", "r2"])
        for f in fits:
            w.writerow([f.scheme, f.schedule, _fmt(f.slope), _fmt(f.r2)])


def write_loglog_svg(path: Path, table: ErrorTable) -> None:
    """Static log-log error chart, one polyline per (scheme, schedule)."""
    import matplotlib

    matplotlib.use("svg", force=True)
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7.0, 5.0))
    groups = {}
    for r in table.rows:
        groups.setdefault((r.scheme, r.schedule), []).append(r)
    for (scheme, schedule), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r.n)
        ax.loglog(
            [r.n for r in rows],
            [max(r.error, 1e-300) for r in rows],
            marker="o",
            label=f"{scheme} {schedule}",
        )
    ax.set_xlabel("n")
    ax.set_ylabel("strong error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_convergence(args: argparse.Namespace) -> int:
    raw = load_config_file(Path(args.config))
    config, output, workers = config_from_file(raw, args)
    outdir = Path(args.outdir if args.outdir is not None else output.get("outdir", "."))
    outdir.mkdir(parents=True, exist_ok=True)
    if args.verbose:
        print(
            f"problem={config.problem} schemes={[s.value for s in config.schemes]} "
            f"n={list(config.n_grid)} K={config.trajectories} r={config.ref_factor} "
            f"workers={workers}",
            file=sys.stderr,
        )

    def progress(done: int, total: int) -> None:
        if args.verbose:
            print(f"\r{done}/{total} batches", end="", file=sys.stderr, flush=True)

    table, fits = harness.run_experiment(config, workers=workers, progress=progress)
    if args.verbose:
        print(file=sys.stderr)
    errors_path = outdir / output.get("errors_csv", "errors.csv")
    rates_path = outdir / output.get("rates_csv", "rates.csv")
    write_errors_csv(errors_path, table, timing=not args.no_timing)
    write_rates_csv(rates_path, fits)
    plot = args.plot if args.plot is not None else output.get("plot_svg", "")
    if plot:
        write_loglog_svg(outdir / plot, table)
    for f in fits:
        print(f"{f.scheme} {f.schedule}: slope={f.slope:.4f} r2={f.r2:.3f}")
    print(f"wrote {errors_path} and {rates_path}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    raw = load_config_file(Path(args.config))
    config, output, _ = config_from_file(raw, args)
    problem = config.build_problem()
    n = args.n if args.n is not None else config.n_grid[0]
    scheme = SchemeKind(args.scheme) if args.scheme else config.schemes[0]
    pair = config.precisions[0]
    d1, d2 = pair.delta1.at(n), pair.delta2.at(n)
    k = args.trajectory
    mesh = Mesh(problem.horizon, n)
    base = derive_stream(config.seed, k)
    path = wiener_generate(n, problem.horizon, base)
    xi = schemes.xi_batch(
        np.array([derive_stream(config.xi_base_seed(), k)], dtype=np.uint64), mesh
    )[0]
    drift = config.noise.oracle(problem.drift, d1)
    diffusion = config.noise.oracle(problem.diffusion, d2)
    if isinstance(drift, NoisyOracle):
        drift = drift.with_stream(base)
    if isinstance(diffusion, NoisyOracle):
        diffusion = diffusion.with_stream(base)
    run = run_scheme(
        problem,
        (drift, diffusion),
        scheme,
        mesh,
        path.increments,
        xi,
        record_trajectory=True,
        initial_stream=base,
    )
    out_path = Path(args.out if args.out is not None else output.get("trajectory_csv", "trajectory.csv"))
    nodes = mesh.nodes()
    with out_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x"])
        for t, x in zip(nodes, run.trajectory):
            w.writerow([_fmt(t), _fmt(x)])
    print(
        f"wrote {out_path} ({n + 1} rows, scheme={scheme.value}, "
        f"terminal={run.terminal:.6g}, evaluations={run.evaluations})"
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# Self-test suites
# --------------------------------------------------------------------------


def _suite_operator_bounds(samples: int, seed: int) -> Optional[str]:
    t_hor = 1.0
    for i, fld in enumerate(_bound_check_fields()):
        growth = growth_constant(fld.lipschitz, t_hor, fld.holder, fld.holder)
        excess = sde_core.operator_bound_excess(
            fld, t_hor, growth, samples=samples, stream=derive_stream(seed, i)
        )
        if excess > 1e-12:
            return f"difference-operator bound violated by field #{i} (excess {excess:.2e})"
    return None


def _suite_oracle_envelopes(samples: int, seed: int) -> Optional[str]:
    base_a = builtin_problem("paper-sine").drift
    base_b = builtin_problem("paper-sine").diffusion
    cases = [
        NoisyOracle(base_a, 0.3, CorruptionClass.K1, stream=derive_stream(seed, 1)),
        NoisyOracle(base_a, 0.3, CorruptionClass.K1, stream=derive_stream(seed, 2), saturate_growth=True),
        NoisyOracle(base_b, 0.05, CorruptionClass.K2, stream=derive_stream(seed, 3)),
        NoisyOracle(base_b, 0.05, CorruptionClass.K2, stream=derive_stream(seed, 4), mode=oracles.MODE_POINT_KEYED),
        NoisyOracle(base_b, 0.2, CorruptionClass.K1_LIP, stream=derive_stream(seed, 5)),
    ]
    for i, orc in enumerate(cases):
        excess = oracles.corruption_excess(
            orc, 1.0, samples=samples, stream=derive_stream(seed, 10 + i)
        )
        if excess > 1e-12:
            return (
                f"{orc.corruption.value} envelope violated in mode {orc.mode} "
                f"(excess {excess:.2e})"
            )
    return None


def _suite_coarsening(samples: int, seed: int) -> Optional[str]:
    for i in range(max(1, samples // 1000)):
        path = wiener_generate(240, 1.0, derive_stream(seed, i))
        for factor in (1, 2, 3, 5, 8, 240):
            c = sde_core.coarsen(path, factor)
            blocks = path.increments.reshape(-1, factor).sum(axis=1)
            if not np.array_equal(c, blocks):
                return f"coarsen factor {factor} is not the exact block sum"
        two_step = sde_core.coarsen_increments(sde_core.coarsen(path, 4), 5)
        direct = sde_core.coarsen(path, 20)
        if np.max(np.abs(two_step - direct)) > 1e-12:
            return "nested coarsening (4 then 5) deviates from direct factor 20"
        if abs(sde_core.coarsen(path, 240)[0] - np.sum(path.increments)) > 1e-12:
            return "coarsening does not preserve the path total"
    return None


def _suite_constant_exactness(samples: int, seed: int) -> Optional[str]:
    problem = builtin_problem("constant", mu=0.7, sigma=1.3, eta=0.25)
    for i, n in enumerate((1, 10, 1000)):
        mesh = Mesh(1.0, n)
        path = wiener_generate(n, 1.0, derive_stream(seed, 20 + i))
        exact = 0.25 + 0.7 + 1.3 * path.terminal()
        for kind in SchemeKind:
            xi = RandomizationStream(derive_stream(seed, 21, i))
            run = run_scheme(problem, (problem.drift, problem.diffusion), kind, mesh, path.increments, xi)
            if abs(run.terminal - exact) > 1e-12 * max(1.0, abs(exact)):
                return f"{kind.value} not exact for constant coefficients at n={n}"
    return None


def _suite_linear_equivalence(samples: int, seed: int) -> Optional[str]:
    problem = builtin_problem("gbm", mu=0.4, sigma=0.8)
    mesh = Mesh(1.0, 64)
    for i in range(max(2, samples // 2000)):
        path = wiener_generate(64, 1.0, derive_stream(seed, 30 + i))
        xi = RandomizationStream(derive_stream(seed, 31, i))
        df = run_scheme(problem, (problem.drift, problem.diffusion), SchemeKind.DF_RAND_MILSTEIN,
                        mesh, path.increments, xi, record_trajectory=True)
        rm = run_scheme(problem, (problem.drift, problem.diffusion), SchemeKind.MILSTEIN,
                        mesh, path.increments, xi, record_trajectory=True)
        scale = np.maximum(np.abs(rm.trajectory), 1.0)
        if np.max(np.abs(df.trajectory - rm.trajectory) / scale) > 1e-12:
            return "derivative-free and derivative Milstein disagree on a linear diffusion"
    return None


def _suite_ito_identity(samples: int, seed: int) -> Optional[str]:
    key = derive_stream(seed, 40)
    dw = sde_core.counter_gaussians(key, np.arange(samples, dtype=np.uint64)) * 0.3
    vals = sde_core.ito_double_integral(dw, 0.09)
    if np.any(vals + 0.045 < -1e-15):
        return "iterated integral violates the half-square lower bound"
    # Refining an interval drives the discrete Ito sum to the closed form.
    fine = wiener_generate(4096, 0.09, derive_stream(seed, 41))
    w = np.concatenate([[0.0], np.cumsum(fine.increments)])
    total = w[-1]
    for m, tol in ((16, 0.05), (256, 0.01), (4096, 1e-3)):
        inc = sde_core.coarsen(fine, 4096 // m)
        partial = np.concatenate([[0.0], np.cumsum(inc)])[:-1]
        ito_sum = float(np.sum(partial * inc))
        target = sde_core.ito_double_integral(total, 0.09)
        if abs(ito_sum - target) > tol:
            return f"Ito sum with {m} subintervals missed the closed form by {abs(ito_sum-target):.2e}"
    return None


_BOUND_FIELDS = None


def _bound_check_fields():
    """Analytic diffusion fields with hand-derived class constants."""
    global _BOUND_FIELDS
    if _BOUND_FIELDS is None:
        sine = builtin_problem("paper-sine")
        _BOUND_FIELDS = (
            CoefficientField(lambda t, y: 0.8 * np.asarray(y, dtype=np.float64),
                             lipschitz=0.8, holder=1.0,
                             d_y=lambda t, y: np.full_like(np.asarray(y, dtype=np.float64), 0.8)),
            CoefficientField(lambda t, y: np.sin(y) + 0.5 * np.asarray(t) ** 0.5 * np.cos(y),
                             lipschitz=1.5, holder=0.5,
                             d_y=lambda t, y: np.cos(y) - 0.5 * np.asarray(t) ** 0.5 * np.sin(y)),
            CoefficientField(lambda t, y: 2.0 + np.cos(2.0 * y) * np.asarray(t) ** 0.7,
                             lipschitz=4.0, holder=0.7,
                             d_y=lambda t, y: -2.0 * np.sin(2.0 * y) * np.asarray(t) ** 0.7),
            sine.diffusion,
        )
    return _BOUND_FIELDS


_SUITES = (
    ("operator-bounds", _suite_operator_bounds),
    ("oracle-envelopes", _suite_oracle_envelopes),
    ("coarsening", _suite_coarsening),
    ("constant-exactness", _suite_constant_exactness),
    ("linear-equivalence", _suite_linear_equivalence),
    ("ito-identity", _suite_ito_identity),
)


def run_selftest(samples: int = 10_000, seed: int = 0, report=print) -> bool:
    """Run every invariant suite; returns True when all pass."""
    all_ok = True
    for name, suite in _SUITES:
        try:
            failure = suite(samples, seed)
        except SdeError as exc:
            failure = str(exc)
        ok = failure is None
        all_ok &= ok
        report(f"[{'PASS' if ok else 'FAIL'}] {name}" + ("" if ok else f": {failure}"))
    return all_ok


def cmd_selftest(args: argparse.Namespace) -> int:
    ok = run_selftest(samples=args.samples, seed=args.seed or 0)
    return EXIT_OK if ok else EXIT_SELFTEST


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisysde",
        description="Strong SDE approximation under noisy coefficient information",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    conv = sub.add_parser("convergence", help="run a Monte Carlo convergence sweep")
    conv.add_argument("config", help="TOML experiment configuration")
    conv.add_argument("--seed", type=int, default=None)
    conv.add_argument("--workers", type=int, default=None)
    conv.add_argument("--trajectories", type=int, default=None)
    conv.add_argument("--ref-factor", type=int, default=None, dest="ref_factor")
    conv.add_argument("--delta1", default=None, help="override precision schedule for the drift")
    conv.add_argument("--delta2", default=None, help="override precision schedule for the diffusion")
    conv.add_argument("--paper-scale", action="store_true", dest="paper_scale",
                      help="set r=1000 and K=10000")
    conv.add_argument("--outdir", default=None)
    conv.add_argument("--plot", default=None, help="also write a log-log SVG chart")
    conv.add_argument("--no-timing", action="store_true", dest="no_timing",
                      help="zero the seconds column for byte-stable output")
    conv.add_argument("-v", "--verbose", action="store_true")
    conv.set_defaults(func=cmd_convergence)

    sim = sub.add_parser("simulate", help="dump one trajectory as CSV")
    sim.add_argument("config")
    sim.add_argument("--trajectory", type=int, default=0, help="trajectory index k")
    sim.add_argument("--scheme", default=None, choices=[k.value for k in SchemeKind])
    sim.add_argument("--n", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--workers", type=int, default=None, help=argparse.SUPPRESS)
    sim.add_argument("--trajectories", type=int, default=None, help=argparse.SUPPRESS)
    sim.add_argument("--ref-factor", type=int, default=None, dest="ref_factor", help=argparse.SUPPRESS)
    sim.add_argument("--out", default=None)
    sim.set_defaults(func=cmd_simulate, paper_scale=False)

    selft = sub.add_parser("selftest", help="run the library invariant suites")
    selft.add_argument("--samples", type=int, default=10_000)
    selft.add_argument("--seed", type=int, default=0)
    selft.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
