import dataclasses
import math

import numpy as np
import pytest

from noisysde.harness import (
    DegenerateFitError,
    DeltaSchedule,
    ErrorRow,
    ErrorTable,
    ExperimentConfig,
    NOISE_MODE_CONST_ONE,
    NoiseSpec,
    PrecisionPair,
    builtin_problem,
    estimate_strong_error,
    fit_rate,
    reference_terminal,
    run_experiment,
    _prepare_batch,
)
from noisysde.schemes import SchemeKind
from noisysde.sde_core import (
    InvalidArgumentError,
    Mesh,
    StreamPurpose,
    WienerPath,
    coarsen_increments,
    derive_stream,
    wiener_generate,
    wiener_increments,
)


# ---------------------------------------------------------------- problems


def test_builtin_problem_lookup_and_params():
    sine = builtin_problem("paper-sine", gamma1=0.3)
    assert sine.drift.holder == 0.3
    assert sine.diffusion.holder == 0.8
    assert sine.initial == 1.0
    cap = builtin_problem("paper-sine", gamma1=0.6)
    assert cap.diffusion.holder == 1.0  # capped at 1
    with pytest.raises(InvalidArgumentError):
        builtin_problem("unknown")
    with pytest.raises(InvalidArgumentError):
        builtin_problem("gbm", gamma1=0.2)


def test_paper_sine_values():
    sine = builtin_problem("paper-sine", gamma1=0.2)
    assert sine.drift(1.0, 0.0) == pytest.approx(0.0)
    assert sine.diffusion(0.0, 5.0) == pytest.approx(1.0)  # cos(0) at t=0
    assert sine.drift(1.0, np.pi / 200) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- schedules


def test_delta_schedule_parsing():
    assert DeltaSchedule.parse(0.1).at(64) == 0.1
    assert DeltaSchedule.parse("0.25").at(4) == 0.25
    assert DeltaSchedule.parse("n^-0.5").at(16) == pytest.approx(0.25)
    assert DeltaSchedule.parse("n**-0.5").at(16) == pytest.approx(0.25)
    with pytest.raises(InvalidArgumentError):
        DeltaSchedule.parse("quadratic")
    with pytest.raises(InvalidArgumentError):
        DeltaSchedule.parse(1.5)


def test_precision_pair_labels():
    pair = PrecisionPair.of(0.1, "n^-0.5")
    assert pair.label == "d1=0.1,d2=n^-0.5"


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(schemes=())
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(n_grid=())
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(n_grid=(16, 16))
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(q=1.5)
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(trajectories=0)
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(n_grid=(8, 16, 32), trajectories=50)  # fits need K >= 100
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(ref_factor=0)


def test_reference_factor_requirement_without_closed_form():
    cfg = ExperimentConfig(problem="paper-sine", n_grid=(8,), trajectories=10, ref_factor=1)
    with pytest.raises(InvalidArgumentError):
        estimate_strong_error(cfg, SchemeKind.DF_RAND_MILSTEIN, 8, 0.0, 0.0)
    cfg_ok = ExperimentConfig(problem="gbm", n_grid=(8,), trajectories=10, ref_factor=1)
    row = estimate_strong_error(cfg_ok, SchemeKind.DF_RAND_MILSTEIN, 8, 0.0, 0.0)
    assert row.error > 0.0


def test_colliding_schedules_are_rejected():
    cfg = ExperimentConfig(
        problem="gbm",
        n_grid=(16,),
        trajectories=10,
        ref_factor=1,
        precisions=(PrecisionPair.of(0.25, 0.0), PrecisionPair.of("n^-0.5", 0.0)),
    )
    with pytest.raises(InvalidArgumentError):
        run_experiment(cfg)


# ---------------------------------------------------------------- references


def test_reference_terminal_modes_agree_on_constant_problem():
    problem = builtin_problem("constant", mu=0.4, sigma=1.1, eta=0.2)
    path = wiener_generate(400, 1.0, 77)
    closed = reference_terminal(problem, path, xi_stream=3)
    numeric = reference_terminal(
        dataclasses.replace(problem, terminal_solution=None), path, xi_stream=3
    )
    want = 0.2 + 0.4 + 1.1 * path.terminal()
    assert closed == pytest.approx(want, abs=1e-13)
    assert numeric == pytest.approx(want, abs=1e-12)


def test_gbm_fine_reference_beats_coarse_error_tenfold():
    # RMS(closed form - fine numeric) must sit far below the coarse error.
    from noisysde.schemes import RandomizationStream, run_scheme

    problem = builtin_problem("gbm")
    n, r, trials = 2**8, 2**6, 64
    gap_sq = err_sq = 0.0
    for k in range(trials):
        fine = wiener_generate(r * n, 1.0, derive_stream(123, k))
        numeric = reference_terminal(
            dataclasses.replace(problem, terminal_solution=None),
            fine,
            xi_stream=derive_stream(9, k),
        )
        closed = problem.terminal_solution(1.0, fine.terminal())
        gap_sq += (numeric - closed) ** 2
        coarse = coarsen_increments(fine.increments, r)
        xn = run_scheme(
            problem,
            (problem.drift, problem.diffusion),
            SchemeKind.DF_RAND_MILSTEIN,
            Mesh(1.0, n),
            coarse,
            RandomizationStream(derive_stream(10, k)),
        ).terminal
        err_sq += (closed - xn) ** 2
    assert math.sqrt(gap_sq / trials) * 10.0 <= math.sqrt(err_sq / trials)


def test_doubling_reference_factor_is_self_consistent():
    cfg = lambda r: ExperimentConfig(
        problem="paper-sine", n_grid=(32,), trajectories=400, ref_factor=r, seed=4
    )
    rows = [
        estimate_strong_error(cfg(r), SchemeKind.DF_RAND_MILSTEIN, 32, 0.0, 0.0)
        for r in (50, 100)
    ]
    gap = abs(rows[0].error - rows[1].error)
    assert gap <= 3.0 * math.hypot(rows[0].stderr, rows[1].stderr)


# ---------------------------------------------------------------- coupling


def test_shared_path_coupling_and_reference_agreement():
    # The coarse increments the scheme consumes are exactly the block sums of
    # the fine increments that drive the reference, trajectory by trajectory;
    # and the one-path reference operation reproduces the batched reference.
    cfg = ExperimentConfig(problem="paper-sine", n_grid=(8,), trajectories=6, ref_factor=20, seed=13)
    problem = cfg.build_problem()
    state = _prepare_batch(problem, cfg, 8, 0, 6)
    for k in range(6):
        base = derive_stream(cfg.seed, k)
        fine = wiener_increments(160, 1.0, derive_stream(base, StreamPurpose.WIENER))
        assert np.array_equal(state.coarse[k], coarsen_increments(fine, 20))
        single = reference_terminal(
            problem,
            WienerPath(Mesh(1.0, 160), fine, stream=base),
            xi_stream=derive_stream(cfg.seed, k),
            initial_stream=base,
        )
        assert single == state.ref[k]


# ---------------------------------------------------------------- estimates


def test_constant_problem_estimate_is_machine_zero():
    cfg = ExperimentConfig(problem="constant", n_grid=(16,), trajectories=64, ref_factor=50, seed=2)
    for kind in SchemeKind:
        row = estimate_strong_error(cfg, kind, 16, 0.0, 0.0)
        assert row.error <= 1e-12


def test_estimate_matches_run_experiment_bit_for_bit():
    cfg = ExperimentConfig(
        problem="paper-sine",
        n_grid=(8, 16),
        trajectories=40,
        ref_factor=25,
        precisions=(PrecisionPair.of(0.1, 0.05),),
        seed=21,
    )
    table, _ = run_experiment(cfg)
    for n in (8, 16):
        row = estimate_strong_error(cfg, SchemeKind.DF_RAND_MILSTEIN, n, 0.1, 0.05)
        twin = table.row(SchemeKind.DF_RAND_MILSTEIN.value, n)
        assert (row.error, row.stderr) == (twin.error, twin.stderr)


def test_reproducibility_and_worker_invariance():
    cfg = ExperimentConfig(
        problem="paper-sine",
        n_grid=(8, 32),
        trajectories=60,
        ref_factor=25,
        precisions=(PrecisionPair.of(0.0, 0.0), PrecisionPair.of(0.1, 0.1)),
        seed=31,
    )
    t1, _ = run_experiment(cfg)
    t2, _ = run_experiment(cfg)
    t3, _ = run_experiment(cfg, workers=2)
    for a, b in zip(t1.rows, t2.rows):
        assert (a.error, a.stderr) == (b.error, b.stderr)
    for a, c in zip(t1.rows, t3.rows):
        assert (a.error, a.stderr) == (c.error, c.stderr)


def test_batch_size_does_not_change_results():
    base = dict(problem="gbm", n_grid=(16,), trajectories=30, ref_factor=4, seed=8)
    r1 = estimate_strong_error(ExperimentConfig(**base, batch_size=30), SchemeKind.EULER, 16, 0.0, 0.0)
    r2 = estimate_strong_error(ExperimentConfig(**base, batch_size=7), SchemeKind.EULER, 16, 0.0, 0.0)
    assert r1.error == r2.error


def test_monotone_noise_effect_with_worst_case_corruption():
    base = dict(problem="paper-sine", n_grid=(32,), trajectories=300, ref_factor=40, seed=41)
    clean = estimate_strong_error(ExperimentConfig(**base), SchemeKind.DF_RAND_MILSTEIN, 32, 0.0, 0.0)
    noisy_cfg = ExperimentConfig(**base, noise=NoiseSpec(mode=NOISE_MODE_CONST_ONE))
    noisy = estimate_strong_error(noisy_cfg, SchemeKind.DF_RAND_MILSTEIN, 32, 0.1, 0.1)
    assert clean.error <= noisy.error + 3.0 * math.hypot(clean.stderr, noisy.stderr)


def test_xi_stream_permutation_moves_trajectories_not_estimates():
    base = dict(problem="paper-sine", n_grid=(32,), trajectories=400, ref_factor=40)
    r1 = estimate_strong_error(ExperimentConfig(**base, seed=5), SchemeKind.DF_RAND_MILSTEIN, 32, 0.0, 0.0)
    r2 = estimate_strong_error(ExperimentConfig(**base, seed=5, xi_seed=999), SchemeKind.DF_RAND_MILSTEIN, 32, 0.0, 0.0)
    assert r1.error != r2.error  # trajectories really changed
    assert abs(r1.error - r2.error) <= 5.0 * math.hypot(r1.stderr, r2.stderr)


# ---------------------------------------------------------------- fitting


def test_fit_rate_recovers_exact_power_law():
    rows = [
        ErrorRow("s", n, 0.0, 0.0, 2.0, 3.0 * n**-0.7, 0.0, 0.0, "d")
        for n in (16, 32, 64, 128)
    ]
    fit = fit_rate(rows)
    assert fit.slope == pytest.approx(0.7, abs=1e-12)
    assert fit.intercept == pytest.approx(-math.log(3.0), abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_fit_rate_sees_noise_floor():
    grid_a = (16, 32, 64, 128)
    grid_b = grid_a + (256, 512, 1024)
    mk = lambda ns: [
        ErrorRow("s", n, 0.0, 0.0, 2.0, n**-0.6 + 0.05, 0.0, 0.0, "d") for n in ns
    ]
    fit_a, fit_b = fit_rate(mk(grid_a)), fit_rate(mk(grid_b))
    assert fit_a.slope < 0.6
    assert fit_b.slope < fit_a.slope  # floor bites harder as the grid extends


def test_fit_rate_rejects_degenerate_input():
    rows = [ErrorRow("s", n, 0.0, 0.0, 2.0, 0.1, 0.0, 0.0, "d") for n in (16, 32)]
    with pytest.raises(InvalidArgumentError):
        fit_rate(rows)
    zero = [ErrorRow("s", n, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, "d") for n in (16, 32, 64)]
    with pytest.raises(DegenerateFitError):
        fit_rate(zero)


def test_single_n_yields_table_without_fits():
    cfg = ExperimentConfig(problem="gbm", n_grid=(16,), trajectories=20, ref_factor=1, seed=3)
    table, fits = run_experiment(cfg)
    assert len(table.rows) == 1
    assert fits == ()


def test_error_table_uniqueness_guard():
    row = ErrorRow("s", 16, 0.0, 0.0, 2.0, 0.1, 0.0, 0.0, "d")
    with pytest.raises(InvalidArgumentError):
        ErrorTable((row, row))
