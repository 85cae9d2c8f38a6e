import csv
from pathlib import Path

import numpy as np
import pytest

from noisysde import cli
from noisysde.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_SELFTEST,
    ConfigError,
    load_config_file,
    main,
    run_selftest,
)

TINY = """
[problem]
name = "gbm"
mu = 0.1
sigma = 0.2

[run]
schemes = ["df-rand-milstein", "euler"]
n_grid = [8, 16]
trajectories = 40
ref_factor = 1
seed = 7

[[precision]]
delta1 = 0.0
delta2 = 0.0
"""

SINE = """
[problem]
name = "paper-sine"
gamma1 = 0.2

[run]
n_grid = [8]
trajectories = 20
ref_factor = 10
seed = 3

[noise]
mode = "per-call"
diffusion_class = "K2"
"""


def _write(tmp_path, text, name="config.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- config parsing


def test_unknown_keys_are_hard_errors(tmp_path):
    p = _write(tmp_path, TINY + "\n[run2]\nx = 1\n")
    with pytest.raises(ConfigError, match="run2"):
        load_config_file(p)
    p2 = _write(tmp_path, TINY.replace("seed = 7", "sede = 7"), "typo.toml")
    with pytest.raises(ConfigError, match="sede"):
        load_config_file(p2)
    p3 = _write(tmp_path, SINE + "\n[[precision]]\ndelta3 = 0.1\n", "p3.toml")
    with pytest.raises(ConfigError, match="delta3"):
        load_config_file(p3)


def test_missing_or_malformed_files(tmp_path):
    assert main(["convergence", str(tmp_path / "nope.toml")]) == EXIT_CONFIG
    bad = _write(tmp_path, "this is = not [ toml", "bad.toml")
    assert main(["convergence", str(bad)]) == EXIT_CONFIG


def test_validation_failures_exit_one(tmp_path, capsys):
    empty = _write(tmp_path, TINY.replace('schemes = ["df-rand-milstein", "euler"]', "schemes = []"))
    assert main(["convergence", str(empty)]) == EXIT_CONFIG
    assert "scheme" in capsys.readouterr().err
    bad_scheme = _write(tmp_path, TINY.replace('"euler"', '"heun"'), "s.toml")
    assert main(["convergence", str(bad_scheme)]) == EXIT_CONFIG
    bad_class = _write(tmp_path, SINE.replace('"K2"', '"K9"'), "c.toml")
    assert main(["convergence", str(bad_class)]) == EXIT_CONFIG


def test_degenerate_fit_exits_two(tmp_path):
    # Zero coefficients pin every trajectory to eta, the errors are exactly
    # zero, and the rate fit is degenerate: reported, not guessed.
    cfg = """
[problem]
name = "constant"
mu = 0.0
sigma = 0.0
[run]
n_grid = [4, 8, 16]
trajectories = 100
ref_factor = 1
"""
    p = _write(tmp_path, cfg)
    assert main(["convergence", str(p), "--outdir", str(tmp_path)]) == EXIT_RUNTIME


# ---------------------------------------------------------------- convergence


def test_convergence_writes_expected_csv(tmp_path):
    p = _write(tmp_path, TINY)
    out = tmp_path / "out"
    assert main(["convergence", str(p), "--outdir", str(out)]) == EXIT_OK
    errors = _read_csv(out / "errors.csv")
    assert errors[0] == ["scheme", "n", "delta1", "delta2", "q", "error", "stderr", "seconds"]
    assert len(errors) == 1 + 4  # 2 schemes x 2 mesh sizes
    rates = _read_csv(out / "rates.csv")
    assert rates == [["scheme", "delta-schedule", "slope", "r2"]]  # < 3 mesh sizes: no fit
    schemes = {row[0] for row in errors[1:]}
    assert schemes == {"df-rand-milstein", "euler"}


def test_seed_repeatability_bytes(tmp_path):
    p = _write(tmp_path, TINY)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["convergence", str(p), "--seed", "7", "--outdir", str(out), "--no-timing"]) == EXIT_OK
        outs.append((out / "errors.csv").read_bytes())
    assert outs[0] == outs[1]


def test_worker_count_does_not_change_bytes(tmp_path):
    p = _write(tmp_path, SINE.replace("trajectories = 20", "trajectories = 30"))
    blobs = []
    for name, workers in (("w1", "1"), ("w2", "2")):
        out = tmp_path / name
        assert main([
            "convergence", str(p), "--workers", workers, "--outdir", str(out), "--no-timing",
        ]) == EXIT_OK
        blobs.append((out / "errors.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_timing_column_is_the_only_unstable_field(tmp_path):
    p = _write(tmp_path, TINY)
    rows = []
    for name in ("t1", "t2"):
        out = tmp_path / name
        assert main(["convergence", str(p), "--outdir", str(out)]) == EXIT_OK
        rows.append(_read_csv(out / "errors.csv"))
    stripped = [[r[:-1] for r in rows[i]] for i in (0, 1)]
    assert stripped[0] == stripped[1]


def test_delta_override_and_plot(tmp_path):
    p = _write(tmp_path, SINE)
    out = tmp_path / "plot"
    code = main([
        "convergence", str(p), "--delta1", "0.1", "--delta2", "n^-0.5",
        "--outdir", str(out), "--plot", "err.svg",
    ])
    assert code == EXIT_OK
    errors = _read_csv(out / "errors.csv")
    assert errors[1][2] == "0.1"
    assert float(errors[1][3]) == pytest.approx(8 ** -0.5)
    svg = (out / "err.svg").read_text()
    assert svg.lstrip().startswith("<?xml")
    assert "<svg" in svg


def test_plot_absent_without_flag(tmp_path):
    p = _write(tmp_path, TINY)
    out = tmp_path / "noplot"
    assert main(["convergence", str(p), "--outdir", str(out)]) == EXIT_OK
    assert not list(out.glob("*.svg"))


def test_paper_scale_flag_sets_full_protocol(tmp_path):
    import argparse

    from noisysde.cli import config_from_file

    raw = load_config_file(_write(tmp_path, SINE))
    ns = argparse.Namespace(
        seed=None, workers=None, trajectories=None, ref_factor=None,
        delta1=None, delta2=None, paper_scale=True,
    )
    config, _, _ = config_from_file(raw, ns)
    assert config.trajectories == 10_000
    assert config.ref_factor == 1000


# ---------------------------------------------------------------- simulate


def test_simulate_constant_problem_trajectory(tmp_path):
    cfg = """
[problem]
name = "constant"
mu = 0.5
sigma = 1.5
eta = 2.0
[run]
n_grid = [16]
trajectories = 1
ref_factor = 1
seed = 11
"""
    p = _write(tmp_path, cfg)
    out = tmp_path / "traj.csv"
    assert main(["simulate", str(p), "--trajectory", "3", "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out)
    assert rows[0] == ["t", "x"]
    assert len(rows) == 18
    ts = np.array([float(r[0]) for r in rows[1:]])
    xs = np.array([float(r[1]) for r in rows[1:]])
    assert xs[0] == 2.0
    # x(t) - eta - mu t is a Brownian path scaled by sigma: increments match
    # the drift-free middle column exactly at machine precision.
    resid = xs - 2.0 - 0.5 * ts
    assert abs(resid[0]) < 1e-15
    assert np.all(np.isfinite(resid))


def test_simulate_n_one_gives_two_rows(tmp_path):
    p = _write(tmp_path, TINY)
    out = tmp_path / "t2.csv"
    assert main(["simulate", str(p), "--n", "1", "--out", str(out)]) == EXIT_OK
    assert len(_read_csv(out)) == 3  # header + 2 rows


# ---------------------------------------------------------------- selftest


def test_selftest_passes_on_fresh_build(capsys):
    assert run_selftest(samples=2000, seed=0) is True
    assert main(["selftest", "--samples", "2000"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("[PASS]") >= 6


def test_selftest_catches_injected_coarsening_bug(monkeypatch, capsys):
    from noisysde import sde_core

    real = sde_core.coarsen

    def broken(path, factor):
        out = real(path, factor)
        return out * 1.0000001  # subtly re-scaled: no longer exact block sums

    monkeypatch.setattr(cli.sde_core, "coarsen", broken)
    assert main(["selftest", "--samples", "1000"]) == EXIT_SELFTEST
    assert "[FAIL] coarsening" in capsys.readouterr().out
