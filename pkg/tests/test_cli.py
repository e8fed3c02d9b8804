import csv
import shutil
import subprocess

import numpy as np
import pytest

from fragchoice import acceptance, cli
from fragchoice.fixed_point import read_rate_table
from fragchoice.measures import read_cdf_csv


def summary(out):
    lines = (out / "summary.txt").read_text().splitlines()
    return dict(line.split("=", 1) for line in lines)


def csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_solve_uniform_check(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["solve", "--rule", "uniform", "--check", "--out", str(out)]) == 0
    s = summary(out)
    assert float(s["sup_error_closed_form"]) <= 1e-5
    assert s["check.closed_form"].startswith("PASS")
    F = read_cdf_csv(out / "F.csv")
    assert F(1.0) == pytest.approx(1 - 2 / np.e, abs=1e-5)
    R = read_rate_table(out / "R.csv")
    np.testing.assert_allclose(R.values, 1.0)


def test_solve_to_csv_path(tmp_path):
    target = tmp_path / "nested" / "F_max2.csv"
    target.parent.mkdir()
    assert cli.main(["solve", "--rule", "max:2", "--out", str(target), "--grid", "1e-4:50:1024"]) == 0
    assert read_cdf_csv(target).grid.size == 1024
    assert (target.parent / "config.echo").exists()


def test_solve_stationary_law(tmp_path):
    assert cli.main(["solve", "--rate", "const:1", "--check", "--out", str(tmp_path)]) == 0
    assert float(summary(tmp_path)["int_xR_dpi"]) == pytest.approx(2.0, abs=1e-6)


def test_diverged_normalization_exits_1(tmp_path, capsys):
    assert cli.main(["solve", "--rate", "const:0", "--out", str(tmp_path)]) == 1
    assert "diverge" in capsys.readouterr().err


def test_mass_drift_exits_1(tmp_path):
    argv = ["evolve", "--rate", "const:0", "--grid", "1e-4:5:1024", "--tmax", "3", "--dt", "0.01",
            "--out", str(tmp_path)]
    assert cli.main(argv) == 1


@pytest.mark.parametrize("argv", [
    ["solve"],
    ["solve", "--rule", "uniform", "--rate", "const:1"],
    ["frag", "--steps", "10"],
    ["frag", "--rule", "median:2"],
    ["verify", "medium"],
    [],
    ["cell", "--x0", "-1"],
    ["evolve", "--init", "normal:0:1"],
])
def test_argument_errors_exit_2(argv, tmp_path, capsys):
    assert cli.main(argv + ["--out", str(tmp_path)] if argv else argv) == 2
    assert "usage" in capsys.readouterr().err


def test_frag_outputs_and_rerun(tmp_path):
    a = tmp_path / "a"
    argv = ["frag", "--rule", "max:2", "--steps", "20000", "--alphas", "0.25,0.5", "--snapshots", "4",
            "--seed", "3", "--out", str(a)]
    assert cli.main(argv) == 0
    rows = csv_rows(a / "equidistribution.csv")
    assert rows[0] == ["step", "alpha", "frac"]
    assert {r[0] for r in rows[1:]} == {"1", "27", "737", "20000"}
    snap = read_cdf_csv(a / "sizebiased_20000.csv")
    assert np.all(np.diff(snap.values) >= 0)
    # rerun from the echoed config into a fresh directory
    b = tmp_path / "b"
    assert cli.main(["--config", str(a / "config.echo"), "--out", str(b)]) == 0
    for name in ("equidistribution.csv", "sizebiased_20000.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    echo_a = (a / "config.echo").read_text().replace(str(a), "")
    echo_b = (b / "config.echo").read_text().replace(str(b), "")
    assert echo_a == echo_b


def test_config_overrides_and_unknown_keys(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("command=solve\nrule=uniform\ntol=1e-8\ncheck=true\n")
    out = tmp_path / "o"
    assert cli.main(["--config", str(cfg), "--out", str(out)]) == 0
    echo = (out / "config.echo").read_text()
    assert "tol=1e-08" in echo and "check=True" in echo
    assert cli.main(["--config", str(cfg), "--rule", "max:2", "--out", str(out)]) == 0
    assert "rule=max:2" in (out / "config.echo").read_text()
    cfg.write_text("command=solve\nrule=uniform\nsteps=3\n")
    assert cli.main(["--config", str(cfg), "--out", str(out)]) == 2


def test_cell_outputs_deterministic(tmp_path):
    argv = ["cell", "--rate", "const:1", "--x0", "3", "--tmax", "2", "--paths", "3000", "--times", "1",
            "--seed", "5", "--threads", "2"]
    assert cli.main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(argv + ["--out", str(tmp_path / "b"), "--threads", "1"]) == 0
    for name in ("marginal_T.csv", "paths_meta.csv", "ergodicity.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = csv_rows(tmp_path / "a" / "paths_meta.csv")
    assert rows[0] == ["path", "jumps", "absorbed", "exploded"] and len(rows) == 3001
    assert csv_rows(tmp_path / "a" / "ergodicity.csv")[0] == ["t", "tv_estimate", "tv_sigma"]


def test_evolve_outputs(tmp_path):
    argv = ["evolve", "--tmax", "0.5", "--record", "0.25", "--grid", "1e-4:50:1024", "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    rows = csv_rows(tmp_path / "trajectory.csv")
    assert rows[0] == ["t", "x", "F"]
    assert len(rows) - 1 == 1024 * len({r[0] for r in rows[1:]})
    diag = csv_rows(tmp_path / "diagnostics.csv")
    assert diag[0] == ["t", "tv_to_pi", "mass_drift"]
    # a 1024-node grid has cells wider than the step cap, so auto dt splits them
    assert summary(tmp_path)["exact_shift"] == "False"


def test_verify_exit_codes(tmp_path, monkeypatch):
    ok = acceptance.Criterion(90, "stub pass", lambda: acceptance.Outcome(True, "fine"))
    bad = acceptance.Criterion(91, "stub fail", lambda: acceptance.Outcome(False, "broken"))
    monkeypatch.setattr(acceptance, "select", lambda suite: [ok])
    assert cli.main(["verify", "fast", "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setattr(acceptance, "select", lambda suite: [ok, bad])
    assert cli.main(["verify", "full", "--out", str(tmp_path / "b")]) == 1
    assert "check.criterion_91=FAIL" in (tmp_path / "b" / "summary.txt").read_text()


def test_console_script(tmp_path):
    exe = shutil.which("fragchoice")
    if exe is None:
        pytest.skip("console script not installed")
    done = subprocess.run([exe, "solve", "--rule", "uniform", "--out", str(tmp_path)], capture_output=True, text=True)
    assert done.returncode == 0 and "candy_norm=" in done.stdout
    assert subprocess.run([exe, "verify", "nope"], capture_output=True).returncode == 2
