import json
import subprocess
import sys

import pytest

from wavecontrast import io as fio
from wavecontrast.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main

BUMP = "1 + 0.05*exp(-((x-0.55)**2 + (y-0.45)**2)/(2*0.12**2))"


def write_scenario(tmp_path, n=12, c="1", tau=2.5, extra=""):
    p = tmp_path / "s.ini"
    p.write_text(f"[grid]\nn = {n}\n[coefficients]\nc = {c}\n[time]\ntau = {tau}\n[output]\ndir = out\n{extra}")
    return p


def test_reconstruct_identical_speeds_succeeds(tmp_path, capsys):
    sc = write_scenario(tmp_path)
    assert main(["reconstruct", "--scenario", str(sc), "--seed", "3"]) == EXIT_OK
    s = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert s["seed"] == 3 and s["status"] == "ok"
    assert "PASS" in capsys.readouterr().out


def test_reconstruct_failed_check_is_numerical(tmp_path):
    # 12^2 under-resolves the bump, so the 10% error check fails and the run reports it
    sc = write_scenario(tmp_path, c=BUMP)
    assert main(["reconstruct", "--scenario", str(sc), "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL
    s = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert s["status"] == "ok" and not all(s["checks"].values())


def test_mode_dimension_mismatch_is_validation_error(tmp_path, capsys):
    sc = write_scenario(tmp_path)
    assert main(["reconstruct", "--scenario", str(sc), "--mode", "transport"]) == EXIT_INVALID
    assert "n >= 3" in capsys.readouterr().err


def test_bad_scenario_is_validation_error(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[grid]\nsize = 3\n")
    assert main(["illuminate", "--scenario", str(p)]) == EXIT_INVALID
    assert main(["forward", "--scenario", str(tmp_path / "missing.ini")]) == EXIT_INVALID


def test_cfl_violation_is_numerical(tmp_path):
    sc = write_scenario(tmp_path)
    sc.write_text(sc.read_text().replace("tau = 2.5", "tau = 2.5\ndt = 0.5"))
    assert main(["forward", "--scenario", str(sc)]) == EXIT_NUMERICAL


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_forward_writes_trace(tmp_path):
    sc = write_scenario(tmp_path, c=BUMP)
    assert main(["forward", "--scenario", str(sc)]) == EXIT_OK
    tr = fio.read_trace(tmp_path / "out" / "trace.trc")
    info = json.loads((tmp_path / "out" / "forward.json").read_text())
    assert tr.nt == info["nt"] and info["energy_drift"] <= 1e-3


def test_illuminate_writes_fields(tmp_path):
    sc = write_scenario(tmp_path)
    assert main(["illuminate", "--scenario", str(sc)]) == EXIT_OK
    info = json.loads((tmp_path / "out" / "illumination.json").read_text())
    assert info["residual"] <= 1e-8
    assert (tmp_path / "out" / "alpha.fld").is_file()


def test_gcc_flat_square_passes(tmp_path):
    sc = write_scenario(tmp_path)
    assert main(["gcc", "--scenario", str(sc)]) == EXIT_OK
    assert json.loads((tmp_path / "out" / "gcc.json").read_text())["verdict"] == "PASS"


def test_control_test_exit_matches_report(tmp_path):
    sc = write_scenario(tmp_path, n=16, tau=3.0)
    code = main(["control-test", "--scenario", str(sc)])
    rep = json.loads((tmp_path / "out" / "control.json").read_text())
    ok = rep["converged"] and rep["position_residual"] <= 1e-2 and rep["velocity_residual"] <= 1e-2
    assert code == (EXIT_OK if ok else EXIT_NUMERICAL)


def test_export(tmp_path, capsys):
    sc = write_scenario(tmp_path)
    assert main(["reconstruct", "--scenario", str(sc)]) == EXIT_OK
    assert main(["export", "--scenario", str(sc)]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "out").glob("*.csv"))
    assert names == ["alpha.csv", "c_rec.csv", "f.csv", "m.csv"]
    assert main(["export", str(tmp_path / "nope.fld")]) == EXIT_INVALID


def test_module_entry_point(tmp_path):
    sc = write_scenario(tmp_path, extra="[recovery]\nmode = multi\n")
    r = subprocess.run([sys.executable, "-m", "wavecontrast", "reconstruct", "--scenario", str(sc)],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_INVALID and "n >= 3" in r.stderr
