import json

import pytest

from tbdefect import cli
from tbdefect.equilibrium import NonConvergenceError
from tbdefect.studies import PointDefectSetup


def write(tmp_path, payload, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(payload))
    return str(p)


def run(*args):
    return cli.main([str(a) for a in args])


def test_identities_pass(tmp_path):
    assert run("identities", "-o", tmp_path) == cli.EXIT_OK
    summary = json.loads((tmp_path / "identities.json").read_text())
    assert summary["pass"] and summary["failed"] == []


@pytest.mark.parametrize("payload", [
    {"studdy": {}},
    {"study": {"Rx": [1]}},
    {"schema_version": 99},
    {"model": {"gamma": 1.0}},
    {"study": {"R": [20, 10]}},
    {"bc": {"type": "open"}},
])
def test_malformed_config_exits_2(tmp_path, payload, capsys):
    assert run("fermi-level", write(tmp_path, payload), "-o", tmp_path) == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("identities", bad) == cli.EXIT_CONFIG


def test_fermi_level_methods_agree(tmp_path):
    assert run("fermi-level", "-o", tmp_path) == cli.EXIT_OK
    s = json.loads((tmp_path / "fermi_level.json").read_text())
    assert s["difference"] <= 1e-12


def test_tolerance_failure_exits_4(tmp_path):
    cfg = write(tmp_path, {"fermi": {"tol": 0.0, "sizes": [8]}})
    assert run("fermi-level", cfg, "-o", tmp_path) == cli.EXIT_TOLERANCE


def test_relax_rejects_full_band(tmp_path):
    cfg = write(tmp_path, {"study": {"R": [10], "Ne": 76}})
    assert run("relax", cfg, "-o", tmp_path) == cli.EXIT_CONFIG


def test_relax_writes_configuration(tmp_path):
    cfg = write(tmp_path, {"study": {"R": [6], "mode": "grand"}})
    assert run("relax", cfg, "-o", tmp_path) == cli.EXIT_OK
    assert (tmp_path / "relaxed.csv").exists()


def test_mu_study_artifacts_are_bit_stable(tmp_path):
    cfg = write(tmp_path, {"study": {"R": [10, 14, 20, 28, 40]}})
    assert run("mu-study", cfg, "-o", tmp_path / "a", "-j", 1) == cli.EXIT_OK
    assert run("mu-study", cfg, "-o", tmp_path / "b", "-j", 2) == cli.EXIT_OK
    a = (tmp_path / "a" / "mu_study.csv").read_text()
    assert a == (tmp_path / "b" / "mu_study.csv").read_text()
    lines = [l for l in a.splitlines() if not l.startswith("#")]
    assert len(lines) == 6
    assert a.startswith(f"# tbdefect 0.1.0 config {cli.config_hash(cli.load_config(cfg))}")
    s = json.loads((tmp_path / "a" / "mu_study.json").read_text())
    assert {"study", "rate_theory", "rate_fitted", "correlation", "pass"} <= s.keys()
    assert s["rate_theory"] == -0.5


def test_solver_failure_exits_3(tmp_path, monkeypatch):
    def stall(self, *a):
        raise NonConvergenceError("stalled")

    monkeypatch.setattr(PointDefectSetup, "_solve", stall)
    cfg = write(tmp_path, {"study": {"R": [10, 14, 20, 28]}})
    assert run("mu-study", cfg, "-o", tmp_path, "-j", 1) == cli.EXIT_SOLVER


def test_locality_and_plots(tmp_path):
    cfg = write(tmp_path, {"locality": {"R": [8, 16, 24, 32, 40]}})
    assert run("locality", cfg, "-o", tmp_path) == cli.EXIT_OK
    assert run("plots", tmp_path / "locality.csv") == cli.EXIT_OK
    script = (tmp_path / "plot_locality.py").read_text()
    assert "semilogy" in script


def test_study_plot_has_theory_guide(tmp_path):
    cfg = write(tmp_path, {"study": {"R": [10, 14, 20, 28]}})
    run("mu-study", cfg, "-o", tmp_path, "-j", 1)
    [script] = cli.emit_plots([tmp_path / "mu_study.csv"])
    text = script.read_text()
    assert "slope -0.5" in text and "loglog" in text
    compile(text, str(script), "exec")


def test_plots_refuse_empty_or_unknown(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("# nothing\nR,mu_error\n")
    with pytest.raises(ValueError, match="no data"):
        cli.emit_plots([empty])
    other = tmp_path / "other.csv"
    other.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="missing columns"):
        cli.emit_plots([other])
    assert run("plots", empty) == cli.EXIT_CONFIG


def test_version_flag(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--version"])
    assert "0.1.0" in capsys.readouterr().out
