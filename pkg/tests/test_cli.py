import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from tenstream.cli import main

from helpers import FIXTURES

HELM = FIXTURES / "helmholtz.cfd"

EXPECTED_ARTIFACTS = {
    "helmholtz.c", "stream_rt.h", "helmholtz_compat.json",
    "helmholtz_banks.json", "system.cfg", "host_plan.json", "batch_plan.json",
}


def run_cli(*args):
    return main([str(a) for a in args])


def test_compile_writes_artifact_set(tmp_path, capsys):
    rc = run_cli("compile", HELM, "--out", tmp_path, "--p", "11",
                 "--format", "f64",
                 "--opt", "double-buffering", "--opt", "bus-parallel",
                 "--opt", "dataflow=7")
    assert rc == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert names == EXPECTED_ARTIFACTS
    doc = json.loads((tmp_path / "batch_plan.json").read_text())
    assert doc["batch_elements"] == 12_056
    assert doc["design"]["num_operators"] == 532
    assert len(doc["design"]["groups"]) == 7
    cfg = (tmp_path / "system.cfg").read_text()
    assert cfg.startswith("sp=cu_0.m_axi_in_even:HBM[0]")


def test_compile_missing_file(tmp_path, capsys):
    rc = run_cli("compile", tmp_path / "nope.cfd", "--out", tmp_path)
    assert rc == 2
    assert "no such file" in capsys.readouterr().err


def test_compile_bad_source_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfd"
    bad.write_text("v = (")
    rc = run_cli("compile", bad, "--out", tmp_path / "out")
    assert rc == 2
    err = capsys.readouterr().err
    assert "bad.cfd:1:" in err


def test_mem_sharing_with_dataflow_warns(tmp_path, capsys):
    rc = run_cli("compile", HELM, "--out", tmp_path, "--p", "7",
                 "--opt", "mem-sharing", "--opt", "dataflow=7")
    assert rc == 0
    assert "ineffective" in capsys.readouterr().err


def test_simulate_reports(tmp_path, capsys):
    assert run_cli("compile", HELM, "--out", tmp_path, "--p", "11",
                   "--opt", "double-buffering", "--opt", "bus-parallel",
                   "--opt", "dataflow=7") == 0
    assert run_cli("simulate", tmp_path, "--power", "37.5") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["gflops_per_watt"] == pytest.approx(
        rep["system_gflops"] / 37.5)
    text = (tmp_path / "report.txt").read_text()
    assert "Ideal GFLOPS" in text


def test_simulate_missing_artifacts(tmp_path, capsys):
    assert run_cli("simulate", tmp_path) == 2


def test_double_buffering_improves_system_gflops(tmp_path):
    base = tmp_path / "base"
    db = tmp_path / "db"
    for out, opts in ((base, []), (db, ["--opt", "double-buffering"])):
        assert run_cli("compile", HELM, "--out", out, "--p", "11",
                       "--opt", "dataflow=1", *opts) == 0
        assert run_cli("simulate", out) == 0
    g_base = json.loads((base / "report.json").read_text())["system_gflops"]
    g_db = json.loads((db / "report.json").read_text())["system_gflops"]
    assert g_db >= g_base


def test_sweep_writes_summary(tmp_path, capsys):
    rc = run_cli("sweep", HELM, "--out", tmp_path, "--p", "7",
                 "--dataflow", "1,2,3,7",
                 "--opt", "double-buffering", "--opt", "bus-parallel")
    assert rc == 0
    lines = (tmp_path / "summary.csv").read_text().strip().split("\n")
    assert len(lines) == 5
    assert lines[0].startswith("dataflow,groups,")
    for k in (1, 2, 3, 7):
        assert (tmp_path / f"dataflow_{k}" / "report.json").exists()


def test_verify_passes(capsys):
    rc = run_cli("verify", HELM, "--p", "3", "--trials", "10", "--seed", "7")
    assert rc == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "max relative error" in out


def test_verify_detects_corrupted_group(capsys):
    rc = run_cli("verify", HELM, "--p", "3", "--trials", "2",
                 "--corrupt-group", "0")
    assert rc == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "group 0" in out


def test_verify_fixed_point_prints_mse(capsys):
    rc = run_cli("verify", HELM, "--p", "7", "--trials", "3",
                 "--format", "fixed32")
    assert rc == 0
    out = capsys.readouterr().out
    assert "MSE vs float64" in out
    mse = float(out.split("MSE vs float64:")[1].strip())
    assert 1e-14 <= mse <= 1e-10


def test_compile_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("compile", HELM, "--out", out, "--p", "7",
                       "--opt", "double-buffering", "--opt", "bus-parallel",
                       "--opt", "dataflow=3", "--seed", "1") == 0
        assert run_cli("simulate", out) == 0
    for name in sorted(p.name for p in a.iterdir()):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_gradient_and_interpolation_compile(tmp_path):
    for name, extra in (("gradient", []), ("interpolation", ["--p", "5"])):
        out = tmp_path / name
        rc = run_cli("compile", FIXTURES / f"{name}.cfd", "--out", out, *extra)
        assert rc == 0
        assert (out / f"{name}.c").exists()


def test_console_entry_point():
    exe = shutil.which("tenstream")
    if exe is None:
        pytest.skip("console script not on PATH")
    res = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "compile" in res.stdout
