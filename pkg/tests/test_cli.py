import csv
import json
import subprocess
import sys

import pytest

from crafem.cli import main


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_solve_prints_diagonal_value(capsys):
    code, out, _ = run(["solve", "--problem", "square-poisson-f1", "--refine-uniform", "0"], capsys)
    assert code == 0
    line = next(ln for ln in out.splitlines() if ln.startswith("u(midpoint of side 0-2)"))
    assert abs(float(line.split("=")[1]) - 1.0 / 24.0) <= 1e-12


def test_solve_stokes_and_outputs(tmp_path, capsys):
    out_csv = tmp_path / "u.csv"
    code, out, _ = run(["solve", "--problem", "square-stokes-f10", "--out", str(out_csv),
                        "--dump-system", str(tmp_path / "sys")], capsys)
    assert code == 0
    assert "p(element 0) = -0.0833333" in out
    assert (tmp_path / "sys_matrix.mtx").exists() and (tmp_path / "sys_rhs.mtx").exists()
    assert (tmp_path / "u_pressure.csv").exists()
    rows = list(csv.reader(open(out_csv)))
    assert rows[0] == ["side_a", "side_b", "component", "value"]
    code, _, _ = run(["solve", "--problem", "square-stokes-f10", "--format", "json", "--out", str(tmp_path / "u.json")],
                     capsys)
    payload = json.loads((tmp_path / "u.json").read_text())
    assert len(payload["pressure"]) == 2


def test_solve_reports_error(capsys):
    _, out, _ = run(["solve", "--problem", "square-poisson-smooth", "--refine-uniform", "2"], capsys)
    assert "exact solution" in out
    _, out, _ = run(["solve", "--problem", "square-poisson-f1", "--refine-uniform", "1", "--kref", "1"], capsys)
    assert "reference, 1 extra refinements" in out


def test_unknown_problem_exit_code(capsys):
    code, _, err = run(["solve", "--problem", "no-such"], capsys)
    assert code == 2 and "unknown problem" in err


def test_malformed_flags_exit_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["afem", "--mu", "abc"])
    assert exc.value.code != 0


def test_invalid_mu_fails(capsys):
    code, _, err = run(["afem", "--problem", "square-poisson-f1", "--mu", "2", "--max-iters", "2"], capsys)
    assert code == 1 and "mu" in err


def test_afem_csv_is_monotone_and_reproducible(tmp_path, capsys):
    args = ["afem", "--problem", "lshape-poisson", "--mu", "0.5", "--max-elems", "3000", "--check-replay"]
    code, _, err = run(args + ["--out", str(tmp_path / "a.csv")], capsys)
    assert code == 0 and "PASS decision logs replay" in err
    run(args + ["--out", str(tmp_path / "b.csv")], capsys)
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    energies = [float(r["energy"]) for r in rows]
    assert all(y <= x + 1e-10 for x, y in zip(energies, energies[1:]))
    assert int(rows[-1]["n_elems"]) <= 3000


def test_afem_reference_column(capsys):
    code, out, _ = run(["afem", "--problem", "square-poisson-f1", "--max-iters", "3", "--reference", "--kref", "1"], capsys)
    rows = list(csv.DictReader(out.splitlines()))
    assert code == 0 and all(r["err_ref"] for r in rows)


def test_verify_exact_suite(tmp_path, capsys):
    code, _, err = run(["verify", "--suite", "exact", "--seed", "42", "--out", str(tmp_path / "v.json")], capsys)
    reports = json.loads((tmp_path / "v.json").read_text())
    assert code == 0
    assert {r["name"] for r in reports} == {"exact-identities", "lower-diamond-identities"}
    assert all(r["verdict"] == "pass" for r in reports)
    assert "FAIL" not in err


def test_verify_optimality_suite(capsys):
    code, out, _ = run(["verify", "--suite", "optimality"], capsys)
    rep = json.loads(out)[0]
    assert code == 0 and rep["measured_c"] == 1.0 and rep["verdict"] == "pass"


def test_enumerate(capsys):
    code, out, _ = run(["enumerate", "--budget", "2"], capsys)
    assert code == 0
    assert out.splitlines() == ["new_vertices,count", "0,1", "1,1", "2,4"]
    code, out, _ = run(["enumerate", "--budget", "2", "--format", "json"], capsys)
    assert json.loads(out)["total"] == 6


def test_compare_marking_parallel_matches_serial(tmp_path, monkeypatch, capsys):
    args = ["compare-marking", "--problem", "lshape-poisson-f1", "--max-elems", "1500"]
    monkeypatch.setenv("CRAFEM_WORKERS", "1")
    run(args + ["--out", str(tmp_path / "s.csv")], capsys)
    monkeypatch.setenv("CRAFEM_WORKERS", "3")
    run(args + ["--out", str(tmp_path / "p.csv")], capsys)
    serial = (tmp_path / "s.csv").read_text()
    assert serial == (tmp_path / "p.csv").read_text()
    rows = list(csv.DictReader(serial.splitlines()))
    assert {r["marking"] for r in rows} == {"modified-maximum", "doerfler", "maximum"}


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "crafem.cli", "solve", "--problem", "square-poisson-f1"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "u(midpoint of side 0-2) = 0.041666666666666" in proc.stdout
