import csv
import json

import numpy as np
import pytest

from eigstab.cli import OUTPUT_DIR_ENV, RATES_HEADER, main
from eigstab.eig import eig_error_example1


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_list_presets(capsys):
    code, out, _ = _run(capsys, "study", "list-presets")
    assert code == 0
    names = [line.split()[0] for line in out.strip().splitlines()]
    assert names == ["example1_scalar", "analytic_plx", "analytic_sparse", "heat_pce"]


def test_quad_check(capsys):
    code, out, _ = _run(capsys, "quad", "check")
    assert code == 0
    assert out.count("PASS") >= 6 and "FAIL" not in out


def test_eig_eval_uninformative(capsys):
    code, out, _ = _run(capsys, "eig", "eval", "--design", "0,0", "--a", "0")
    assert code == 0
    est = json.loads(out)
    assert abs(est["value"]) < 1e-10
    assert est["quadrature"] == {"prior": 64, "noise": 64, "evidence": 64}


def test_eig_eval_surrogate_level(capsys):
    code, out, _ = _run(capsys, "eig", "eval", "--design", "0,0", "--level", "2")
    assert code == 0
    est = json.loads(out)
    assert est["value"] == pytest.approx(0.5 * np.log(3.25), abs=1e-6)
    assert est["surrogate"] == "perturbed_linear(N=2)"


def test_eig_eval_analytic(capsys):
    code, out, _ = _run(capsys, "eig", "eval", "--study", "analytic_plx", "--design", "0.5,0.5")
    assert code == 0 and json.loads(out)["value"] > 0


def test_usage_errors_exit_2(capsys):
    assert _run(capsys, "nonsense")[0] == 2
    assert _run(capsys, "eig", "eval")[0] == 2
    assert _run(capsys, "eig", "eval", "--design", "a,b")[0] == 2
    assert _run(capsys, "eig", "eval", "--design", "0,0,0")[0] == 2
    assert _run(capsys, "study", "run", "/does/not/exist.yaml")[0] == 2


def test_report_slopes_synthetic(capsys, tmp_path):
    path = tmp_path / "rates.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RATES_HEADER)
        for n in (4, 8, 16, 32):
            w.writerow([n, 3.0 * n**-2.0, 5.0 * n**-2.0, 0, 0, 1, 1])
    code, out, _ = _run(capsys, "report", "slopes", str(path))
    assert code == 0
    fits = json.loads(out)
    assert fits["sup_utility_error"]["slope"] == pytest.approx(-2.0, abs=1e-12)
    assert fits["sup_l2_distance"]["slope"] == pytest.approx(-2.0, abs=1e-12)


def test_report_slopes_too_few_points(capsys, tmp_path):
    path = tmp_path / "rates.csv"
    path.write_text(",".join(RATES_HEADER) + "\n4,0.1,0.1,0,0,1,1\n")
    assert _run(capsys, "report", "slopes", str(path))[0] == 1


def test_study_run_example1(capsys, tmp_path):
    cfg = tmp_path / "e1.yaml"
    cfg.write_text("study: example1_scalar\nthreads: 1\n")
    out = tmp_path / "out"
    code, text, _ = _run(capsys, "study", "run", str(cfg), "--output-dir", str(out))
    assert code == 0, text
    with open(out / "rates.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == RATES_HEADER
    for row in rows[1:]:
        n = int(row[0])
        assert float(row[1]) == pytest.approx(eig_error_example1(1.0, 1.0 + 1.0 / n), abs=2e-6)
    surface = (out / "utility_surface_N2.csv").read_text().splitlines()
    assert surface[0] == "d1,d2,U,U_N,abs_err" and len(surface) == 2
    manifest = json.loads((out / "MANIFEST.json").read_text())
    assert manifest["status"] == "OK"
    assert manifest["config"]["study"] == "example1_scalar"
    assert manifest["node_counts"]["prior"] == 64
    assert {"numpy", "scipy", "python"} <= set(manifest["versions"])
    assert "wall_clock_seconds" in manifest
    report = json.loads((out / "report.json").read_text())
    assert [lvl["N"] for lvl in report["levels"]] == [2, 4, 8, 16]

    first = (out / "rates.csv").read_bytes()
    code, _, _ = _run(capsys, "study", "run", str(cfg), "--output-dir", str(out), "--threads", "3")
    assert code == 0 and (out / "rates.csv").read_bytes() == first


def test_failed_check_exits_1_with_marker(capsys, tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("study: example1_scalar\nchecks: {reference_slope: -3.0}\n")
    out = tmp_path / "out"
    code, text, _ = _run(capsys, "study", "run", str(cfg), "--output-dir", str(out))
    assert code == 1
    assert "[FAIL]" in text
    manifest = json.loads((out / "MANIFEST.json").read_text())
    assert manifest["status"] == "FAILED" and manifest["failed_checks"]
    assert (out / "rates.csv").exists()


def test_output_dir_env_override(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "e1.yaml"
    cfg.write_text(f"study: example1_scalar\nladder: [2, 4, 8]\noutput_dir: {tmp_path / 'from_config'}\n")
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "from_env"))
    assert _run(capsys, "study", "run", str(cfg))[0] == 0
    assert (tmp_path / "from_env" / "rates.csv").exists()
    assert not (tmp_path / "from_config").exists()
