"""Acceptance criteria, one test each, run at their stated tolerances.

Each test prints a ``criterion N [PASS|FAIL]`` line; the terminal summary of
the session repeats all of them.
"""

import csv
import time

import numpy as np

from eigstab.divergence import GaussianDist, kl_gaussian
from eigstab.eig import eig, eig_error_example1
from eigstab.models import HeatConfig, PriorSpec, analytic_model, heat_solve_batch, scalar_linear, trapezoid_weights_2d
from eigstab.quadrature import exactness_suite, gauss_hermite, gauss_hermite_family, smolyak, trapezoid
from eigstab.stability import EigConfig, evidence_kl_check
from eigstab.surrogate import PerturbedLinear, build_pl_x

from conftest import _run_preset


def _check(report, name):
    matches = [c for c in report.checks if c["name"] == name]
    assert matches, f"check {name} missing"
    return matches[0]


def _rates(path):
    with open(path / "rates.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_01_scalar_closed_form(criterion):
    start = time.perf_counter()
    est = eig(scalar_linear(1.0), (0, 0), PriorSpec.gaussian([0.0], [[1.0]]).rule(64), gauss_hermite(64),
              GaussianDist.isotropic(1, 1.0))
    seconds = time.perf_counter() - start
    err = abs(est.value - 0.5 * np.log(2))
    ok = err < 1e-5 and seconds < 1.0
    criterion(1, "scalar EIG equals 0.5 ln 2", ok, f"U={est.value:.10f}, |err|={err:.2e}, {seconds:.3f} s")
    assert ok


def test_criterion_02_perturbed_linear_sharpness(criterion, example1_run):
    rows = _rates(example1_run.path)
    a = 1.0
    deltas, errs, worst, bracket_ok = [], [], 0.0, True
    for row in rows:
        n = int(row["N"])
        a_n = a + 1.0 / n
        e = float(row["sup_utility_error"])
        worst = max(worst, abs(e - eig_error_example1(a, a_n)))
        d = a_n - a
        bracket_ok &= d * (a_n + a) / (2 * (a_n**2 + 1)) <= e <= d * (a_n + a) / (2 * (a**2 + 1))
        deltas.append(d)
        errs.append(e)
    slope = float(np.polyfit(np.log(deltas), np.log(errs), 1)[0])
    a_ns = sorted(1.0 + 1.0 / int(r["N"]) for r in rows)
    ok = a_ns == [1.0625, 1.125, 1.25, 1.5] and worst < 2e-6 and bracket_ok and abs(slope - 1.0) <= 0.05
    criterion(2, "perturbed linear sharpness", ok,
              f"max |nested - closed| = {worst:.2e}, bracket {'ok' if bracket_ok else 'violated'}, slope={slope:.4f}")
    assert ok


def test_criterion_03_piecewise_linear_rates(criterion, plx_run):
    rep = plx_run.report
    s_e = rep.fits["sup_utility_error"]["slope"]
    s_l = rep.fits["sup_l2_distance"]["slope"]
    mono = _check(rep, "monotone_sup_utility_error")["passed"] and _check(rep, "monotone_sup_l2_distance")["passed"]
    ok = ([r.N for r in rep.levels] == [4, 8, 16, 32, 64, 128] and len(rep.designs) == 121
          and -2.4 <= s_e <= -1.6 and -2.4 <= s_l <= -1.6 and mono and plx_run.seconds < 300)
    criterion(3, "piecewise-linear study rates", ok,
              f"slope E_N={s_e:.3f}, slope L2={s_l:.3f}, monotone={mono}, {plx_run.seconds:.0f} s")
    assert ok


def test_criterion_04_kl_error_bound(criterion, plx_run):
    rep = plx_run.report
    worst = max(max(np.array(r.abs_err) - np.array(r.bound_rhs)) for r in rep.levels)
    ks = [r.K_estimate for r in rep.levels]
    ratio = max(ks) / min(ks)
    ok = worst <= 1e-8 and ratio < 2.0
    criterion(4, "KL error bound and bounded K", ok,
              f"max(|U-U_N| - rhs) = {worst:.3e} over {len(rep.levels) * len(rep.designs)} pairs, K max/min = {ratio:.3f}")
    assert ok


def test_criterion_05_evidence_kl(criterion, rng):
    scalar_cfg = EigConfig(PriorSpec.gaussian([0.0], [[1.0]]).rule(64), gauss_hermite(64), GaussianDist.isotropic(1, 1.0))
    lin = evidence_kl_check(scalar_linear(1.0), PerturbedLinear(1.5), (0, 0), scalar_cfg, tol=1e-8)
    closed = kl_gaussian(GaussianDist([0.0], [[3.25]]), GaussianDist([0.0], [[2.0]]))
    m = analytic_model()
    cfg = EigConfig(PriorSpec.uniform([0], [1]).rule(201), smolyak(2, 3, gauss_hermite_family()),
                    GaussianDist.isotropic(2, 1e-4), trapezoid(1001, 0, 1))
    s = build_pl_x(m, 8)
    analytic = [evidence_kl_check(m, s, d, cfg, tol=1e-8) for d in rng.uniform(0, 1, size=(5, 2))]
    ok = lin["holds"] and abs(lin["lhs"] - closed) < 1e-6 and abs(lin["rhs"] - 0.125) < 1e-12 and all(
        r["holds"] for r in analytic)
    criterion(5, "evidence KL below expected likelihood KL", ok,
              f"linear {lin['lhs']:.5f} <= {lin['rhs']:.5f}; analytic max(lhs - rhs) = "
              f"{max(r['lhs'] - r['rhs'] for r in analytic):.2e}")
    assert ok


def test_criterion_06_argmax_tracking(criterion, plx_run):
    c = _check(plx_run.report, "argmax_tracking")
    criterion(6, "argmax tracking", c["passed"], f"{c['detail']}; d* = {plx_run.report.true_argmax}")
    assert c["passed"]


def test_criterion_07_sparse_grid_rates(criterion, sparse_run):
    rep = sparse_run.report
    mono = _check(rep, "monotone_sup_utility_error")["passed"] and _check(rep, "monotone_sup_l2_distance")["passed"]
    raw = [rep.fits[k]["slope"] for k in ("sup_utility_error", "sup_l2_distance")]
    corr = [rep.fits[k + "_log_corrected"]["slope"] for k in ("sup_utility_error", "sup_l2_distance")]
    ok = (mono and all(s <= -1.3 for s in raw) and all(abs(s + 2.0) <= 0.4 for s in corr)
          and sparse_run.seconds < 900)
    criterion(7, "sparse-grid study rates", ok,
              f"monotone={mono}, raw slopes {raw[0]:.3f}/{raw[1]:.3f} (<= -1.3), "
              f"(log N)^6-corrected {corr[0]:.3f}/{corr[1]:.3f} (target -2.0 +- 0.4), {sparse_run.seconds:.0f} s")
    assert ok


def test_criterion_08_heat_study(criterion, heat_run):
    start = time.perf_counter()
    rep = heat_run.report
    e_n = [r.sup_utility_error for r in rep.levels]
    l2 = [r.sup_l2_distance for r in rep.levels]
    mono = all(b < a for a, b in zip(e_n, e_n[1:])) and all(b < a for a, b in zip(l2, l2[1:]))

    cfg = HeatConfig()
    sol, times, fields = heat_solve_batch(np.array([[0.5, 0.5], [0.3, 0.6]]), cfg, record_all=True)
    w = trapezoid_weights_2d(cfg.spatial_n)
    total = np.array([w @ f for f in fields])[times >= cfg.tau - 1e-12]
    drift = float(np.max(np.abs(total - total[0]) / total[0]))

    pts = np.array([[0.3, 0.4], [0.7, 0.2], [0.25, 0.75], [0.5, 0.5]])
    sol = heat_solve_batch(pts, cfg)
    sym = max(float(np.max(np.abs(sol.sample(pts[j])[i] - sol.sample(pts[i])[j])))
              for i in range(len(pts)) for j in range(len(pts)))
    seconds = heat_run.seconds + time.perf_counter() - start
    ok = [r.N for r in rep.levels] == [2, 4, 6] and mono and drift < 0.01 and sym < 1e-3 and seconds < 1800
    criterion(8, "heat study", ok,
              f"E_N {', '.join(f'{v:.3e}' for v in e_n)}; L2 {', '.join(f'{v:.3e}' for v in l2)}; "
              f"heat drift {drift:.2e}; reciprocity {sym:.1e}; {seconds:.0f} s")
    assert ok


def test_criterion_09_quadrature_suite(criterion):
    start = time.perf_counter()
    rows = exactness_suite()
    seconds = time.perf_counter() - start
    ok = all(r["passed"] for r in rows) and seconds < 10
    failed = [r["check"] for r in rows if not r["passed"]]
    criterion(9, "quadrature suite", ok, f"{len(rows)} checks, failed: {failed or 'none'}, {seconds:.2f} s")
    assert ok


def test_criterion_10_determinism(criterion, plx_run, tmp_path_factory):
    again = _run_preset(tmp_path_factory, "analytic_plx", threads=3)
    a = (plx_run.path / "rates.csv").read_bytes()
    b = (again.path / "rates.csv").read_bytes()
    ok = a == b
    criterion(10, "bitwise-identical rates.csv across thread counts", ok,
              f"threads 1 vs 3, {len(a)} bytes, identical={ok}")
    assert ok
