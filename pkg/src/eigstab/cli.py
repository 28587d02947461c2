"""Command-line front end.

    eigstab study run CONFIG [--paper-scale] [--output-dir DIR] [--threads N]
    eigstab study list-presets
    eigstab quad check
    eigstab eig eval --design D1,D2 [--study S | --config C] [--a A] [--level N]
    eigstab report slopes RATES_CSV [--log-power Q] [--floor F]

Exit codes: 0 success, 1 failed check or computation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import PRESETS, ConfigError, ExperimentConfig, build_eig_config, build_setup, build_model, \
    config_from_mapping, parse_config, preset, surrogate_builder
from .eig import eig
from .quadrature import exactness_suite
from .stability import SATURATION_FLOOR, StabilityReport, rate_fit, run_study

OUTPUT_DIR_ENV = "EIGSTAB_OUTPUT_DIR"
RATES_HEADER = ["N", "sup_utility_error", "sup_l2_distance", "argmax_d1", "argmax_d2",
                "U_N_at_argmax", "K_estimate"]
SURFACE_HEADER = ["d1", "d2", "U", "U_N", "abs_err"]

log = logging.getLogger("eigstab")


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    """Shortest round-trip representation, so equal floats give equal bytes."""
    if v is None:
        return ""
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_rates(report: StabilityReport, path: Path) -> None:
    rows = []
    for rec in report.levels:
        d = list(rec.argmax_design) + [None, None]
        rows.append([str(rec.N), _fmt(rec.sup_utility_error), _fmt(rec.sup_l2_distance), _fmt(d[0]),
                     _fmt(d[1]), _fmt(rec.U_N_at_argmax), _fmt(rec.K_estimate)])
    _write_csv(path, RATES_HEADER, rows)


def write_surfaces(report: StabilityReport, out: Path) -> list[str]:
    names = []
    for rec in report.levels:
        if rec.error is not None:
            continue
        name = f"utility_surface_N{rec.N}.csv"
        rows = [[_fmt(d[0]), _fmt(d[1] if len(d) > 1 else None), _fmt(u), _fmt(un), _fmt(e)]
                for d, u, un, e in zip(report.designs, report.U, rec.U_N, rec.abs_err)]
        _write_csv(out / name, SURFACE_HEADER, rows)
        names.append(name)
    return names


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("eigstab", "numpy", "scipy", "pydantic", "pyyaml"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def resolve_output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    return Path(override or os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def run_config(cfg: ExperimentConfig, output_dir, threads: int | None = None) -> StabilityReport:
    """Run the study in ``cfg`` and write every output file into ``output_dir``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = {"config": cfg.model_dump(mode="json"), "versions": _versions(), "status": "RUNNING"}
    report = None
    try:
        setup = build_setup(cfg, threads)
        manifest["threads"] = setup.threads
        report = run_study(setup)
    except ConfigError:
        raise
    except Exception as exc:
        manifest.update(status="FAILED", error=f"{type(exc).__name__}: {exc}",
                        wall_clock_seconds=time.perf_counter() - start)
        (out / "MANIFEST.json").write_text(json.dumps(manifest, indent=2) + "\n")
        raise
    files = ["report.json", "rates.csv"]
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    write_rates(report, out / "rates.csv")
    files += write_surfaces(report, out)
    manifest.update(
        status="FAILED" if report.failed else "OK",
        failed_checks=[c["name"] for c in report.checks if not c["passed"]],
        node_counts=report.node_counts,
        wall_clock_seconds=time.perf_counter() - start,
        files=files,
    )
    (out / "MANIFEST.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# subcommands


def _cmd_study_run(args) -> int:
    cfg = parse_config(args.config, scale="paper" if args.paper_scale else None)
    out = resolve_output_dir(cfg, args.output_dir)
    report = run_config(cfg, out, args.threads)
    for rec in report.levels:
        print(f"N={rec.N:<6d} E_N={rec.sup_utility_error:.4e}  L2={rec.sup_l2_distance:.4e}"
              + (f"  error: {rec.error}" if rec.error else ""))
    for c in report.checks:
        print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['detail']}")
    print(f"outputs in {out}")
    return 1 if report.failed else 0


def _cmd_list_presets(args) -> int:
    for name in PRESETS:
        p = preset(name)
        print(f"{name:18s} ladder={p['ladder']} grid={p['design_grid']['points']}")
    return 0


def _cmd_quad_check(args) -> int:
    rows = exactness_suite()
    width = max(len(r["check"]) for r in rows)
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['check']:<{width}}  {r['value']:.3e} (tol {r['tolerance']:.0e})")
    return 0 if all(r["passed"] for r in rows) else 1


def _parse_design(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--design must be comma-separated numbers, got {text!r}") from None


def _cmd_eig_eval(args) -> int:
    if args.config:
        cfg = parse_config(args.config)
    else:
        raw = {"study": args.study}
        if args.a is not None:
            raw["model"] = {"a": args.a}
        cfg = config_from_mapping(raw)
    if args.a is not None and args.config:
        cfg = config_from_mapping({**cfg.model_dump(mode="json"), "model": {**cfg.model.model_dump(), "a": args.a}})
    d = _parse_design(args.design)
    if len(d) != len(cfg.design_grid.lower):
        raise UsageError(f"--design needs {len(cfg.design_grid.lower)} components")
    model = build_model(cfg)
    target = surrogate_builder(cfg, model)(args.level) if args.level is not None else model
    ec = build_eig_config(cfg)
    est = eig(target, d, ec.prior_rule, ec.noise_rule, ec.noise)
    print(json.dumps(est.to_dict()))
    return 0


def _cmd_report_slopes(args) -> int:
    path = Path(args.rates)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "N" not in rows[0]:
        raise UsageError("rates file needs an N column")
    ns = np.array([float(r["N"]) for r in rows])
    result = {}
    for col in ("sup_utility_error", "sup_l2_distance"):
        if col not in rows[0]:
            continue
        vals = np.array([float(r[col]) if r[col] else np.nan for r in rows])
        ok = np.isfinite(vals)
        result[col] = rate_fit(ns[ok], vals[ok], log_power=args.log_power, floor=args.floor).to_dict()
    if not result:
        raise UsageError("rates file has no error columns")
    print(json.dumps(result, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eigstab", description="EIG stability studies under surrogate models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="group", required=True)

    study = sub.add_parser("study", help="run or list studies").add_subparsers(dest="cmd", required=True)
    run = study.add_parser("run", help="run a study from a config file")
    run.add_argument("config")
    run.add_argument("--paper-scale", action="store_true", help="use the full-size preset (long runtime)")
    run.add_argument("--output-dir", default=None)
    run.add_argument("--threads", type=int, default=None)
    run.set_defaults(func=_cmd_study_run)
    study.add_parser("list-presets", help="print preset names").set_defaults(func=_cmd_list_presets)

    quad = sub.add_parser("quad", help="quadrature utilities").add_subparsers(dest="cmd", required=True)
    quad.add_parser("check", help="run the exactness suite").set_defaults(func=_cmd_quad_check)

    eg = sub.add_parser("eig", help="single EIG evaluations").add_subparsers(dest="cmd", required=True)
    ev = eg.add_parser("eval", help="print one EigEstimate as JSON")
    ev.add_argument("--design", required=True, help="comma-separated design point, e.g. 0.5,0.5")
    src = ev.add_mutually_exclusive_group()
    src.add_argument("--study", choices=PRESETS, default="example1_scalar")
    src.add_argument("--config", default=None)
    ev.add_argument("--a", type=float, default=None, help="slope of the scalar linear model")
    ev.add_argument("--level", type=int, default=None, help="evaluate the surrogate at this ladder level")
    ev.set_defaults(func=_cmd_eig_eval)

    rep = sub.add_parser("report", help="post-process outputs").add_subparsers(dest="cmd", required=True)
    sl = rep.add_parser("slopes", help="fit log-log slopes from rates.csv")
    sl.add_argument("rates")
    sl.add_argument("--log-power", type=float, default=0.0)
    sl.add_argument("--floor", type=float, default=SATURATION_FLOOR)
    sl.set_defaults(func=_cmd_report_slopes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"eigstab: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"eigstab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
