"""Utility-error studies: sup-over-design errors, surrogate distances, bound
checks, argmax tracking and log-log rate fits."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .divergence import GaussianDist, weighted_norm_sq
from .eig import EvidenceUnderflowError, information_gain_terms, log_evidence_grid, _prior_weights
from .quadrature import QuadratureRule

log = logging.getLogger(__name__)

SATURATION_FLOOR = 1e-7
BOUND_SLACK = 1e-8
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class DesignGrid:
    """Tensor grid over the design box; points are ordered lexicographically."""

    axes: tuple

    @classmethod
    def uniform(cls, lower, upper, n) -> "DesignGrid":
        n = [n] * len(lower) if np.isscalar(n) else list(n)
        return cls(tuple(tuple(np.linspace(lo, hi, k).tolist()) for lo, hi, k in zip(lower, upper, n)))

    @classmethod
    def single(cls, point) -> "DesignGrid":
        return cls(tuple((float(v),) for v in point))

    @property
    def points(self) -> np.ndarray:
        return np.array(list(itertools.product(*self.axes)), dtype=float)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    def __len__(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True, eq=False)
class EigConfig:
    """Quadrature setup for utilities: prior (outer and evidence), noise, and the
    rule used for prior-weighted L2 distances."""

    prior_rule: QuadratureRule
    noise_rule: QuadratureRule
    noise: GaussianDist
    l2_rule: QuadratureRule | None = None

    @property
    def distance_rule(self) -> QuadratureRule:
        return self.l2_rule if self.l2_rule is not None else self.prior_rule


# ---------------------------------------------------------------------------
# per-design kernels


def _utility_from_terms(terms, w_outer, w_noise) -> float:
    return float(np.sum(w_outer * np.sum(terms * w_noise[None, :], axis=1)))


@dataclass
class _TrueDesign:
    """Cached quantities of the true model at one design."""

    g_w: np.ndarray
    terms: np.ndarray
    utility: float


def _true_design(model, d, cfg: EigConfig) -> _TrueDesign:
    w = _prior_weights(cfg.prior_rule)
    g = model.evaluate(cfg.prior_rule.nodes, d)
    terms = information_gain_terms(g, w, cfg.noise_rule, cfg.noise)
    return _TrueDesign(cfg.noise.whiten(g), terms, _utility_from_terms(terms, w, cfg.noise_rule.weights))


def _surrogate_design(true: _TrueDesign, surrogate, d, cfg: EigConfig, checks: bool) -> dict:
    """U_N(d) and, with ``checks``, the bound and evidence-KL quantities."""
    w = _prior_weights(cfg.prior_rule)
    log_w = np.log(w)
    eps = cfg.noise_rule.nodes
    w_eps = cfg.noise_rule.weights
    gn = surrogate.evaluate(cfg.prior_rule.nodes, d)
    gn_w = cfg.noise.whiten(gn)
    eps_sq = np.sum(eps * eps, axis=1)
    const = -0.5 * cfg.noise.logdet - 0.5 * cfg.noise.dim * math.log(2 * math.pi)
    # data points y = G_N(x_k) + L eps_m
    log_ev_sur = log_evidence_grid(gn_w, eps, gn_w, log_w, cfg.noise)
    terms_n = (-0.5 * eps_sq[None, :] + const) - log_ev_sur
    out = {"U_N": _utility_from_terms(terms_n, w, w_eps)}
    if not checks:
        return out
    diff_w = gn_w - true.g_w
    expected_kl = 0.5 * float(np.sum(w * np.sum(diff_w * diff_w, axis=1)))
    log_ev_true = log_evidence_grid(gn_w, eps, true.g_w, log_w, cfg.noise)
    # log π(y | x_k) under the true model at the surrogate-shifted data
    r = diff_w[:, None, :] + eps[None, :, :]
    log_lik_true = -0.5 * np.sum(r * r, axis=2) + const
    k1 = _utility_from_terms(true.terms**2, w, w_eps)
    k2 = _utility_from_terms((log_lik_true - log_ev_true) ** 2, w, w_eps)
    big_k = k1 + k2
    out.update(
        expected_kl=expected_kl,
        K=big_k,
        bound_rhs=math.sqrt(big_k) * math.sqrt(expected_kl) + 2.0 * expected_kl,
        evidence_kl=_utility_from_terms(log_ev_sur - log_ev_true, w, w_eps),
    )
    return out


# ---------------------------------------------------------------------------
# public operations


def utilities_on_grid(model, grid: DesignGrid, cfg: EigConfig, threads: int = 1) -> np.ndarray:
    pts = grid.points
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return np.array(list(pool.map(lambda d: _true_design(model, d, cfg).utility, pts)))


def sup_utility_error(model, surrogate, grid: DesignGrid, cfg: EigConfig, u_cache=None, threads: int = 1):
    """``max_d |U(d) - U_N(d)|`` over the grid and the per-design errors.

    ``u_cache`` may hold precomputed ``U(d)`` values in grid order.
    """
    pts = grid.points

    def one(i):
        d = pts[i]
        try:
            true = _true_design(model, d, cfg)
            u = true.utility if u_cache is None else u_cache[i]
            return abs(u - _surrogate_design(true, surrogate, d, cfg, False)["U_N"])
        except EvidenceUnderflowError as exc:
            raise EvidenceUnderflowError(f"design {tuple(d)}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        errors = np.array(list(pool.map(one, range(len(pts)))))
    return float(errors.max()), errors


def l2_distances(model, surrogate, grid: DesignGrid, prior_rule: QuadratureRule, noise: GaussianDist) -> np.ndarray:
    """``sqrt(E ||G - G_N||_Γ^2)`` at every design of the grid."""
    w = prior_rule.normalized_weights()
    out = []
    for d in grid.points:
        diff = model.evaluate(prior_rule.nodes, d) - surrogate.evaluate(prior_rule.nodes, d)
        out.append(math.sqrt(float(np.sum(w * weighted_norm_sq(diff, noise)))))
    return np.array(out)


def sup_l2_distance(model, surrogate, grid: DesignGrid, prior_rule: QuadratureRule, noise: GaussianDist) -> float:
    """``max_d sqrt(E ||G(X; d) - G_N(X; d)||_Γ^2)`` over the grid."""
    return float(l2_distances(model, surrogate, grid, prior_rule, noise).max())


def kl_error_bound_check(model, surrogate, d, cfg: EigConfig) -> dict:
    """Compare ``|U - U_N|`` with ``sqrt(K) sqrt(E KL) + 2 E KL`` at design ``d``."""
    true = _true_design(model, d, cfg)
    res = _surrogate_design(true, surrogate, d, cfg, True)
    lhs = abs(true.utility - res["U_N"])
    return {"lhs": lhs, "rhs": res["bound_rhs"], "K": res["K"], "expected_kl": res["expected_kl"],
            "holds": lhs <= res["bound_rhs"] + BOUND_SLACK}


def evidence_kl_check(model, surrogate, d, cfg: EigConfig, tol: float = BOUND_SLACK) -> dict:
    """KL between surrogate and model evidences versus the expected likelihood KL."""
    true = _true_design(model, d, cfg)
    res = _surrogate_design(true, surrogate, d, cfg, True)
    lhs, rhs = res["evidence_kl"], res["expected_kl"]
    return {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs + tol}


def _argmax_index(values, tie_rtol: float = TIE_RTOL) -> int:
    values = np.asarray(values, float)
    top = values.max()
    # values equal up to roundoff count as ties; points are in lexicographic order
    return int(np.flatnonzero(values >= top - tie_rtol * max(1.0, abs(top)))[0])


def argmax_on_grid(values: Sequence[float], grid: DesignGrid, tie_rtol: float = TIE_RTOL) -> np.ndarray:
    """Design with the largest value; ties go to the lexicographically first point."""
    values = np.asarray(values, float)
    if len(grid) == 0 or values.size == 0:
        raise ValueError("empty design grid")
    if values.size != len(grid):
        raise ValueError("one value per design point is required")
    return grid.points[_argmax_index(values, tie_rtol)]


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float
    n_used: int
    excluded: tuple = ()

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "residual": self.residual,
                "n_used": self.n_used, "excluded": list(self.excluded)}


def rate_fit(levels, errors, log_power: float = 0.0, floor: float = SATURATION_FLOOR) -> RateFit:
    """Least-squares fit of ``log(error / log(N)**log_power)`` against ``log N``.

    Points with error below ``floor`` are treated as saturated and excluded.
    """
    levels = np.asarray(levels, float)
    errors = np.asarray(errors, float)
    if levels.shape != errors.shape:
        raise ValueError("levels and errors must have the same length")
    if np.any(errors < 0) or np.any(~np.isfinite(errors)):
        raise ValueError("errors must be finite and nonnegative")
    keep = errors >= floor
    excluded = tuple(float(v) for v in levels[~keep])
    levels, errors = levels[keep], errors[keep]
    if levels.size < 3:
        raise ValueError(f"need at least 3 unsaturated points, got {levels.size}")
    y = np.log(errors)
    if log_power:
        y = y - log_power * np.log(np.log(levels))
    x = np.log(levels)
    (slope, intercept), res, *_ = np.polyfit(x, y, 1, full=True)
    resid = float(np.sqrt(res[0] / levels.size)) if res.size else 0.0
    return RateFit(float(slope), float(intercept), resid, int(levels.size), excluded)


# ---------------------------------------------------------------------------
# studies


@dataclass
class StudySetup:
    """Everything a study needs, already constructed."""

    name: str
    model: object
    build_surrogate: Callable[[int], object]
    ladder: Sequence[int]
    grid: DesignGrid
    eig_cfg: EigConfig
    checks: bool = True
    threads: int = 1
    log_power: float = 0.0
    reference_slope: float | None = None
    slope_tolerance: float = 0.4
    require_monotone: bool = True
    check_argmax: bool = True
    k_ratio_limit: float | None = 2.0
    raw_slope_max: float | None = None
    half_rate: bool = False
    fidelity_cfg: EigConfig | None = None


@dataclass
class LevelRecord:
    level: int
    N: int
    sup_utility_error: float
    sup_l2_distance: float
    argmax_design: tuple
    U_N_at_argmax: float
    U_at_argmax_N: float
    K_estimate: float | None
    max_bound_rhs: float | None
    bound_violations: int | None
    max_evidence_kl_excess: float | None
    U_N: list
    abs_err: list
    bound_rhs: list | None = None
    evidence_kl: list | None = None
    expected_kl: list | None = None
    error: str | None = None

    def summary(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()
               if k not in ("U_N", "abs_err", "bound_rhs", "evidence_kl", "expected_kl")}
        out["argmax_design"] = list(self.argmax_design)
        return out


@dataclass
class StabilityReport:
    name: str
    grid_axes: tuple
    designs: list
    U: list
    true_argmax: tuple
    U_at_true_argmax: float
    levels: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    node_counts: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return any(not c["passed"] for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "study": self.name,
            "design_grid": [list(a) for a in self.grid_axes],
            "true_argmax": list(self.true_argmax),
            "U_at_true_argmax": self.U_at_true_argmax,
            "node_counts": self.node_counts,
            "levels": [
                dict(rec.summary(), per_design={
                    "U_N": rec.U_N, "abs_err": rec.abs_err, "bound_rhs": rec.bound_rhs,
                    "evidence_kl": rec.evidence_kl, "expected_kl": rec.expected_kl,
                })
                for rec in self.levels
            ],
            "U": self.U,
            "fits": self.fits,
            "checks": self.checks,
            "failed": self.failed,
        }


def _strictly_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def _run_level(setup: StudySetup, level: int, trues, designs) -> LevelRecord:
    surrogate = setup.build_surrogate(level)
    cfg = setup.eig_cfg

    def one(i):
        return _surrogate_design(trues[i], surrogate, designs[i], cfg, setup.checks)

    with ThreadPoolExecutor(max_workers=max(1, setup.threads)) as pool:
        results = list(pool.map(one, range(len(designs))))
    u = np.array([t.utility for t in trues])
    u_n = np.array([r["U_N"] for r in results])
    abs_err = np.abs(u - u_n)
    l2 = l2_distances(setup.model, surrogate, setup.grid, cfg.distance_rule, cfg.noise)
    i_star = _argmax_index(u_n)
    rec = LevelRecord(
        level=level, N=int(surrogate.level_param),
        sup_utility_error=float(abs_err.max()), sup_l2_distance=float(l2.max()),
        argmax_design=tuple(float(v) for v in designs[i_star]),
        U_N_at_argmax=float(u_n[i_star]), U_at_argmax_N=float(u[i_star]),
        K_estimate=None, max_bound_rhs=None, bound_violations=None, max_evidence_kl_excess=None,
        U_N=u_n.tolist(), abs_err=abs_err.tolist(),
    )
    if setup.checks:
        rhs = np.array([r["bound_rhs"] for r in results])
        ev = np.array([r["evidence_kl"] for r in results])
        ekl = np.array([r["expected_kl"] for r in results])
        rec.K_estimate = float(max(r["K"] for r in results))
        rec.max_bound_rhs = float(rhs.max())
        rec.bound_violations = int(np.sum(abs_err > rhs + BOUND_SLACK))
        rec.max_evidence_kl_excess = float(np.max(ev - ekl))
        rec.bound_rhs, rec.evidence_kl, rec.expected_kl = rhs.tolist(), ev.tolist(), ekl.tolist()
    return rec


def _argmax_tracking(report: StabilityReport) -> dict:
    ok_levels = [r for r in report.levels if r.error is None]
    target = tuple(report.true_argmax)
    n0 = None
    for i in range(len(ok_levels)):
        if all(tuple(r.argmax_design) == target for r in ok_levels[i:]):
            n0 = ok_levels[i].N
            break
    if n0 is None:
        return {"name": "argmax_tracking", "passed": False, "detail": "argmax never settles on the true argmax"}
    tail = [r for r in ok_levels if r.N >= n0]
    gaps = [abs(r.U_N_at_argmax - report.U_at_true_argmax) for r in tail]
    within = all(g <= 2.0 * r.sup_utility_error for g, r in zip(gaps, tail))
    return {"name": "argmax_tracking", "passed": within,
            "detail": f"N0={n0}; max |U_N(d*_N) - U(d*)| / E_N = "
                      f"{max(g / max(r.sup_utility_error, 1e-300) for g, r in zip(gaps, tail)):.3g}"}


def run_study(setup: StudySetup) -> StabilityReport:
    """Sweep the surrogate ladder and collect errors, bounds and rate fits.

    ``U(d)`` is computed once per design and shared by every level. A failing
    level is recorded and the remaining levels still run.
    """
    designs = setup.grid.points
    cfg = setup.eig_cfg
    with ThreadPoolExecutor(max_workers=max(1, setup.threads)) as pool:
        trues = list(pool.map(lambda d: _true_design(setup.model, d, cfg), designs))
    u = np.array([t.utility for t in trues])
    i_star = _argmax_index(u)
    report = StabilityReport(
        name=setup.name, grid_axes=setup.grid.axes, designs=designs.tolist(), U=u.tolist(),
        true_argmax=tuple(float(v) for v in designs[i_star]), U_at_true_argmax=float(u[i_star]),
        node_counts={"prior": cfg.prior_rule.size, "noise": cfg.noise_rule.size,
                     "evidence": cfg.prior_rule.size, "l2": cfg.distance_rule.size,
                     "designs": len(setup.grid)},
    )
    for level in setup.ladder:
        log.info("%s: level %s", setup.name, level)
        try:
            report.levels.append(_run_level(setup, level, trues, designs))
        except (ArithmeticError, ValueError) as exc:
            log.error("level %s failed: %s", level, exc)
            report.levels.append(LevelRecord(level, level, math.nan, math.nan, (), math.nan, math.nan,
                                             None, None, None, None, [], [], error=str(exc)))
            report.checks.append({"name": f"level_{level}", "passed": False, "detail": str(exc)})
    _finish(setup, report)
    return report


def _finish(setup: StudySetup, report: StabilityReport) -> None:
    ok = [r for r in report.levels if r.error is None]
    ns = [r.N for r in ok]
    e_n = [r.sup_utility_error for r in ok]
    l2 = [r.sup_l2_distance for r in ok]
    checks = report.checks
    for key, series in (("sup_utility_error", e_n), ("sup_l2_distance", l2)):
        try:
            raw = rate_fit(ns, series)
            report.fits[key] = raw.to_dict()
            if setup.log_power:
                report.fits[key + "_log_corrected"] = dict(
                    rate_fit(ns, series, log_power=setup.log_power).to_dict(), log_power=setup.log_power)
        except ValueError as exc:
            report.fits[key] = {"slope": None, "flag": f"undefined: {exc}"}
    if setup.require_monotone and len(ok) > 1:
        for key, series in (("sup_utility_error", e_n), ("sup_l2_distance", l2)):
            checks.append({"name": f"monotone_{key}", "passed": _strictly_decreasing(series),
                           "detail": ", ".join(f"{v:.3e}" for v in series)})
    if setup.raw_slope_max is not None:
        for key in ("sup_utility_error", "sup_l2_distance"):
            slope = report.fits.get(key, {}).get("slope")
            checks.append({"name": f"raw_slope_{key}", "passed": slope is not None and slope <= setup.raw_slope_max,
                           "detail": f"slope={slope} required <= {setup.raw_slope_max}"})
    if setup.half_rate:
        a = report.fits.get("sup_utility_error", {}).get("slope")
        b = report.fits.get("sup_l2_distance", {}).get("slope")
        passed = a is not None and b is not None and abs(a - b) <= 0.5
        checks.append({"name": "half_rate", "passed": passed,
                       "detail": f"slope(E_N)={a}, slope(L2)={b}, required |difference| <= 0.5"})
    if setup.reference_slope is not None:
        fit_key = "_log_corrected" if setup.log_power else ""
        for key in ("sup_utility_error", "sup_l2_distance"):
            slope = report.fits.get(key + fit_key, {}).get("slope")
            passed = slope is not None and abs(slope - setup.reference_slope) <= setup.slope_tolerance
            checks.append({"name": f"slope_{key}{fit_key}", "passed": passed,
                           "detail": f"slope={slope} reference={setup.reference_slope}±{setup.slope_tolerance}"})
    if setup.checks and ok:
        violations = sum(r.bound_violations for r in ok)
        checks.append({"name": "kl_error_bound", "passed": violations == 0,
                       "detail": f"{violations} (N, d) pairs exceed the bound"})
        excess = max(r.max_evidence_kl_excess for r in ok)
        checks.append({"name": "evidence_kl", "passed": excess <= BOUND_SLACK,
                       "detail": f"max evidence KL - expected likelihood KL = {excess:.3e}"})
        if setup.k_ratio_limit is not None:
            ks = [r.K_estimate for r in ok]
            ratio = max(ks) / min(ks)
            checks.append({"name": "K_bounded", "passed": ratio < setup.k_ratio_limit,
                           "detail": f"max/min K over levels = {ratio:.4f}"})
    if setup.check_argmax and ok and len(report.designs) > 1:
        checks.append(_argmax_tracking(report))
    if setup.fidelity_cfg is not None and ok:
        refined = utilities_on_grid(setup.model, setup.grid, setup.fidelity_cfg, setup.threads)
        drift = float(np.max(np.abs(refined - np.array(report.U))))
        smallest = min(e_n)
        report.fits["quadrature_drift"] = drift
        checks.append({"name": "quadrature_fidelity", "passed": drift < smallest,
                       "detail": f"max |U_refined - U| = {drift:.3e}, smallest E_N = {smallest:.3e}"})
