"""Forward observation maps and prior specifications.

Every map is vectorized over parameters: ``evaluate(x, d)`` takes an ``(n,
param_dim)`` array of parameters and one design point and returns an ``(n,
data_dim)`` array.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .quadrature import QuadratureRule, gauss_hermite, gauss_legendre, tensor_all, trapezoid


@dataclass(frozen=True)
class PriorSpec:
    """Prior on the parameter: a uniform box or a Gaussian."""

    kind: str
    lower: tuple = ()
    upper: tuple = ()
    mean: tuple = ()
    cov: tuple = ()

    def __post_init__(self):
        if self.kind == "uniform_box":
            lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
            if lo.size == 0 or lo.shape != hi.shape or np.any(lo >= hi):
                raise ValueError("uniform prior needs a non-degenerate box")
        elif self.kind == "gaussian":
            cov = np.atleast_2d(np.asarray(self.cov, float))
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ValueError("prior covariance is not positive definite") from None
            if cov.shape != (len(self.mean), len(self.mean)):
                raise ValueError("prior mean and covariance disagree in size")
        else:
            raise ValueError(f"unknown prior kind {self.kind!r}")

    @classmethod
    def uniform(cls, lower, upper) -> "PriorSpec":
        return cls("uniform_box", tuple(np.atleast_1d(lower).tolist()), tuple(np.atleast_1d(upper).tolist()))

    @classmethod
    def gaussian(cls, mean, cov) -> "PriorSpec":
        mean = np.atleast_1d(np.asarray(mean, float))
        cov = np.atleast_2d(np.asarray(cov, float))
        return cls("gaussian", mean=tuple(mean.tolist()), cov=tuple(map(tuple, cov.tolist())))

    @property
    def dim(self) -> int:
        return len(self.lower) if self.kind == "uniform_box" else len(self.mean)

    def rule(self, n_nodes: int, family: str | None = None) -> QuadratureRule:
        """Quadrature rule for expectations under this prior (tensor in each axis).

        Uniform boxes default to the trapezoid rule; ``family="gauss_legendre"``
        selects Gauss-Legendre instead. Gaussian priors use Gauss-Hermite mapped
        through the Cholesky factor and return a Gaussian-kind rule whose nodes
        are already in parameter space.
        """
        if self.kind == "uniform_box":
            family = family or "trapezoid"
            make = {"trapezoid": trapezoid, "gauss_legendre": gauss_legendre}[family]
            return tensor_all([make(n_nodes, a, b) for a, b in zip(self.lower, self.upper)])
        if family not in (None, "gauss_hermite"):
            raise ValueError("Gaussian priors use Gauss-Hermite rules")
        base = tensor_all([gauss_hermite(n_nodes)] * self.dim)
        chol = np.linalg.cholesky(np.atleast_2d(np.asarray(self.cov, float)))
        nodes = np.asarray(self.mean, float) + base.nodes @ chol.T
        return QuadratureRule(nodes, base.weights, base.weight_kind)


@dataclass(frozen=True, eq=False)
class ForwardModel:
    """Observation map ``G(x; d)`` with its parameter and design domains."""

    param_dim: int
    design_dim: int
    data_dim: int
    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    descriptor: str
    param_lower: tuple | None = None
    param_upper: tuple | None = None
    design_lower: tuple | None = None
    design_upper: tuple | None = None
    tag: str = ""

    def evaluate(self, x, d) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.param_dim)
        d = np.asarray(d, dtype=float).reshape(self.design_dim)
        out = np.asarray(self.evaluator(x, d), dtype=float).reshape(x.shape[0], self.data_dim)
        return out

    @classmethod
    def from_function(cls, f, param_dim, design_dim, data_dim, **kw) -> "ForwardModel":
        """Wrap a vectorized ``f(x, d)``."""
        return cls(param_dim, design_dim, data_dim, f, kw.pop("descriptor", "custom"), **kw)


# ---------------------------------------------------------------------------
# analytic two-output map


def analytic_g(x, d) -> np.ndarray:
    """Two-output map with components ``x^3 d_i^2 + x exp(-|0.2 - d_i|)``.

    ``x`` may be a scalar or an array; the output has a trailing axis of length 2.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float).reshape(2)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("x must lie in [0, 1]")
    xe = x[..., None]
    return xe**3 * d**2 + xe * np.exp(-np.abs(0.2 - d))


def analytic_model(design_lower=(0.0, 0.0), design_upper=(1.0, 1.0)) -> ForwardModel:
    return ForwardModel(
        1, 2, 2,
        lambda x, d: analytic_g(x[:, 0], d),
        "analytic2out",
        param_lower=(0.0,), param_upper=(1.0,),
        design_lower=tuple(design_lower), design_upper=tuple(design_upper),
        tag="analytic2out",
    )


def scalar_linear(a: float) -> ForwardModel:
    """``G(x; d) = a x``; the design is ignored."""
    a = float(a)
    return ForwardModel(
        1, 2, 1, lambda x, d: a * x, f"scalar_linear({a!r})", tag=f"scalar_linear(a={a!r})"
    )


# ---------------------------------------------------------------------------
# heat equation sensor model


@dataclass(frozen=True)
class HeatConfig:
    spatial_n: int = 41
    dt: float = 1.0 / 400.0
    bdf_order: int = 4
    s: float = 2.0
    h: float = 0.05
    tau: float = 0.3
    obs_times: tuple = (0.08, 0.16, 0.24, 0.32, 0.40)
    T: float = 0.4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not self.tau < self.T:
            raise ValueError("tau must be smaller than T")
        if self.spatial_n < 3:
            raise ValueError("spatial_n must be at least 3")
        if self.bdf_order not in (1, 2, 3, 4):
            raise ValueError("bdf_order must be in 1..4")
        t = np.asarray(self.obs_times, float)
        if t.size == 0 or np.any(np.diff(t) <= 0) or t[-1] > self.T + 1e-12 or t[0] <= 0:
            raise ValueError("observation times must be strictly increasing in (0, T]")
        steps = t / self.dt
        if np.any(np.abs(steps - np.round(steps)) > 1e-8):
            raise ValueError("observation times must be multiples of dt")

    def key(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# BDF coefficients: sum_j alpha[j] v_{n+1-j} = dt f_{n+1}
_BDF = {
    1: (1.0, -1.0),
    2: (3 / 2, -2.0, 1 / 2),
    3: (11 / 6, -3.0, 3 / 2, -1 / 3),
    4: (25 / 12, -4.0, 3.0, -4 / 3, 1 / 4),
}


def neumann_laplacian(n: int) -> sp.csr_matrix:
    """Five-point Laplacian on an ``n x n`` grid of [0,1]^2 with mirrored ghost nodes."""
    hx = 1.0 / (n - 1)
    main = -2.0 * np.ones(n)
    off = np.ones(n - 1)
    lap1 = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    lap1[0, 1] = 2.0
    lap1[n - 1, n - 2] = 2.0
    lap1 = sp.csr_matrix(lap1) / hx**2
    eye = sp.identity(n, format="csr")
    return sp.csr_matrix(sp.kron(eye, lap1) + sp.kron(lap1, eye))


def trapezoid_weights_2d(n: int) -> np.ndarray:
    w = np.full(n, 1.0 / (n - 1))
    w[0] = w[-1] = 0.5 / (n - 1)
    return np.outer(w, w).ravel()


class HeatSolution:
    """Snapshots of ``v(z, t_i)`` for a batch of sources, with bilinear sampling."""

    def __init__(self, cfg: HeatConfig, snapshots: np.ndarray):
        # snapshots: (n_sources, n_times, n, n) indexed [.., iy, ix]
        self.cfg = cfg
        self.snapshots = snapshots
        self.grid = np.linspace(0.0, 1.0, cfg.spatial_n)

    def sample(self, z) -> np.ndarray:
        """Bilinear interpolation at point ``z``; returns ``(n_sources, n_times)``."""
        z = np.asarray(z, float).reshape(2)
        if np.any(z < 0.0) or np.any(z > 1.0):
            raise ValueError(f"sensor {z} outside the unit square")
        n = self.cfg.spatial_n
        pos = z * (n - 1)
        i0 = np.minimum(np.floor(pos).astype(int), n - 2)
        fx, fy = pos - i0
        ix, iy = i0
        s = self.snapshots
        return (
            (1 - fx) * (1 - fy) * s[..., iy, ix]
            + fx * (1 - fy) * s[..., iy, ix + 1]
            + (1 - fx) * fy * s[..., iy + 1, ix]
            + fx * fy * s[..., iy + 1, ix + 1]
        )


def heat_source(points: np.ndarray, cfg: HeatConfig) -> np.ndarray:
    """Source profiles on the grid (without time cutoff), one column per source."""
    n = cfg.spatial_n
    g = np.linspace(0.0, 1.0, n)
    zx, zy = np.meshgrid(g, g)  # [iy, ix]
    zx, zy = zx.ravel(), zy.ravel()
    pts = np.asarray(points, float).reshape(-1, 2)
    r2 = (zx[:, None] - pts[:, 0]) ** 2 + (zy[:, None] - pts[:, 1]) ** 2
    return cfg.s / (2 * np.pi * cfg.h**2) * np.exp(-r2 / (2 * cfg.h**2))


def heat_solve_batch(sources, cfg: HeatConfig, record_all: bool = False):
    """Solve the heat equation for each source location in ``sources``.

    Central differences in space with zero-Neumann boundaries, BDF time stepping
    with a startup ramp BDF1 -> ... -> ``cfg.bdf_order``. The constant system
    matrices are factorized once per order and reused for every column.

    Returns a :class:`HeatSolution` at the observation times, plus (if
    ``record_all``) the full list of step times and fields.
    """
    sources = np.asarray(sources, float).reshape(-1, 2)
    if np.any(sources < 0) or np.any(sources > 1):
        raise ValueError("source location outside the unit square")
    n = cfg.spatial_n
    lap = neumann_laplacian(n)
    eye = sp.identity(n * n, format="csc")
    n_steps = int(round(cfg.T / cfg.dt))
    obs_steps = {int(round(t / cfg.dt)): i for i, t in enumerate(cfg.obs_times)}
    profile = heat_source(sources, cfg)
    factors = {}
    history = [np.zeros_like(profile)]
    snaps = np.zeros((sources.shape[0], len(cfg.obs_times), n, n))
    recorded_t, recorded = ([0.0], [history[0]]) if record_all else (None, None)
    for step in range(1, n_steps + 1):
        order = min(step, cfg.bdf_order)
        alpha = _BDF[order]
        if order not in factors:
            factors[order] = splu(sp.csc_matrix(alpha[0] * eye - cfg.dt * lap))
        rhs = -sum(alpha[j] * history[-j] for j in range(1, order + 1))
        # source acts on steps whose interval (t_{k-1}, t_k] lies inside [0, tau]
        if step * cfg.dt <= cfg.tau + 1e-12:
            rhs = rhs + cfg.dt * profile
        v = factors[order].solve(rhs)
        if not np.all(np.isfinite(v)):
            raise ArithmeticError("heat solve produced non-finite values")
        history.append(v)
        if len(history) > 4:
            history.pop(0)
        if step in obs_steps:
            snaps[:, obs_steps[step]] = v.T.reshape(-1, n, n)
        if record_all:
            recorded_t.append(step * cfg.dt)
            recorded.append(v)
    sol = HeatSolution(cfg, snaps)
    if record_all:
        return sol, np.array(recorded_t), recorded
    return sol


def heat_solve(source_x, cfg: HeatConfig):
    """Solve for a single source location; see :func:`heat_solve_batch`."""
    return heat_solve_batch(np.asarray(source_x, float).reshape(1, 2), cfg)


class HeatSensorModel:
    """Five-time sensor readings ``v(d, t_i)`` for a Gaussian source at ``x``.

    Solutions are cached per (source location, config) pair. Concurrent callers
    may duplicate a solve, but the stored values are identical.
    """

    def __init__(self, cfg: HeatConfig | None = None):
        self.cfg = cfg or HeatConfig()
        self._key = self.cfg.key()
        self._cache: dict = {}
        self._lock = threading.Lock()

    def _solutions(self, x: np.ndarray) -> np.ndarray:
        keys = [(self._key, float(a), float(b)) for a, b in x]
        with self._lock:
            missing = sorted({k for k in keys if k not in self._cache})
        if missing:
            pts = np.array([[k[1], k[2]] for k in missing])
            sol = heat_solve_batch(pts, self.cfg)
            with self._lock:
                for i, k in enumerate(missing):
                    self._cache.setdefault(k, sol.snapshots[i])
        with self._lock:
            return np.stack([self._cache[k] for k in keys])

    def observe(self, x, d) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1, 2)
        sol = HeatSolution(self.cfg, self._solutions(x))
        return sol.sample(d)

    def as_model(self) -> ForwardModel:
        return ForwardModel(
            2, 2, len(self.cfg.obs_times), self.observe, "heat_sensor",
            param_lower=(0.0, 0.0), param_upper=(1.0, 1.0),
            design_lower=(0.0, 0.0), design_upper=(1.0, 1.0),
            tag=f"heat_sensor({self._key})",
        )


def heat_observe(x, d, cfg: HeatConfig) -> np.ndarray:
    """Sensor readings at ``d`` for a single source at ``x`` (length ``len(obs_times)``)."""
    return heat_solve(x, cfg).sample(d)[0]


def l4_moment(model, designs, prior_rule: QuadratureRule, noise) -> float:
    """``sup_d E ||G(X; d)||_Γ^4`` over the given designs."""
    from .divergence import weighted_norm_sq

    w = prior_rule.normalized_weights()
    best = 0.0
    for d in designs:
        g = model.evaluate(prior_rule.nodes, d)
        val = float(np.sum(w * weighted_norm_sq(g, noise) ** 2))
        if not np.isfinite(val):
            raise ArithmeticError(f"non-finite fourth moment at design {d}")
        best = max(best, val)
    return best
