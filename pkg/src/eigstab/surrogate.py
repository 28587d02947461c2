"""Surrogate observation maps G_N.

Three families: piecewise-linear interpolation in the parameter, sparse-grid
piecewise-multilinear interpolation in (parameter, design), and Legendre
polynomial chaos over a box in (parameter, design).
"""

from __future__ import annotations

import itertools
import json
import threading
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre

from .quadrature import QuadratureRule

_DOMAIN_TOL = 1e-12


class OutOfDomainError(ValueError):
    pass


def _check_box(points: np.ndarray, lower: np.ndarray, upper: np.ndarray, what: str) -> None:
    if np.any(points < lower - _DOMAIN_TOL) or np.any(points > upper + _DOMAIN_TOL):
        raise OutOfDomainError(f"{what} outside the surrogate domain [{lower}, {upper}]")


class Surrogate:
    """Common interface: ``evaluate(x, d)`` with the same shapes as a ForwardModel."""

    kind: str
    level_param: int
    param_dim: int
    design_dim: int
    data_dim: int
    source = None

    @property
    def tag(self) -> str:
        return f"{self.kind}(N={self.level_param})"

    def evaluate(self, x, d) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# perturbed scalar linear map


class PerturbedLinear(Surrogate):
    """``G_N(x) = a_N x`` for a scalar linear model; the design is ignored."""

    kind = "perturbed_linear"

    def __init__(self, a_n: float, level_param: int = 0, source=None, design_dim: int = 2):
        self.a_n = float(a_n)
        self.level_param = int(level_param)
        self.source = source
        self.param_dim, self.data_dim = 1, 1
        self.design_dim = source.design_dim if source is not None else design_dim

    def evaluate(self, x, d) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1, 1)
        return self.a_n * x


def build_perturbed_linear(model, a: float, n: int) -> PerturbedLinear:
    """Surrogate with ``a_N = a + 1/N``."""
    if n < 1:
        raise ValueError("N must be >= 1")
    return PerturbedLinear(a + 1.0 / n, n, source=model)


# ---------------------------------------------------------------------------
# piecewise linear in x


class PiecewiseLinearX(Surrogate):
    """Linear interpolation in a scalar parameter on ``[0, 1]`` at ``N + 1`` knots.

    Knot values are computed from the source model per design and memoized.
    """

    kind = "piecewise_linear_x"

    def __init__(self, model, n_intervals: int, knot_table: dict | None = None):
        if n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        self.source = model
        self.level_param = int(n_intervals)
        self.knots = np.linspace(0.0, 1.0, n_intervals + 1)
        self.param_dim = 1
        if model is not None:
            self.design_dim, self.data_dim = model.design_dim, model.data_dim
        else:
            first = next(iter(knot_table.values()))
            self.design_dim, self.data_dim = len(next(iter(knot_table))), first.shape[1]
        self._table = dict(knot_table or {})
        self._lock = threading.Lock()

    def knot_values(self, d) -> np.ndarray:
        key = tuple(float(v) for v in np.asarray(d, float).reshape(-1))
        with self._lock:
            vals = self._table.get(key)
        if vals is None:
            if self.source is None:
                raise KeyError(f"no knot values stored for design {key} and no source model")
            vals = self.source.evaluate(self.knots[:, None], key)
            with self._lock:
                self._table.setdefault(key, vals)
        return vals

    def evaluate(self, x, d) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1)
        _check_box(x, 0.0, 1.0, "parameter")
        vals = self.knot_values(d)
        return np.stack([np.interp(x, self.knots, vals[:, k]) for k in range(vals.shape[1])], axis=1)


def build_pl_x(model, n_intervals: int) -> PiecewiseLinearX:
    if model.param_dim != 1:
        raise ValueError("piecewise-linear surrogate needs a scalar parameter")
    if model.param_lower is not None and (model.param_lower[0], model.param_upper[0]) != (0.0, 1.0):
        raise ValueError("piecewise-linear surrogate needs the parameter domain [0, 1]")
    return PiecewiseLinearX(model, n_intervals)


# ---------------------------------------------------------------------------
# sparse grid piecewise multilinear interpolation


def _new_points_1d(level: int) -> np.ndarray:
    """Points added at ``level`` of the nested equidistant hierarchy on [0, 1]."""
    if level == 0:
        return np.array([0.5])
    if level == 1:
        return np.array([0.0, 1.0])
    m = 2**level
    return np.arange(1, m, 2) / m


def _hat(level: np.ndarray, center: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Hierarchical hat functions; level 0 is the constant one."""
    width = 2.0 ** np.maximum(level, 1)
    return np.where(level == 0, 1.0, np.maximum(0.0, 1.0 - width * np.abs(t - center)))


def sparse_grid_size(dim: int, level: int) -> int:
    count = 0
    for idx in itertools.product(range(level + 1), repeat=dim):
        if sum(idx) <= level:
            count += int(np.prod([len(_new_points_1d(i)) for i in idx]))
    return count


class SparseMultilinear(Surrogate):
    """Hierarchical-surplus sparse-grid interpolant over a box in (x, d).

    ``level_param`` is the number of grid nodes.
    """

    kind = "sparse_multilinear"

    def __init__(self, level, lower, upper, node_levels, node_unit, surpluses, param_dim, source=None):
        self.level = int(level)
        self.lower = np.asarray(lower, float)
        self.upper = np.asarray(upper, float)
        self.node_levels = np.asarray(node_levels, dtype=np.int64)
        self.node_unit = np.asarray(node_unit, float)
        self.surpluses = np.asarray(surpluses, float)
        self.param_dim = int(param_dim)
        self.design_dim = self.lower.size - self.param_dim
        self.data_dim = self.surpluses.shape[1]
        self.level_param = self.node_unit.shape[0]
        self.source = source

    @property
    def nodes(self) -> np.ndarray:
        return self.lower + self.node_unit * (self.upper - self.lower)

    def _eval_unit(self, t: np.ndarray, chunk: int = 2048) -> np.ndarray:
        out = np.empty((t.shape[0], self.data_dim))
        for start in range(0, t.shape[0], chunk):
            tt = t[start:start + chunk]
            basis = np.prod(_hat(self.node_levels[None], self.node_unit[None], tt[:, None, :]), axis=2)
            out[start:start + chunk] = np.sum(basis[:, :, None] * self.surpluses[None], axis=1)
        return out

    def evaluate_points(self, z) -> np.ndarray:
        """Evaluate at full ``(m, param_dim + design_dim)`` points."""
        z = np.atleast_2d(np.asarray(z, float))
        _check_box(z, self.lower, self.upper, "point")
        return self._eval_unit((z - self.lower) / (self.upper - self.lower))

    def evaluate(self, x, d) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1, self.param_dim)
        d = np.asarray(d, float).reshape(self.design_dim)
        z = np.hstack([x, np.broadcast_to(d, (x.shape[0], self.design_dim))])
        return self.evaluate_points(z)


def build_sparse_multilinear(model, level: int, lower, upper) -> SparseMultilinear:
    """Sparse-grid interpolant of ``model`` over the box ``lower <= (x, d) <= upper``.

    Uses the nested equidistant hierarchy with 1, 3, 5, 9, ... points per axis
    (Clenshaw-Curtis growth) and all multi-indices with ``|l|_1 <= level``.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    dim = lower.size
    if dim != model.param_dim + model.design_dim:
        raise ValueError("box dimension does not match the model's (x, d) dimension")
    p = model.param_dim

    def f(unit_pts):
        pts = lower + unit_pts * (upper - lower)
        return np.vstack([model.evaluate(pt[:p], pt[p:]) for pt in pts])

    surrogate = SparseMultilinear(level, lower, upper, np.zeros((0, dim), int), np.zeros((0, dim)),
                                  np.zeros((0, model.data_dim)), p, source=model)
    for total in range(level + 1):
        levels_list, unit_list = [], []
        for idx in itertools.product(range(total + 1), repeat=dim):
            if sum(idx) != total:
                continue
            pts = np.array(list(itertools.product(*[_new_points_1d(i) for i in idx])))
            unit_list.append(pts)
            levels_list.append(np.tile(idx, (pts.shape[0], 1)))
        unit = np.vstack(unit_list)
        lev = np.vstack(levels_list)
        values = f(unit)
        if surrogate.node_unit.shape[0]:
            values = values - surrogate._eval_unit(unit)
        surrogate = SparseMultilinear(
            level, lower, upper,
            np.vstack([surrogate.node_levels, lev]),
            np.vstack([surrogate.node_unit, unit]),
            np.vstack([surrogate.surpluses, values]),
            p, source=model,
        )
    return surrogate


# ---------------------------------------------------------------------------
# Legendre polynomial chaos


def total_degree_set(dim: int, degree: int) -> np.ndarray:
    out = [idx for idx in itertools.product(range(degree + 1), repeat=dim) if sum(idx) <= degree]
    out.sort(key=lambda j: (sum(j), tuple(-v for v in j)))
    return np.array(out, dtype=np.int64)


def tensor_degree_set(dim: int, degree: int) -> np.ndarray:
    out = list(itertools.product(range(degree + 1), repeat=dim))
    out.sort(key=lambda j: (sum(j), tuple(-v for v in j)))
    return np.array(out, dtype=np.int64)


def legendre_basis(z, lower, upper, multi_indices, normalized: bool = True) -> np.ndarray:
    """Tensorized Legendre polynomials shifted to the box, shape ``(m, n_terms)``.

    With ``normalized`` each 1D factor is scaled by ``sqrt(2k + 1)`` so the basis
    is orthonormal under the uniform probability measure on the box.
    """
    z = np.atleast_2d(np.asarray(z, float))
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    t = 2.0 * (z - lower) / (upper - lower) - 1.0
    kmax = int(multi_indices.max()) if multi_indices.size else 0
    out = np.ones((z.shape[0], multi_indices.shape[0]))
    for axis in range(z.shape[1]):
        table = legendre.legvander(t[:, axis], kmax)
        if normalized:
            table = table * np.sqrt(2 * np.arange(kmax + 1) + 1.0)
        out *= table[:, multi_indices[:, axis]]
    return out


class PolynomialChaos(Surrogate):
    """Legendre expansion ``sum_j G_j Psi_j(x, d)`` over a box in (x, d)."""

    kind = "pce"

    def __init__(self, degree, lower, upper, multi_indices, coefficients, param_dim,
                 normalized=True, index_set="total", source=None):
        self.degree = int(degree)
        self.lower = np.asarray(lower, float)
        self.upper = np.asarray(upper, float)
        self.multi_indices = np.asarray(multi_indices, dtype=np.int64)
        self.coefficients = np.asarray(coefficients, float)
        self.param_dim = int(param_dim)
        self.design_dim = self.lower.size - self.param_dim
        self.data_dim = self.coefficients.shape[1]
        self.normalized = bool(normalized)
        self.index_set = index_set
        self.level_param = self.degree
        self.source = source

    def basis(self, z) -> np.ndarray:
        return legendre_basis(z, self.lower, self.upper, self.multi_indices, self.normalized)

    def evaluate_points(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, float))
        _check_box(z, self.lower, self.upper, "point")
        return self.basis(z) @ self.coefficients

    def evaluate(self, x, d) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1, self.param_dim)
        d = np.asarray(d, float).reshape(self.design_dim)
        z = np.hstack([x, np.broadcast_to(d, (x.shape[0], self.design_dim))])
        return self.evaluate_points(z)


def _model_at_nodes(model, nodes: np.ndarray) -> np.ndarray:
    """Evaluate ``model`` at stacked (x, d) nodes, grouping by design."""
    p = model.param_dim
    designs, inverse = np.unique(nodes[:, p:], axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    out = np.empty((nodes.shape[0], model.data_dim))
    for k, d in enumerate(designs):
        sel = np.flatnonzero(inverse == k)
        out[sel] = model.evaluate(nodes[sel, :p], d)
    return out


def build_pce(model, degree: int, projection_rule: QuadratureRule, lower=None, upper=None,
              index_set: str = "total", normalized: bool = True) -> PolynomialChaos:
    """Project ``model`` onto Legendre polynomials of the given degree.

    Each coefficient is ``∫ G Ψ_j / ∫ Ψ_j^2`` computed with ``projection_rule``,
    a Lebesgue rule over the (x, d) box.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    dim = model.param_dim + model.design_dim
    if projection_rule.dim != dim:
        raise ValueError(f"projection rule has dimension {projection_rule.dim}, expected {dim}")
    lower = projection_rule.lower if lower is None else np.asarray(lower, float)
    upper = projection_rule.upper if upper is None else np.asarray(upper, float)
    make = {"total": total_degree_set, "tensor": tensor_degree_set}[index_set]
    indices = make(dim, degree)
    values = _model_at_nodes(model, projection_rule.nodes)
    psi = legendre_basis(projection_rule.nodes, lower, upper, indices, normalized)
    w = projection_rule.weights[:, None]
    numer = np.sum((w * psi)[:, :, None] * values[:, None, :], axis=0)
    denom = np.sum(w * psi * psi, axis=0)
    coeffs = numer / denom[:, None]
    return PolynomialChaos(degree, lower, upper, indices, coeffs, model.param_dim,
                           normalized, index_set, source=model)


def eval_surrogate(s: Surrogate, x, d) -> np.ndarray:
    return s.evaluate(x, d)


# ---------------------------------------------------------------------------
# serialization


def save_surrogate(s: Surrogate, path) -> None:
    """Write ``s`` to a self-describing ``.npz`` archive."""
    meta = {"kind": s.kind, "level_param": s.level_param, "param_dim": s.param_dim}
    arrays = {}
    if isinstance(s, PerturbedLinear):
        meta.update(a_n=s.a_n, design_dim=s.design_dim)
    elif isinstance(s, PiecewiseLinearX):
        keys = sorted(s._table)
        meta["design_dim"] = s.design_dim
        meta["data_dim"] = s.data_dim
        arrays["designs"] = np.array(keys, float).reshape(len(keys), s.design_dim)
        arrays["knot_values"] = np.array([s._table[k] for k in keys]).reshape(len(keys), -1, s.data_dim)
    elif isinstance(s, SparseMultilinear):
        meta["level"] = s.level
        arrays.update(lower=s.lower, upper=s.upper, node_levels=s.node_levels,
                      node_unit=s.node_unit, surpluses=s.surpluses)
    elif isinstance(s, PolynomialChaos):
        meta.update(degree=s.degree, normalized=s.normalized, index_set=s.index_set)
        arrays.update(lower=s.lower, upper=s.upper, multi_indices=s.multi_indices,
                      coefficients=s.coefficients)
    else:
        raise TypeError(f"cannot serialize {type(s).__name__}")
    with open(Path(path), "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_surrogate(path, model=None) -> Surrogate:
    """Inverse of :func:`save_surrogate`; ``model`` re-attaches the source map."""
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        kind = meta["kind"]
        if kind == PerturbedLinear.kind:
            return PerturbedLinear(meta["a_n"], meta["level_param"], model, meta["design_dim"])
        if kind == PiecewiseLinearX.kind:
            table = {tuple(float(v) for v in d): vals.copy()
                     for d, vals in zip(data["designs"], data["knot_values"])}
            s = PiecewiseLinearX(model, meta["level_param"], table)
            s.design_dim, s.data_dim = meta["design_dim"], meta["data_dim"]
            return s
        if kind == SparseMultilinear.kind:
            return SparseMultilinear(meta["level"], data["lower"], data["upper"], data["node_levels"],
                                     data["node_unit"], data["surpluses"], meta["param_dim"], source=model)
        if kind == PolynomialChaos.kind:
            return PolynomialChaos(meta["degree"], data["lower"], data["upper"], data["multi_indices"],
                                   data["coefficients"], meta["param_dim"], meta["normalized"],
                                   meta["index_set"], source=model)
    raise ValueError(f"unknown surrogate kind {kind!r}")
