"""Gaussian distributions, KL and Hellinger divergences, and the expected
likelihood KL between a forward model and its surrogate."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .quadrature import NonFiniteIntegrandError, QuadratureRule


class GaussianDist:
    """Multivariate normal N(mean, cov) with a cached Cholesky factor.

    All solves go through the lower-triangular factor; the covariance is never
    inverted explicitly.
    """

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        p = mean.shape[0]
        if cov.shape != (p, p):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {p}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        self.mean = mean
        self.cov = cov
        self.chol = chol
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        for arr in (self.mean, self.cov, self.chol):
            arr.setflags(write=False)

    @classmethod
    def isotropic(cls, dim: int, variance: float, mean=None) -> "GaussianDist":
        mean = np.zeros(dim) if mean is None else mean
        return cls(mean, variance * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def whiten(self, v) -> np.ndarray:
        """Return ``L^{-1} v`` for vectors stacked along the last axis."""
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.dim:
            raise ValueError(f"expected vectors of length {self.dim}, got {v.shape[-1]}")
        flat = v.reshape(-1, self.dim)
        out = solve_triangular(self.chol, flat.T, lower=True).T
        return out.reshape(v.shape)

    def color(self, z) -> np.ndarray:
        """Return ``L z``: maps standard-normal samples to zero-mean N(0, cov)."""
        z = np.asarray(z, dtype=float)
        return z @ self.chol.T

    def logpdf(self, y) -> np.ndarray:
        z = self.whiten(np.asarray(y, dtype=float) - self.mean)
        return -0.5 * np.sum(z * z, axis=-1) - 0.5 * self.logdet - 0.5 * self.dim * np.log(2 * np.pi)


def weighted_norm_sq(v, noise: GaussianDist) -> np.ndarray | float:
    """Squared Γ-weighted norm ``v^T Γ^{-1} v`` (vectorized over leading axes)."""
    z = noise.whiten(v)
    out = np.sum(z * z, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def kl_gaussian(p: GaussianDist, q: GaussianDist) -> float:
    """KL(p || q) between two multivariate normals."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    # tr(Σq^{-1} Σp) = ||Lq^{-1} Lp||_F^2
    m = solve_triangular(q.chol, p.chol, lower=True)
    trace = float(np.sum(m * m))
    maha = weighted_norm_sq(q.mean - p.mean, q)
    return max(0.0, 0.5 * (trace - p.dim + maha + q.logdet - p.logdet))


def expected_likelihood_kl(model, surrogate, d, prior_rule: QuadratureRule, noise: GaussianDist) -> float:
    """Prior expectation of KL between the surrogate and model likelihoods.

    For Gaussian likelihoods sharing Γ this is ``0.5 * E ||G - G_N||_Γ^2``.
    ``prior_rule`` is normalized to a probability measure before use.
    """
    g = model.evaluate(prior_rule.nodes, d)
    gn = surrogate.evaluate(prior_rule.nodes, d)
    if g.shape != gn.shape:
        raise ValueError("model and surrogate output shapes differ")
    if g.shape[1] != noise.dim:
        raise ValueError("model output dimension does not match the noise dimension")
    sq = weighted_norm_sq(g - gn, noise)
    return 0.5 * float(np.sum(prior_rule.normalized_weights() * sq))


def hellinger_sq_numeric_1d(
    logp: Callable[[np.ndarray], np.ndarray],
    logq: Callable[[np.ndarray], np.ndarray],
    rule: QuadratureRule,
) -> float:
    """Squared Hellinger distance ``0.5 * ∫ (sqrt p - sqrt q)^2`` under ``rule``.

    Densities are given as log-densities (``-inf`` is allowed for zero mass).
    """
    x = rule.nodes[:, 0] if rule.dim == 1 else rule.nodes
    lp = np.asarray(logp(x), dtype=float)
    lq = np.asarray(logq(x), dtype=float)
    if np.any(np.isnan(lp)) or np.any(np.isnan(lq)) or np.any(lp == np.inf) or np.any(lq == np.inf):
        raise NonFiniteIntegrandError("non-finite density value")
    integrand = (np.exp(0.5 * lp) - np.exp(0.5 * lq)) ** 2
    val = 0.5 * float(np.sum(rule.weights * integrand))
    return min(1.0, max(0.0, val))
