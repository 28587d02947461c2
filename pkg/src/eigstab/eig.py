"""Expected information gain by nested deterministic quadrature.

The data integral is taken over standard-Gaussian nodes through the change of
variables ``y = G(x; d) + L eps`` with ``L L^T = Γ``; the evidence is a
log-sum-exp over the prior rule. Everything is computed in whitened
coordinates ``L^{-1} y``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .divergence import GaussianDist
from .quadrature import GAUSSIAN, QuadratureRule
from .surrogate import Surrogate

_LOG_2PI = float(np.log(2.0 * np.pi))


class EvidenceUnderflowError(ArithmeticError):
    """The evidence mixture has no representable mass at some data point."""


@dataclass(frozen=True)
class EigEstimate:
    value: float
    design: tuple
    n_prior: int
    n_noise: int
    n_evidence: int
    model_tag: str = ""
    surrogate_tag: str | None = None

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "design": list(self.design),
            "quadrature": {"prior": self.n_prior, "noise": self.n_noise, "evidence": self.n_evidence},
            "model": self.model_tag,
            "surrogate": self.surrogate_tag,
        }


def _norm_const(noise: GaussianDist) -> float:
    return -0.5 * noise.logdet - 0.5 * noise.dim * _LOG_2PI


def log_likelihood(y, g, noise: GaussianDist) -> float:
    """Log density of N(g, Γ) at ``y``."""
    y, g = np.asarray(y, float), np.asarray(g, float)
    if y.shape != g.shape or y.shape[-1] != noise.dim:
        raise ValueError("dimension mismatch between data, prediction and noise")
    z = noise.whiten(y - g)
    out = -0.5 * np.sum(z * z, axis=-1) + _norm_const(noise)
    return float(out) if np.ndim(out) == 0 else out


def _prior_weights(rule: QuadratureRule) -> np.ndarray:
    w = rule.normalized_weights()
    if np.any(w <= 0.0):
        raise ValueError("the evidence rule needs strictly positive weights")
    return w


def log_evidence_grid(centers_w, eps, comp_w, log_w, noise: GaussianDist, chunk: int = 16) -> np.ndarray:
    """Log evidence at whitened data points ``centers_w[c] + eps[e]``.

    The evidence is the mixture ``sum_j w_j N(y; G_j, Γ)`` with whitened
    component means ``comp_w`` and log weights ``log_w``. Returns an
    ``(n_centers, n_eps)`` array including the Gaussian normalization constant.
    """
    centers_w = np.asarray(centers_w, float)
    eps = np.asarray(eps, float)
    comp_w = np.asarray(comp_w, float)
    eps_sq = np.sum(eps * eps, axis=1)
    out = np.empty((centers_w.shape[0], eps.shape[0]))
    for start in range(0, centers_w.shape[0], chunk):
        a = centers_w[start:start + chunk, None, :] - comp_w[None, :, :]  # (c, j, p)
        # exponent[c, e, j] = log w_j - |a_cj + eps_e|^2 / 2
        expo = np.einsum("cjk,ek->cej", a, eps)
        expo += 0.5 * np.sum(a * a, axis=2)[:, None, :]
        expo *= -1.0
        expo += log_w[None, None, :] - 0.5 * eps_sq[None, :, None]
        shift = expo.max(axis=2, keepdims=True)
        expo -= shift
        np.exp(expo, out=expo)
        with np.errstate(divide="ignore"):
            out[start:start + chunk] = np.log(expo.sum(axis=2)) + shift[..., 0]
    if not np.all(np.isfinite(out)):
        c, e = np.argwhere(~np.isfinite(out))[0]
        raise EvidenceUnderflowError(
            f"evidence underflow at outer node {c}, noise node {e} (whitened data {centers_w[c] + eps[e]})"
        )
    return out + _norm_const(noise)


def log_evidence(y, d, model, prior_rule: QuadratureRule, noise: GaussianDist) -> float:
    """``log ∫ π(y | x; d) dμ0(x)`` evaluated with the (normalized) prior rule."""
    y = np.asarray(y, float).reshape(1, noise.dim)
    g = model.evaluate(prior_rule.nodes, d)
    if g.shape[1] != noise.dim:
        raise ValueError("model output dimension does not match the noise dimension")
    w = _prior_weights(prior_rule)
    zero = np.zeros((1, noise.dim))
    return float(log_evidence_grid(noise.whiten(y), zero, noise.whiten(g), np.log(w), noise)[0, 0])


def _check_noise_rule(noise_rule: QuadratureRule, noise: GaussianDist) -> None:
    if noise_rule.weight_kind != GAUSSIAN:
        raise ValueError("the noise rule must be a standard-Gaussian rule")
    if noise_rule.dim != noise.dim:
        raise ValueError(f"noise rule dimension {noise_rule.dim} != data dimension {noise.dim}")


def information_gain_terms(g_outer, w_outer, noise_rule, noise, g_inner=None, w_inner=None) -> np.ndarray:
    """Per-node integrand ``log π(y|x_k) - log π(y)`` on the (outer x, noise) grid."""
    gw = noise.whiten(g_outer)
    inner_w = gw if g_inner is None else noise.whiten(g_inner)
    inner_weights = w_outer if w_inner is None else w_inner
    eps = noise_rule.nodes
    log_lik = -0.5 * np.sum(eps * eps, axis=1)[None, :] + _norm_const(noise)
    log_ev = log_evidence_grid(gw, eps, inner_w, np.log(inner_weights), noise)
    return log_lik - log_ev


def _integrate_grid(values, w_outer, w_noise) -> float:
    return float(np.sum(w_outer * np.sum(values * w_noise[None, :], axis=1)))


def eig(model, d, prior_rule: QuadratureRule, noise_rule: QuadratureRule, noise: GaussianDist,
        evidence_rule: QuadratureRule | None = None) -> EigEstimate:
    """Expected information gain ``U(d)`` of ``model`` (a ForwardModel or Surrogate)."""
    _check_noise_rule(noise_rule, noise)
    w_outer = _prior_weights(prior_rule)
    g = model.evaluate(prior_rule.nodes, d)
    if g.shape[1] != noise.dim:
        raise ValueError("model output dimension does not match the noise dimension")
    if evidence_rule is None or evidence_rule is prior_rule:
        terms = information_gain_terms(g, w_outer, noise_rule, noise)
        n_ev = prior_rule.size
    else:
        g_in = model.evaluate(evidence_rule.nodes, d)
        terms = information_gain_terms(g, w_outer, noise_rule, noise, g_in, _prior_weights(evidence_rule))
        n_ev = evidence_rule.size
    value = _integrate_grid(terms, w_outer, noise_rule.weights)
    if isinstance(model, Surrogate):
        model_tag, surrogate_tag = getattr(model.source, "tag", ""), model.tag
    else:
        model_tag, surrogate_tag = model.tag, None
    return EigEstimate(
        value,
        tuple(float(v) for v in np.asarray(d, float).reshape(-1)),
        prior_rule.size, noise_rule.size, n_ev,
        model_tag=model_tag,
        surrogate_tag=surrogate_tag,
    )


def eig_linear_gaussian_closed(G, prior_cov, noise: GaussianDist) -> float:
    """``0.5 log det(I + Γ^{-1/2} G C0 G^T Γ^{-1/2})`` for a linear-Gaussian model."""
    G = np.atleast_2d(np.asarray(G, float))
    prior_cov = np.atleast_2d(np.asarray(prior_cov, float))
    try:
        c0 = np.linalg.cholesky(prior_cov)
    except np.linalg.LinAlgError:
        raise ValueError("prior covariance is not positive definite") from None
    if G.shape != (noise.dim, prior_cov.shape[0]):
        raise ValueError("G has the wrong shape")
    b = noise.whiten((G @ c0).T).T
    m = np.eye(noise.dim) + b @ b.T
    return float(np.sum(np.log(np.diag(np.linalg.cholesky(m)))))


def eig_error_example1(a: float, a_n: float) -> float:
    """``|U_N - U|`` for ``G(x) = a x`` vs ``G_N(x) = a_N x`` with unit prior and noise."""
    # log1p keeps full relative precision when a_N is close to a
    return 0.5 * abs(float(np.log1p((a_n - a) * (a_n + a) / (a**2 + 1.0))))
