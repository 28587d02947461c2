import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eigstab.divergence import GaussianDist
from eigstab.eig import (
    EvidenceUnderflowError,
    eig,
    eig_error_example1,
    eig_linear_gaussian_closed,
    log_evidence,
    log_evidence_grid,
    log_likelihood,
)
from eigstab.models import ForwardModel, PriorSpec, analytic_model, scalar_linear
from eigstab.quadrature import QuadratureRule, gauss_hermite, gauss_hermite_family, smolyak, tensor_all
from eigstab.surrogate import PerturbedLinear

# Mutual information of the analytic map at d = (0, 0) with noise 1e-4 I. Both
# outputs equal x exp(-0.2) there, so the information equals that of their mean
# (noise variance 5e-5). Computed from the entropy of the 1D evidence with a
# 2001-node trapezoid rule in x and a 100001-node trapezoid rule in y.
ANALYTIC_ORIGIN_ORACLE = 3.348410746270244

UNIT = GaussianDist.isotropic(1, 1.0)


def _gauss_prior(n=64):
    return PriorSpec.gaussian([0.0], [[1.0]]).rule(n)


def test_log_likelihood_examples():
    assert log_likelihood([0.0], [0.0], UNIT) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)
    assert log_likelihood([1.0], [0.0], UNIT) == pytest.approx(-0.5 - 0.5 * np.log(2 * np.pi), abs=1e-15)
    noise = GaussianDist.isotropic(2, 4.0)
    assert log_likelihood([0.0, 0.0], [0.0, 0.0], noise) == pytest.approx(-np.log(4) - np.log(2 * np.pi), abs=1e-14)
    with pytest.raises(ValueError):
        log_likelihood([0.0, 0.0], [0.0], UNIT)


def test_log_evidence_point_prior():
    rule = QuadratureRule(np.array([[0.3]]), np.array([1.0]), "gaussian")
    m = scalar_linear(2.0)
    assert log_evidence([0.1], (0, 0), m, rule, UNIT) == pytest.approx(log_likelihood([0.1], [0.6], UNIT), abs=1e-15)


def test_log_evidence_linear_gaussian():
    val = log_evidence([0.0], (0, 0), scalar_linear(1.0), _gauss_prior(), UNIT)
    assert val == pytest.approx(-0.5 * np.log(4 * np.pi), abs=1e-10)


def test_log_evidence_symmetric_for_odd_models():
    m = ForwardModel(1, 2, 1, lambda x, d: x**3 + x, "odd")
    a = log_evidence([0.7], (0, 0), m, _gauss_prior(30), UNIT)
    b = log_evidence([-0.7], (0, 0), m, _gauss_prior(30), UNIT)
    assert a == pytest.approx(b, abs=1e-13)


def test_log_evidence_grid_underflow_is_reported():
    noise = GaussianDist.isotropic(1, 1.0)
    with pytest.raises(EvidenceUnderflowError, match="outer node 0"):
        log_evidence_grid(np.array([[np.inf]]), np.zeros((1, 1)), np.zeros((2, 1)), np.log([0.5, 0.5]), noise)


def test_eig_scalar_half_log_two():
    est = eig(scalar_linear(1.0), (0, 0), _gauss_prior(), gauss_hermite(64), UNIT)
    assert est.value == pytest.approx(0.5 * np.log(2), abs=1e-6)
    assert (est.n_prior, est.n_noise, est.n_evidence) == (64, 64, 64)
    assert est.surrogate_tag is None and est.model_tag.startswith("scalar_linear")


def test_eig_constant_model_is_zero():
    m = ForwardModel(1, 2, 2, lambda x, d: np.tile([1.0, -2.0], (len(x), 1)), "const")
    noise = GaussianDist(np.zeros(2), [[0.3, 0.1], [0.1, 0.2]])
    est = eig(m, (0, 0), _gauss_prior(10), smolyak(2, 2, gauss_hermite_family()), noise)
    assert est.value == pytest.approx(0.0, abs=1e-10)


def test_eig_is_deterministic():
    args = (analytic_model(), (0.4, 0.8), PriorSpec.uniform([0], [1]).rule(101),
            smolyak(2, 3, gauss_hermite_family()), GaussianDist.isotropic(2, 1e-4))
    assert eig(*args).value == eig(*args).value


def test_eig_analytic_origin_matches_brute_force():
    est = eig(analytic_model(), (0.0, 0.0), PriorSpec.uniform([0], [1]).rule(801),
              smolyak(2, 3, gauss_hermite_family()), GaussianDist.isotropic(2, 1e-4))
    assert est.value == pytest.approx(ANALYTIC_ORIGIN_ORACLE, abs=1e-4)


def test_eig_independent_evidence_rule():
    prior = PriorSpec.uniform([0], [1]).rule(201)
    inner = PriorSpec.uniform([0], [1]).rule(401)
    args = (analytic_model(), (0.5, 0.5))
    nr, noise = smolyak(2, 3, gauss_hermite_family()), GaussianDist.isotropic(2, 1e-4)
    a = eig(*args, prior, nr, noise)
    b = eig(*args, prior, nr, noise, evidence_rule=inner)
    assert b.n_evidence == 401
    assert abs(a.value - b.value) < 5e-3


def test_eig_rejects_wrong_noise_rule():
    with pytest.raises(ValueError):
        eig(scalar_linear(1.0), (0, 0), _gauss_prior(), tensor_all([gauss_hermite(5)] * 2), UNIT)


def test_eig_surrogate_tags():
    s = PerturbedLinear(1.5, 2, scalar_linear(1.0))
    est = eig(s, (0, 0), _gauss_prior(), gauss_hermite(64), UNIT)
    assert est.surrogate_tag == "perturbed_linear(N=2)"
    assert est.value == pytest.approx(0.5 * np.log(3.25), abs=1e-6)
    assert est.to_dict()["quadrature"] == {"prior": 64, "noise": 64, "evidence": 64}


@pytest.mark.parametrize("design", [(0.0, 0.0), (0.5, 0.2), (1.0, 1.0), (0.3, 0.9)])
def test_eig_nonnegative(design):
    est = eig(analytic_model(), design, PriorSpec.uniform([0], [1]).rule(201),
              smolyak(2, 3, gauss_hermite_family()), GaussianDist.isotropic(2, 1e-4))
    assert est.value >= -1e-8


def test_eig_stable_under_refinement():
    # doubling the outer rule and raising the noise level moves U by well under 1e-3 nats
    designs = [(a, b) for a in (0.0, 0.5, 1.0) for b in (0.0, 0.5, 1.0)]
    m, noise = analytic_model(), GaussianDist.isotropic(2, 1e-4)
    for d in designs:
        lo = eig(m, d, PriorSpec.uniform([0], [1]).rule(201), smolyak(2, 3, gauss_hermite_family()), noise).value
        hi = eig(m, d, PriorSpec.uniform([0], [1]).rule(401), smolyak(2, 4, gauss_hermite_family()), noise).value
        assert abs(lo - hi) < 1e-3


def _random_linear_instance(seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(scale=0.6, size=(2, 2))
    a = rng.normal(size=(2, 2))
    cov = 0.3 * a @ a.T + 0.5 * np.eye(2)
    b = rng.normal(size=(2, 2))
    noise = GaussianDist(np.zeros(2), 0.3 * b @ b.T + 0.7 * np.eye(2))
    model = ForwardModel(2, 1, 2, lambda x, d: x @ G.T, "linear")
    return G, cov, noise, model


@pytest.mark.parametrize("seed", range(4))
def test_eig_matches_linear_gaussian_closed_form(seed):
    G, cov, noise, model = _random_linear_instance(seed)
    est = eig(model, [0.0], PriorSpec.gaussian([0, 0], cov).rule(20), tensor_all([gauss_hermite(12)] * 2), noise)
    assert est.value == pytest.approx(eig_linear_gaussian_closed(G, cov, noise), abs=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_eig_whitening_invariance(seed):
    G, cov, noise, model = _random_linear_instance(seed)
    L = np.random.default_rng(100 + seed).normal(size=(2, 2)) + 2 * np.eye(2)
    moved = ForwardModel(2, 1, 2, lambda x, d: x @ (L @ G).T, "moved")
    noise2 = GaussianDist(np.zeros(2), L @ noise.cov @ L.T)
    prior, nr = PriorSpec.gaussian([0, 0], cov).rule(20), smolyak(2, 3, gauss_hermite_family())
    assert eig(model, [0.0], prior, nr, noise).value == pytest.approx(eig(moved, [0.0], prior, nr, noise2).value, abs=1e-10)


def test_closed_form_examples():
    assert eig_linear_gaussian_closed(np.zeros((1, 1)), [[1.0]], UNIT) == 0.0
    assert eig_linear_gaussian_closed([[3.0]], [[1.0]], UNIT) == pytest.approx(0.5 * np.log(10))
    assert eig_linear_gaussian_closed(np.eye(2), np.eye(2), GaussianDist.isotropic(2, 1.0)) == pytest.approx(np.log(2))
    with pytest.raises(ValueError):
        eig_linear_gaussian_closed([[1.0]], [[-1.0]], UNIT)


def test_example1_error_examples():
    assert eig_error_example1(1.0, 1.0) == 0.0
    assert eig_error_example1(1.0, 2.0) == pytest.approx(0.45815, abs=1e-5)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0.0, 5.0), delta=st.floats(1e-6, 5.0))
def test_example1_error_bracket(a, delta):
    a_n = a + delta
    val = eig_error_example1(a, a_n)
    lower = delta * (a_n + a) / (2 * (a_n**2 + 1))
    upper = delta * (a_n + a) / (2 * (a**2 + 1))
    assert lower * (1 - 1e-12) <= val <= upper * (1 + 1e-12)
