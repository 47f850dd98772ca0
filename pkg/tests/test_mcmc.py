import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdps.forward import MaskOperator
from cdps.mcmc import (
    ChainState,
    PcnConfig,
    PcnProblem,
    acf_half_life,
    autocorrelation,
    edm_generator,
    gaussian_log_likelihood,
    gelman_rubin,
    pcn_step,
    run_chains,
)
from cdps.priors import GaussianPrior
from cdps.rng import stream
from cdps.schedule import EdmSchedule


def _flat(x):
    return 0.0


def _problem(ll=_flat, dim=3):
    cov = np.array([[1.0, 0.3, 0.0], [0.3, 2.0, 0.5], [0.0, 0.5, 0.5]])[:dim, :dim]
    return PcnProblem.from_gaussian(GaussianPrior(np.arange(dim, dtype=float), cov), ll)


def _quadratic(target, sd):
    return lambda x: float(-0.5 * np.sum(((x - target) / sd) ** 2))


def test_beta_zero_proposes_current_state():
    prob = _problem(_quadratic(np.ones(3), 0.1))
    x = np.array([0.5, -1.0, 2.0])
    st_ = ChainState(x.copy(), prob.log_likelihood(x))
    for _ in range(10):
        pcn_step(st_, PcnConfig(beta=0.0), prob, stream(0))
    assert np.array_equal(st_.x, x) and st_.acceptance_rate == 1.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(0, 1000))
def test_equal_likelihood_always_accepts(beta, seed):
    prob = _problem()
    s = ChainState(prob.mean.copy(), 0.0)
    rng = stream(seed)
    for _ in range(20):
        pcn_step(s, PcnConfig(beta=beta), prob, rng)
    assert s.n_accepted == 20


def test_flat_likelihood_leaves_prior_invariant():
    prob = _problem()
    cfg = PcnConfig(beta=0.5, n_iterations=20000, n_chains=2, thin=5)
    res = run_chains(cfg, prob)
    s = res.samples.reshape(-1, 3)
    n_eff = s.shape[0] / 3
    assert np.all(np.abs(s.mean(axis=0) - prob.mean) < 4 * np.sqrt(2.0 / n_eff))
    assert np.allclose(np.cov(s.T), prob.chol @ prob.chol.T, atol=0.15)


def test_posterior_matches_conjugate():
    prior = GaussianPrior([0.0, 0.0], [[1.0, 0.6], [0.6, 1.0]])
    op = MaskOperator([(0, 0, 0)], (1, 1, 2))
    ll = gaussian_log_likelihood(op, [1.5], [0.5])
    prior2 = GaussianPrior(prior.mean, prior.cov, (1, 1, 2))
    res = run_chains(PcnConfig(beta=0.4, n_iterations=40000, n_chains=3, thin=10), PcnProblem.from_gaussian(prior2, ll))
    s = res.samples.reshape(-1, 2)
    # Conjugate mean: C F^T (F C F^T + 0.25)^-1 d.
    expect = np.array([1.0, 0.6]) * 1.5 / 1.25
    assert np.allclose(s.mean(axis=0), expect, atol=0.05)
    assert np.all(res.rhat < 1.05)


def test_identical_seeds_identical_chains():
    prob = _problem(_quadratic(np.zeros(3), 1.0))
    cfg = PcnConfig(beta=0.3, n_iterations=500, n_chains=3, thin=5)
    a, b = run_chains(cfg, prob), run_chains(cfg, prob, workers=3)
    assert np.array_equal(a.samples, b.samples)
    c = run_chains(PcnConfig(beta=0.3, n_iterations=500, n_chains=3, thin=5, seed=1), prob)
    assert not np.array_equal(a.samples, c.samples)


def test_acceptance_decreases_with_step():
    prob = _problem(_quadratic(np.array([1.0, 2.0, 3.0]), 0.2))
    rates = [run_chains(PcnConfig(beta=b, n_iterations=4000, n_chains=1, thin=10), prob).acceptance[0]
             for b in (0.01, 0.03, 0.1)]
    assert rates[0] > rates[1] > rates[2]


def test_latent_mode_with_identity_generator_equals_direct():
    ll = _quadratic(np.array([0.5, -0.5]), 0.7)
    direct = PcnProblem(ll, 2)
    latent = PcnProblem(ll, 2, generator=lambda z: z)
    a = run_chains(PcnConfig(beta=0.2, n_iterations=300, n_chains=2, thin=3), direct)
    b = run_chains(PcnConfig(beta=0.2, n_iterations=300, n_chains=2, thin=3, mode="latent-ode"), latent)
    assert np.array_equal(a.samples, b.samples)


def test_chain_state_log_likelihood_is_current():
    ll = _quadratic(np.ones(3), 0.3)
    prob = _problem(ll)
    res = run_chains(PcnConfig(beta=0.2, n_iterations=200, n_chains=2, thin=10), prob)
    for s in res.states:
        assert s.log_lik == ll(s.x)
        assert s.n_steps == 200 and 0 <= s.n_accepted <= 200


def test_edm_generator_is_deterministic_and_matches_prior():
    prior = GaussianPrior([0.5, -0.5], [[1.0, 0.2], [0.2, 1.0]], (1, 1, 2))
    gen = edm_generator(prior, EdmSchedule(16), (1, 1, 2))
    z = stream(3).standard_normal((400, 2))
    out = np.array([gen(zi) for zi in z])
    assert np.array_equal(gen(z[0]), out[0])
    assert np.allclose(out.mean(axis=0), prior.mean, atol=0.2)


def test_gaussian_log_likelihood_forms():
    F = np.array([[1.0, 0.0], [1.0, 1.0]])
    ll = gaussian_log_likelihood(F, [1.0, 1.0], [1.0, 2.0])
    assert ll(np.array([1.0, 0.0])) == 0.0
    assert ll(np.array([0.0, 0.0])) == pytest.approx(-0.5 * (1 + 0.25))


def test_acf_basics():
    x = stream(4).standard_normal(20000)
    acf = autocorrelation(x, 10)
    assert acf[0] == 1.0
    assert np.all(np.abs(acf[1:]) < 3 / np.sqrt(x.size))
    ar = np.zeros(20000)
    e = stream(5).standard_normal(20000)
    for i in range(1, ar.size):
        ar[i] = 0.9 * ar[i - 1] + e[i]
    a = autocorrelation(ar, 3)
    assert a[1] == pytest.approx(0.9, abs=0.02)
    assert acf_half_life(a) == 4
    assert acf_half_life(acf) == 1
    with pytest.raises(ValueError):
        autocorrelation(np.ones(20), 3)
    with pytest.raises(ValueError):
        autocorrelation(x[:3], 5)


def test_rhat_cases():
    c = stream(6).standard_normal((1, 500))
    r, deg = gelman_rubin(np.repeat(c, 3, axis=0))
    assert r[0] == pytest.approx(1.0, abs=0.0) and not deg[0]
    iid = stream(7).standard_normal((4, 2000, 3))
    assert np.all(gelman_rubin(iid)[0] < 1.05)
    apart = np.stack([stream(8).standard_normal(200), 10 + stream(9).standard_normal(200)])
    assert gelman_rubin(apart)[0][0] > 1.2
    r, deg = gelman_rubin(np.zeros((2, 20)))
    assert r[0] == 1.0 and deg[0]
    with pytest.raises(ValueError):
        gelman_rubin(np.zeros((1, 20)))


def test_config_validation():
    for kw in ({"beta": -0.1}, {"beta": 1.5}, {"n_chains": 0}, {"thin": 0}, {"burn_in": 1.0}, {"mode": "x"}):
        with pytest.raises(ValueError):
            PcnConfig(**kw)


def test_single_chain_has_no_rhat():
    res = run_chains(PcnConfig(beta=0.3, n_iterations=200, n_chains=1, thin=10), _problem())
    assert np.all(np.isnan(res.rhat)) and res.samples.shape == (1, 10, 3)
