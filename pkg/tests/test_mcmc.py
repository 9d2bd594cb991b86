import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from geoxval import mcmc
from geoxval.errors import AdaptationError, DomainError, SplitError
from geoxval.geodata import GeoDataset, covariance_matrix
from geoxval.mcmc import (
    ChainConfig,
    PowerPosterior,
    PriorConfig,
    TrainingPosterior,
    log_inv_gamma,
    log_jeffreys_nu,
    log_power_posterior,
    log_prior,
    log_training_posterior,
    mcse,
    run_chain,
    trigamma,
)
from geoxval.models import ModelParams, log_likelihood
from geoxval.scenarios import simulate_scenario
from geoxval.splits import SplitVector


def small_data(n=30, seed=0, mean=1.0):
    rng = np.random.default_rng(seed)
    return GeoDataset(coords=rng.random((n, 2)), y=mean + rng.normal(size=n))


# ---------------------------------------------------------------- special functions


def test_trigamma_identities():
    assert trigamma(1.0) == pytest.approx(math.pi ** 2 / 6, rel=1e-12)
    assert trigamma(0.5) == pytest.approx(math.pi ** 2 / 2, rel=1e-12)
    xs = np.linspace(1e-3, 100, 2001)
    # measured against the size of the terms being subtracted
    gap = np.abs(trigamma(xs + 1) - (trigamma(xs) - 1 / xs ** 2))
    assert np.all(gap <= 1e-12 * np.maximum(1.0, trigamma(xs)))
    with pytest.raises(DomainError):
        trigamma(0.0)
    with pytest.raises(DomainError):
        trigamma(-1.5)


def test_trigamma_against_scipy():
    xs = np.concatenate([np.geomspace(1e-4, 1e4, 400), [9.999, 10.0, 10.001]])
    assert np.allclose(trigamma(xs), special.polygamma(1, xs), rtol=1e-10, atol=0)


def jeffreys_oracle(nu):
    nu = mpmath.mpf(nu)
    br = mpmath.psi(1, nu / 2) - mpmath.psi(1, (nu + 1) / 2) - 2 * (nu + 3) / (nu * (nu + 1) ** 2)
    return float(0.5 * mpmath.log(nu / (nu + 3)) + 0.5 * mpmath.log(br))


@pytest.mark.parametrize("nu", [0.05, 0.5, 1.0, 3.0, 10.0, 50.0, 99.0, 100.0, 101.0, 1e3, 1e5])
def test_jeffreys_against_mpmath(nu):
    mpmath.mp.dps = 50
    assert log_jeffreys_nu(nu) == pytest.approx(jeffreys_oracle(nu), abs=1e-9)


def test_jeffreys_positive_on_grid():
    for nu in (0.5, 1.0, 3.0, 10.0, 100.0):
        v = math.exp(log_jeffreys_nu(nu))
        assert math.isfinite(v) and v > 0
    assert log_jeffreys_nu(-1.0) == -math.inf


# ---------------------------------------------------------------- priors


def test_inverse_gamma_mode():
    a, b = 2.1, 1.1
    grid = np.linspace(0.05, 3, 20001)
    vals = [log_inv_gamma(x, a, b) for x in grid]
    assert grid[int(np.argmax(vals))] == pytest.approx(b / (a + 1), abs=2e-4)
    assert log_inv_gamma(1.3, a, b) == pytest.approx(stats.invgamma(a, scale=b).logpdf(1.3), abs=1e-12)


def test_phi_prior_term():
    ds = small_data()
    prior = PriorConfig(c=1.0)
    rate = prior.c / ds.median_distance
    base = ModelParams(beta=[0.0], sigma2=1.0, tau2=0.25, phi=0.2)
    other = base.copy(phi=0.35)
    diff = log_prior(other, prior, "m1", ds) - log_prior(base, prior, "m1", ds)
    assert diff == pytest.approx(-rate * (0.35 - 0.2), abs=1e-12)
    full = mcmc._lp_phi(0.2, prior, ds.median_distance)
    assert full == pytest.approx(math.log(rate) - rate * 0.2, abs=1e-12)


def test_out_of_support():
    ds = small_data()
    prior = PriorConfig()
    assert log_prior(ModelParams(beta=[0.0], sigma2=-1.0, tau2=0.25, phi=0.2), prior, "m1", ds) == -math.inf
    assert log_prior(ModelParams(beta=[0.0], sigma2=1.0, tau2=0.25, phi=0.0), prior, "m1", ds) == -math.inf
    assert log_prior(ModelParams(beta=[0.0], sigma2=1.0, tau2=0.25, phi=0.2, nu=-2.0), prior, "m2", ds) == -math.inf
    with pytest.raises(DomainError):
        PriorConfig(a=-1.0)


def test_power_posterior_identities():
    ds = small_data(seed=1)
    prior = PriorConfig()
    p = ModelParams(beta=[0.8], sigma2=1.1, tau2=0.25, phi=0.2, nu=5.0)
    for model in ("m1", "m2"):
        full = log_likelihood(model, p, ds) + log_prior(p, prior, model, ds)
        assert log_power_posterior(p, ds, model, 1.0, prior) == full
        mid = log_power_posterior(p, ds, model, 0.5, prior)
        lo = log_power_posterior(p, ds, model, 0.0, prior)
        assert mid == pytest.approx(0.5 * (lo + full), abs=1e-10)
    with pytest.raises(DomainError):
        log_power_posterior(p, ds, "m1", 1.5, prior)


def test_power_posterior_crs_alpha():
    ds = simulate_scenario("crs", 5)
    p = ModelParams(beta=[4.0], sigma2=1.5, tau2=0.25, phi=0.15)
    assert math.isfinite(log_power_posterior(p, ds, "m1", 77 / 82, PriorConfig()))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["m1", "m2", "m3"]))
def test_weight_identity(seed, model):
    rng = np.random.default_rng(seed)
    n = 14
    ds = small_data(n, seed % 1000)
    p = ModelParams(beta=[rng.normal()], sigma2=float(rng.uniform(0.2, 3)), tau2=0.25, phi=float(rng.uniform(0.05, 1)),
                    nu=float(rng.uniform(1, 30)), upsilon=float(rng.uniform(0.1, 2)), log_delta=rng.normal(size=n))
    split = SplitVector.from_valid(n, rng.choice(n, size=3, replace=False))
    prior = PriorConfig()
    alpha = split.n_T / n
    gap = log_training_posterior(p, ds, model, split, prior) - log_power_posterior(p, ds, model, alpha, prior)
    weight = log_likelihood(model, p, ds, split.train_idx) - alpha * log_likelihood(model, p, ds)
    assert gap == pytest.approx(weight, abs=1e-10)


# ---------------------------------------------------------------- configs


def test_chain_config():
    with pytest.raises(DomainError):
        ChainConfig(100, 100)
    with pytest.raises(DomainError):
        ChainConfig(100, 10, thin=0)
    with pytest.raises(DomainError):
        ChainConfig(100, 10, step_sizes={"sigma2": -1})
    cfg = ChainConfig(100, 10, thin=3).with_draws(50)
    assert cfg.n_draws == 50 and cfg.n_iter == 160


# ---------------------------------------------------------------- chains


def test_prior_recovery_ks():
    ds = small_data()
    prior = PriorConfig()
    cfg = ChainConfig(n_iter=2000 + 10_000 * 5, burn_in=2000, thin=5)
    s = run_chain(PowerPosterior(0.0), "m1", ds, prior, cfg, np.random.default_rng(7))
    assert len(s) == 10_000
    ks = stats.kstest(s.sigma2, stats.invgamma(prior.a, scale=prior.b).cdf).statistic
    assert ks <= 0.05


def test_conjugate_mean():
    ds = small_data(25, 3, mean=2.0)
    fixed = {"sigma2": 1.0, "phi": 0.2}
    prior = PriorConfig(fixed=fixed)
    p = ModelParams(beta=[0.0], sigma2=1.0, tau2=0.25, phi=0.2)
    Sinv = np.linalg.inv(covariance_matrix(p, ds.distances, "m1"))
    one = np.ones(ds.n)
    v = 1.0 / (one @ Sinv @ one + 1.0 / prior.tau2_mu)
    m = v * (one @ Sinv @ ds.y)
    s = run_chain(PowerPosterior(1.0), "m1", ds, prior, ChainConfig(21_000, 1000), np.random.default_rng(8))
    mu = s.beta[:, 0]
    assert np.all(s.sigma2 == 1.0) and np.all(s.phi == 0.2)
    assert abs(mu.mean() - m) < 3 * mcse(mu)
    dev = (mu - m) ** 2
    assert abs(dev.mean() - v) < 3 * mcse(dev)


def test_acceptance_band_crs():
    ds = simulate_scenario("crs", 2024)
    for model in ("m1", "m2", "m3"):
        s = run_chain(PowerPosterior(77 / 82), model, ds, PriorConfig(), ChainConfig(2500, 1000),
                      np.random.default_rng(9))
        for block, rate in s.acceptance.items():
            assert 0.30 <= rate <= 0.50, (model, block, rate)


def test_doubling_iterations_is_stable():
    ds = small_data(25, 4)
    prior = PriorConfig()
    a = run_chain(PowerPosterior(1.0), "m1", ds, prior, ChainConfig(5000, 1000), np.random.default_rng(10))
    b = run_chain(PowerPosterior(1.0), "m1", ds, prior, ChainConfig(9000, 1000), np.random.default_rng(10))
    for name in ("beta0", "sigma2", "phi"):
        x, y = a.columns()[name], b.columns()[name]
        assert abs(x.mean() - y.mean()) <= 2 * math.hypot(mcse(x), mcse(y)), name


def test_positivity_and_training_target():
    ds = small_data(20, 5)
    split = SplitVector.from_valid(20, [1, 7, 12])
    for model in ("m1", "m2", "m3"):
        s = run_chain(TrainingPosterior.from_split(split), model, ds, PriorConfig(tau2_fixed=None),
                      ChainConfig(900, 300), np.random.default_rng(11))
        assert np.all(s.sigma2 > 0) and np.all(s.phi > 0) and np.all(s.tau2 >= 0)
        if model == "m2":
            assert np.all(s.nu > 0)
        if model == "m3":
            assert np.all(s.upsilon > 0) and s.log_delta.shape == (600, 20)
        last = s[len(s) - 1]
        assert s.log_lik[-1] == pytest.approx(log_likelihood(model, last, ds, split.train_idx), abs=1e-8)
        assert s.target["kind"] == "training"


def test_determinism():
    ds = small_data(15, 6)
    cfg = ChainConfig(600, 200)
    for model in ("m1", "m2", "m3"):
        a = run_chain(PowerPosterior(0.8), model, ds, PriorConfig(), cfg, np.random.default_rng(12))
        b = run_chain(PowerPosterior(0.8), model, ds, PriorConfig(), cfg, np.random.default_rng(12))
        assert a.to_csv() == b.to_csv()


def test_sweep_kernels_agree(monkeypatch):
    pytest.importorskip("numba")
    ds = small_data(15, 7)
    cfg = ChainConfig(400, 100)
    runs = []
    for kernel in (mcmc._sweep_numpy, None):
        monkeypatch.setattr(mcmc, "_KERNEL", kernel)
        monkeypatch.delenv("GEOXVAL_NO_NUMBA", raising=False)
        runs.append(run_chain(PowerPosterior(0.9), "m3", ds, PriorConfig(), cfg, np.random.default_rng(13)))
    assert mcmc.sweep_kernel() is not mcmc._sweep_numpy
    assert np.allclose(runs[0].log_delta, runs[1].log_delta, rtol=0, atol=1e-9)
    assert np.array_equal(runs[0].state_id, runs[1].state_id)


def test_all_fixed_chain_is_constant():
    ds = small_data(10, 8)
    prior = PriorConfig(fixed={"beta": [1.0], "sigma2": 1.0, "phi": 0.3})
    s = run_chain(PowerPosterior(1.0), "m1", ds, prior, ChainConfig(60, 10), np.random.default_rng(0))
    assert np.all(s.sigma2 == 1.0) and np.all(s.beta == 1.0) and np.all(s.state_id == 0)


def test_adaptation_error():
    ds = small_data(10, 9)
    cfg = ChainConfig(200, 30, step_sizes={"sigma2": 1e4}, adapt=False)
    with pytest.raises(AdaptationError):
        run_chain(PowerPosterior(1.0), "m1", ds, PriorConfig(), cfg, np.random.default_rng(1))


def test_empty_training_set():
    ds = small_data(10, 9)
    with pytest.raises(SplitError):
        run_chain(TrainingPosterior(np.array([], dtype=int)), "m1", ds, PriorConfig(), ChainConfig(20, 5),
                  np.random.default_rng(0))


def test_chain_csv_columns():
    ds = small_data(8, 10)
    s = run_chain(PowerPosterior(1.0), "m3", ds, PriorConfig(), ChainConfig(40, 10), np.random.default_rng(0))
    header = s.to_csv().splitlines()[0].split(",")
    assert header[:6] == ["draw", "beta0", "sigma2", "tau2", "phi", "upsilon"]
    assert header[-1] == "log_delta8"
    assert len(s.to_csv(include_delta=False).splitlines()) == 31
