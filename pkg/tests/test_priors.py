import mpmath
import numpy as np
import pytest
from scipy import stats

from slideflow.errors import ContractError
from slideflow.priors import (
    Gaussian,
    ZinbParams,
    Zero,
    reference_grid,
    nb_logpmf,
    sample_prior,
    zinb_pmf,
    zinb_sample,
)


def _mp_zinb(y, mu, phi, pi):
    mpmath.mp.dps = 40
    mu, phi, pi = mpmath.mpf(mu), mpmath.mpf(phi), mpmath.mpf(pi)
    nb = (
        mpmath.gamma(y + phi) / (mpmath.gamma(phi) * mpmath.factorial(y))
        * (phi / (phi + mu)) ** phi
        * (mu / (phi + mu)) ** y
    )
    return float((pi if y == 0 else 0) + (1 - pi) * nb)


def test_pmf_pure_inflation():
    assert zinb_pmf(0, ZinbParams(0.3, 1.5, 1.0)) == 1.0


@pytest.mark.parametrize("y", [0, 1, 2, 7])
def test_pmf_matches_high_precision(y):
    p = ZinbParams(0.2, 1.0, 0.5)
    assert abs(zinb_pmf(y, p) - _mp_zinb(y, 0.2, 1.0, 0.5)) < 1e-15


def test_pmf_spec_values():
    p = ZinbParams(0.2, 1.0, 0.5)
    assert abs(zinb_pmf(0, p) - 0.91666666666666667) < 1e-12
    assert abs(zinb_pmf(1, p) - 0.06944444444444444) < 1e-12


def test_invalid_params():
    with pytest.raises(ContractError):
        ZinbParams(0.0, 1.0, 0.5)
    with pytest.raises(ContractError):
        ZinbParams(0.1, 1.0, 1.5)
    with pytest.raises(ContractError):
        zinb_pmf(-1, ZinbParams())


@pytest.mark.parametrize("p", reference_grid(), ids=str)
def test_pmf_normalised_over_grid(p):
    assert zinb_pmf(np.arange(201), p).sum() > 1 - 1e-9


def test_zero_mass_monotone_in_pi():
    vals = [zinb_pmf(0, ZinbParams(0.4, 2.0, pi)) for pi in np.linspace(0, 1, 21)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_pi_zero_reduces_to_nb():
    y = np.arange(30)
    p = ZinbParams(0.4, 2.0, 0.0)
    np.testing.assert_array_equal(zinb_pmf(y, p), np.exp(nb_logpmf(y, 0.4, 2.0)))
    # scipy parameterisation: n = phi, p = phi / (phi + mu)
    np.testing.assert_allclose(zinb_pmf(y, p), stats.nbinom.pmf(y, 2.0, 2.0 / 2.4), rtol=1e-12)


def test_sampler_pure_inflation_all_zero():
    assert np.all(zinb_sample(1000, ZinbParams(0.4, 1.0, 1.0), np.random.default_rng(0)) == 0)


@pytest.fixture(scope="module")
def big_sample():
    return zinb_sample(10**6, ZinbParams(0.2, 1.0, 0.5), np.random.default_rng(11))


def test_sampler_moments(big_sample):
    assert abs(big_sample.mean() - 0.1) / 0.1 < 0.01
    assert abs(big_sample.var() - 0.13) / 0.13 < 0.02


def test_sampler_zero_frequency(big_sample):
    assert abs(np.mean(big_sample == 0) - zinb_pmf(0, ZinbParams(0.2, 1.0, 0.5))) < 0.002


def test_sampler_chi_squared_against_pmf(big_sample):
    p = ZinbParams(0.2, 1.0, 0.5)
    support = np.arange(21)
    obs = np.bincount(np.minimum(big_sample, 21), minlength=22)
    probs = np.append(zinb_pmf(support, p), 1 - zinb_pmf(support, p).sum())
    exp = probs * big_sample.size
    # pool sparse tail cells so every expected count is >= 5
    keep = exp >= 5
    obs_k = np.append(obs[keep], obs[~keep].sum())
    exp_k = np.append(exp[keep], exp[~keep].sum())
    if exp_k[-1] < 5:
        obs_k[-2] += obs_k[-1]
        exp_k[-2] += exp_k[-1]
        obs_k, exp_k = obs_k[:-1], exp_k[:-1]
    _, pval = stats.chisquare(obs_k, exp_k)
    assert pval > 0.001


def test_sampler_seeded_determinism():
    p = ZinbParams(0.4, 4.0, 0.5)
    a = zinb_sample(500, p, np.random.default_rng(5))
    b = zinb_sample(500, p, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_sample_prior_zero():
    assert np.array_equal(sample_prior(Zero(), 2, 3, np.random.default_rng(0)), np.zeros((2, 3)))


def test_sample_prior_gaussian_moments():
    x = sample_prior(Gaussian(), 1000, 1000, np.random.default_rng(0))
    assert abs(x.mean()) < 0.01 and abs(x.std() - 1) < 0.01


def test_sample_prior_zinb_support():
    x = sample_prior(ZinbParams(0.4, 1.0, 0.5), 50, 20, np.random.default_rng(0))
    assert x.dtype == np.float64 and np.all(x >= 0) and np.all(x == np.floor(x))


@pytest.mark.parametrize("p", reference_grid(), ids=str)
def test_sampler_mean_unbiased_at_scale(p):
    # 10^7 draws: the standard error is ~0.15% of the mean, so |z| < 4.5 catches
    # any bias above roughly half a percent
    draws = zinb_sample(10_000_000, p, np.random.default_rng(31))
    z = (draws.mean() - p.mean) / np.sqrt(p.variance / draws.size)
    assert abs(z) < 4.5
