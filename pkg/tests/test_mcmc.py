import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from oracles import psrf_reference
from testletirt.datagen import GenConfig, simulate
from testletirt.errors import DegenerateData, ZeroVariance
from testletirt.mcmc import (
    ChainSpec,
    PriorSpec,
    State,
    _truncnorm_latent,
    fit_mcmc,
    posterior_predictive_p,
    psrf,
    psrf_all,
    sample_fixed_items,
)
from testletirt.mmle import fit_mmle
from testletirt.model import ItemIrtParams, TestletDesign


class TestPsrf:
    def test_iid_chains(self):
        rng = np.random.default_rng(0)
        assert 0.999 <= psrf(rng.standard_normal((2, 10_000))) <= 1.01

    def test_zero_within_variance(self):
        with pytest.raises(ZeroVariance):
            psrf([[1.0] * 20, [2.0] * 20])

    def test_hand_example(self):
        assert psrf([[1, 2, 3, 4], [1, 2, 3, 4]]) == pytest.approx(np.sqrt(0.75), abs=1e-15)

    def test_separated_chains_large(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 500)) + np.array([0, 0, 0, 3])[:, None]
        assert psrf(x) > 1.5

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            psrf([[1.0, 2.0, 3.0]])

    @settings(max_examples=60)
    @given(st.lists(st.lists(st.floats(-100, 100), min_size=10, max_size=10), min_size=2, max_size=5))
    def test_matches_reference_and_lower_bound(self, chains):
        x = np.array(chains)
        ref2, w = psrf_reference(chains)
        if w < 1e-8:
            return
        r = psrf(x)
        assert r == pytest.approx(np.sqrt(ref2), rel=1e-9)
        assert r >= np.sqrt(9 / 10) - 1e-12

    def test_vectorized(self):
        rng = np.random.default_rng(2)
        draws = rng.standard_normal((3, 200, 4))
        np.testing.assert_allclose(psrf_all(draws), [psrf(draws[:, :, k]) for k in range(4)], rtol=1e-12)


def test_truncated_latent_sides():
    rng = np.random.default_rng(3)
    mu = rng.normal(0, 3, 100_000)
    y = (rng.random(100_000) < 0.5).astype(float)
    z = _truncnorm_latent(mu, y, rng)
    assert np.all(z[y == 1] > 0) and np.all(z[y == 0] <= 0)
    # mean of N(0, 1) truncated to (0, inf) is sqrt(2 / pi)
    z0 = _truncnorm_latent(np.zeros(200_000), np.ones(200_000), rng)
    assert z0.mean() == pytest.approx(np.sqrt(2 / np.pi), abs=0.005)


def _grid_moments(y, alpha, kappa, sigma2, n=401, lim=7.0):
    g = np.linspace(-lim, lim, n)
    th, u = np.meshgrid(g, g, indexing="ij")
    s = np.sqrt(sigma2) * u
    dens = np.exp(-0.5 * (th**2 + u**2))
    for j, yj in enumerate(y):
        p = ndtr(alpha[j] * (th + s) - kappa[j])
        dens = dens * (p if yj else 1 - p)
    dens /= dens.sum()
    return {"theta": (dens * th).sum(), "theta2": (dens * th**2).sum(), "s": (dens * s).sum()}


def _batch_se(x, n_batches=40):
    b = np.array_split(x, n_batches)
    return np.std([bb.mean() for bb in b], ddof=1) / np.sqrt(n_batches)


def test_toy_posterior_matches_grid():
    design = TestletDesign.uniform(1, 2)
    alpha, kappa, sigma2 = np.array([1.2, 0.8]), np.array([0.3, -0.5]), np.array([0.7])
    y = np.array([[1, 0], [1, 1]])
    th, s = sample_fixed_items(y, design, alpha, kappa, sigma2, n_iter=60_000, seed=4, burn_in=0.05)
    for i in range(2):
        ref = _grid_moments(y[i], alpha, kappa, sigma2[0])
        draws = {"theta": th[i], "theta2": th[i] ** 2, "s": s[i, 0]}
        for key, x in draws.items():
            assert abs(x.mean() - ref[key]) < 3 * _batch_se(x), (i, key)


def test_ppp_ties_count_as_greater():
    design = TestletDesign.uniform(1, 2)
    st_ = State(np.ones(2), np.zeros(2), np.array([0.5]), np.zeros(5), np.zeros((5, 1)))
    y = np.array([[0, 1], [1, 1], [0, 0], [1, 0], [1, 1]])
    assert posterior_predictive_p([st_] * 20, y, design, discrepancy=lambda d, p: 1.0) == 1.0


@pytest.fixture(scope="module")
def small_fit():
    design = TestletDesign.uniform(2, 4)
    items = ItemIrtParams(np.array([1.0, 1.2, 0.8, 1.4, 0.9, 1.1, 1.3, 0.7]), np.linspace(-1, 1, 8))
    cfg = GenConfig(400, design, 0.6, items, seed=5)
    y = simulate(cfg)[2]
    fit, summ = fit_mcmc(y, design, chains=ChainSpec(min_iterations=800, seed=1))
    return y, design, fit, summ


def test_small_fit_properties(small_fit):
    y, design, fit, summ = small_fit
    assert fit.converged == (summ.psrf_max < 1.1)
    if fit.converged:
        assert np.all(summ.psrf < 1.1)
    assert np.all(summ.draws[:, :, -design.n_testlets:] >= 0)
    assert np.all(fit.extras["lambda_raw"] > 0)
    assert 0.0 <= summ.ppp <= 1.0
    assert summ.n_retained == summ.draws.shape[0] * summ.draws.shape[1]
    d = fit.to_dict()
    assert {"psrf_max", "ppp", "n_retained"} <= set(d)


def test_calibrated_ppp(small_fit):
    assert 0.2 <= small_fit[3].ppp <= 0.8


def test_bit_reproducible(small_fit):
    y, design, fit, summ = small_fit
    fit2, summ2 = fit_mcmc(y, design, chains=ChainSpec(min_iterations=800, seed=1))
    np.testing.assert_array_equal(summ.draws, summ2.draws)
    assert summ.ppp == summ2.ppp


def test_misfit_ppp_small():
    design = TestletDesign.uniform(2, 4)
    items = ItemIrtParams(np.full(8, 1.2), np.linspace(-0.8, 0.8, 8))
    y = simulate(GenConfig(2000, design, 1.0, items, seed=6))[2]
    fit, summ = fit_mcmc(y, TestletDesign.unidimensional(8), chains=ChainSpec(min_iterations=400, seed=2))
    assert summ.ppp < 0.05


def test_empty_data_rejected():
    with pytest.raises(DegenerateData):
        fit_mcmc(np.zeros((0, 4), dtype=int), TestletDesign.uniform(2, 2))


def test_zero_variance_posterior_mean_small():
    design = TestletDesign.uniform(6, 5)
    rng = np.random.default_rng(8)
    items = ItemIrtParams(rng.normal(1, 0.2, 30), rng.normal(0, 1, 30))
    y = simulate(GenConfig(2000, design, 0.0, items, seed=8))[2]
    fit, _ = fit_mcmc(y, design, chains=ChainSpec(min_iterations=1000, seed=3))
    mle = fit_mmle(y, design).sigma2
    # boundary parameter under a flat prior: strictly positive, close to the MLE
    assert np.all(fit.sigma2 > 0)
    assert np.all(fit.sigma2 >= mle - 0.02)
    assert np.all(np.abs(fit.sigma2 - mle) < 0.08)
    assert fit.sigma2.mean() < 0.1


def test_prior_spec_defaults():
    p = PriorSpec()
    assert (p.loading_var, p.threshold_var, p.sigma2_shape, p.sigma2_scale) == (5, 5, -1, 0)
    assert ChainSpec.paper_scale().min_iterations == 20_000
    with pytest.raises(ValueError):
        ChainSpec(n_chains=1)
    with pytest.raises(ValueError):
        ChainSpec(burn_in=1.0)
