import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from testletirt.datagen import table1_fixture
from testletirt.errors import DegenerateLoading, HeywoodError, InvalidDesign
from testletirt.model import (
    D_SCALE,
    FactorParams,
    TestletDesign,
    factor_to_irt,
    implied_tetrachorics,
    irt_to_factor,
    prob_correct,
    rescale_unstandardized,
    standardize_to_theta_metric,
)

loadings = st.floats(0.05, 0.95)
variances = st.floats(0.0, 2.0)


class TestDesign:
    def test_uniform(self):
        d = TestletDesign.uniform(6, 5)
        assert d.n_items == 30 and d.n_testlets == 6
        assert d.items_in(2).tolist() == [10, 11, 12, 13, 14]

    def test_singleton_testlet_rejected(self):
        with pytest.raises(InvalidDesign):
            TestletDesign.from_testlets(4, [[0], [1, 2, 3]])

    def test_non_contiguous_indices_rejected(self):
        with pytest.raises(InvalidDesign):
            TestletDesign((0, 0, 2, 2))

    def test_item_in_two_testlets_rejected(self):
        with pytest.raises(InvalidDesign):
            TestletDesign.from_testlets(4, [[0, 1], [1, 2, 3]])

    def test_dict_round_trip(self):
        d = TestletDesign.from_testlets(7, [[0, 3], [1, 2, 4]])
        assert TestletDesign.from_dict(d.to_dict()) == d
        assert d.independent_items.tolist() == [5, 6]


class TestProbCorrect:
    def test_center(self):
        assert prob_correct(1.0, 0.0, 0.0) == 0.5

    def test_table1_item1(self):
        assert prob_correct(1.17, -1.55, 0.0) == pytest.approx(0.8598, abs=5e-5)

    def test_testlet_effect_is_subtracted(self):
        assert prob_correct(1.0, 0.0, 0.0, 2.0) == pytest.approx(0.1192, abs=5e-5)

    def test_matches_logistic(self):
        a, b, th, g = 1.3, -0.4, 0.7, 0.25
        assert prob_correct(a, b, th, g) == pytest.approx(expit(a * (th - b - g)), rel=1e-15)

    @given(st.floats(0.1, 3), st.floats(-3, 3), st.floats(-4, 4), st.floats(0.01, 1))
    def test_monotone(self, a, b, th, h):
        p = prob_correct(a, b, th)
        assert prob_correct(a, b, th + h) > p
        assert prob_correct(a, b, th, h) < p
        assert prob_correct(a, b + h, th) < p

    @given(st.floats(0.1, 3), st.floats(-3, 3))
    def test_half_at_difficulty(self, a, b):
        assert prob_correct(a, b, b) == 0.5


class TestConversions:
    def _one(self, lam, tau, s2):
        design = TestletDesign.from_testlets(2, [[0, 1]])
        ip = factor_to_irt(FactorParams(np.array([lam, 0.5]), np.array([tau, 0.0]), np.array([s2])), design)
        return ip.a[0], ip.b[0]

    def test_table6_item1(self):
        a, b = self._one(0.73, -0.53, 0.089)
        assert a == pytest.approx(1.92, abs=0.02) and b == pytest.approx(-0.73, abs=0.02)

    def test_table6_item10(self):
        a, b = self._one(0.21, 0.28, 0.166)
        assert a == pytest.approx(0.37, abs=0.02) and b == pytest.approx(1.33, abs=0.02)

    def test_zero_threshold(self):
        assert self._one(0.4, 0.0, 0.7)[1] == 0.0

    def test_heywood(self):
        with pytest.raises(HeywoodError) as info:
            self._one(0.8, 0.0, 0.7)
        assert info.value.items == (0,)

    def test_degenerate_loading(self):
        with pytest.raises(DegenerateLoading):
            self._one(1e-10, 0.3, 0.2)

    def test_inverse_table6_item1(self):
        lam, tau = irt_to_factor(1.92, -0.73, 0.089)
        assert lam == pytest.approx(0.73, abs=0.005) and tau == pytest.approx(-0.53, abs=0.005)

    def test_vanishing_discrimination(self):
        lam, tau = irt_to_factor(1e-12, 2.0, 0.5)
        assert abs(lam) < 1e-12 and abs(tau) < 1e-11

    def test_round_trip_table1(self):
        items = table1_fixture()
        design = TestletDesign.uniform(6, 5)
        lam, tau = irt_to_factor(items.a, items.b, np.ones(30))
        back = factor_to_irt(FactorParams(lam, tau, np.ones(6)), design)
        np.testing.assert_allclose(back.a, items.a, atol=1e-10)
        np.testing.assert_allclose(back.b, items.b, atol=1e-10)

    @given(st.floats(0.05, 4), st.floats(-3, 3), variances)
    def test_round_trip_property(self, a, b, s2):
        design = TestletDesign.from_testlets(2, [[0, 1]])
        lam, tau = irt_to_factor(np.array([a, a]), np.array([b, b]), np.array([s2, s2]))
        ip = factor_to_irt(FactorParams(lam, tau, np.array([s2])), design)
        assert ip.a[0] == pytest.approx(a, abs=1e-10)
        assert ip.b[0] == pytest.approx(b, abs=1e-10)

    def test_rescale_table6_item1(self):
        lam, tau = rescale_unstandardized(1.14, -0.83, 0.095)
        assert lam == pytest.approx(0.73, abs=0.02) and tau == pytest.approx(-0.53, abs=0.02)

    def test_rescale_zero_loading(self):
        lam, tau = rescale_unstandardized(0.0, -0.4, 0.3)
        assert lam == 0.0 and tau == -0.4

    def test_rescale_table6_item2(self):
        lam, tau = rescale_unstandardized(1.29, -2.21, 0.095)
        assert lam == pytest.approx(0.76, abs=0.02) and abs(tau) == pytest.approx(1.31, abs=0.02)

    @given(st.floats(-3, 3), st.floats(-3, 3), variances)
    def test_rescale_inverse(self, lam_raw, tau_raw, s2):
        lam, tau = rescale_unstandardized(lam_raw, tau_raw, s2)
        back = standardize_to_theta_metric(lam, tau, s2)
        np.testing.assert_allclose(back, (lam_raw, tau_raw), atol=1e-9)

    @given(st.floats(0.05, 3), variances)
    def test_theta_metric_slope_is_probit_slope(self, lam_raw, s2):
        # a = 1.702 * lambda_raw: the unit-residual slope is the probit discrimination
        design = TestletDesign.from_testlets(2, [[0, 1]])
        lam, tau = rescale_unstandardized(np.full(2, lam_raw), np.full(2, 0.3), np.full(2, s2))
        ip = factor_to_irt(FactorParams(lam, tau, np.array([s2])), design)
        assert ip.a[0] == pytest.approx(D_SCALE * lam_raw, rel=1e-9)


class TestImpliedTetrachorics:
    def test_across_testlets(self):
        design = TestletDesign.from_testlets(4, [[0, 1], [2, 3]])
        rho = implied_tetrachorics(FactorParams(np.full(4, 0.5), np.zeros(4), np.array([1.0, 1.0])), design)
        assert rho[0, 2] == pytest.approx(0.25)
        assert rho[0, 1] == pytest.approx(0.5)

    def test_same_testlet_by_simulation(self, rng):
        design = TestletDesign.from_testlets(2, [[0, 1]])
        n = 400_000
        theta, s = rng.standard_normal(n), rng.standard_normal(n)
        # lambda = 0.5, sigma2 = 1: residual variance 1 - 0.25 * 2 = 0.5
        z = 0.5 * (theta + s)[:, None] + np.sqrt(0.5) * rng.standard_normal((n, 2))
        rho = implied_tetrachorics(FactorParams(np.full(2, 0.5), np.zeros(2), np.array([1.0])), design)
        assert np.corrcoef(z.T)[0, 1] == pytest.approx(rho[0, 1], abs=0.005)

    def test_rank_one_without_testlet_variance(self):
        design = TestletDesign.uniform(3, 3)
        lam = np.linspace(0.2, 0.8, 9)
        rho = implied_tetrachorics(FactorParams(lam, np.zeros(9), np.zeros(3)), design)
        off = ~np.eye(9, dtype=bool)
        np.testing.assert_allclose(rho[off], np.outer(lam, lam)[off], atol=1e-15)

    @settings(max_examples=50)
    @given(st.lists(loadings, min_size=6, max_size=6), st.lists(st.floats(0, 0.9), min_size=2, max_size=2))
    def test_psd_and_symmetric(self, lam, s2):
        design = TestletDesign.from_testlets(6, [[0, 1, 2], [3, 4, 5]])
        lam, s2 = np.array(lam), np.array(s2)
        fp = FactorParams(lam, np.zeros(6), s2)
        if np.any(fp.communality(design) >= 1):
            return
        rho = implied_tetrachorics(fp, design)
        np.testing.assert_array_equal(rho, rho.T)
        assert np.linalg.eigvalsh(rho).min() > -1e-12


def test_table6_fixture(table6):
    design = table6["design"]
    w = table6["wlsmv"]
    fp = FactorParams(np.array(w["lambda"]), np.array(w["tau"]), np.array(table6["sigma2"]["wlsmv"]))
    ip = factor_to_irt(fp, design)
    np.testing.assert_allclose(ip.a, w["a"], atol=0.02)
    np.testing.assert_allclose(ip.b, w["b"], atol=0.02)
