"""Tests for link functions, Gumbel cells, likelihoods and deviation functionals."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit
from scipy.stats import norm

from conftest import CASE_REF, CASE_TEST, nu_interval, oracle_cells
from doseequiv.errors import FeasibilityError
from doseequiv.model import (
    CountTable,
    DoseDesign,
    GumbelParams,
    Link,
    LinkParams,
    cell_factors,
    cells_raw,
    check_feasibility,
    dose_grid,
    grad_loglik_gumbel,
    grad_loglik_univ,
    gumbel_cells,
    gumbel_correlation,
    gumbel_marginals,
    link_prob,
    loglik_gumbel,
    loglik_univ,
    max_abs_deviation,
    smooth_max,
    standard_design,
)

coef = st.floats(-3.0, 3.0, allow_nan=False)
dose = st.floats(-3.0, 3.0, allow_nan=False)


@st.composite
def feasible_theta_dose(draw):
    x4 = np.array([draw(coef) for _ in range(4)])
    d = draw(dose)
    lo, hi = nu_interval(x4, [d])
    t = draw(st.floats(0.0, 1.0))
    nu = max(lo, -4.0) + t * (min(hi, 4.0) - max(lo, -4.0))
    return GumbelParams.from_array(np.append(x4, nu)), d


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

class TestDomainTypes:
    def test_design_rejects_unsorted_doses(self):
        with pytest.raises(ValueError, match="increasing"):
            DoseDesign((1.0, 0.0), (5, 5))

    def test_design_rejects_zero_size(self):
        with pytest.raises(ValueError, match="sizes"):
            DoseDesign((0.0, 1.0), (5, 0))

    def test_design_rejects_dose_outside_range(self):
        with pytest.raises(ValueError, match="range"):
            DoseDesign((0.0, 2.0), (5, 5), (0.0, 1.0))

    def test_standard_design(self):
        d = standard_design(21)
        assert d.doses == (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
        assert d.sizes == (21,) * 7
        assert d.range == (-3.0, 3.0)

    def test_link_params_reject_nonfinite(self):
        with pytest.raises(ValueError):
            LinkParams(np.inf, 1.0)

    def test_count_table_checks_univariate_bounds(self):
        with pytest.raises(ValueError):
            CountTable(DoseDesign((0.0, 1.0), (5, 5)), np.array([6, 1]))

    def test_count_table_checks_cell_sums(self):
        with pytest.raises(ValueError):
            CountTable(DoseDesign((0.0, 1.0), (5, 5)), np.array([[1, 1, 1, 1], [2, 1, 1, 1]]))

    def test_count_table_margin(self):
        t = CountTable(DoseDesign((0.0, 1.0), (6, 6)), np.array([[1, 2, 0, 3], [0, 0, 4, 2]]))
        np.testing.assert_array_equal(t.margin("efficacy").counts, [3, 6])
        np.testing.assert_array_equal(t.margin("toxicity").counts, [5, 2])

    def test_grid_endpoints(self):
        g = dose_grid((0.0, 1.0), 201)
        assert g.size == 201 and g[0] == 0.0 and g[-1] == 1.0
        assert g[1] == pytest.approx(0.005)


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------

class TestLinkProb:
    def test_logistic_at_zero(self):
        assert link_prob(LinkParams(0.0, 1.0), 0.0) == 0.5

    def test_probit_at_zero(self):
        assert link_prob(LinkParams(0.0, 1.0, Link.PROBIT), 0.0) == 0.5

    def test_logistic_value(self):
        assert link_prob(LinkParams(0.0, 1.0), 1.11) == pytest.approx(0.7521, abs=5e-5)

    def test_probit_matches_normal_cdf(self):
        d = np.linspace(-3, 3, 13)
        np.testing.assert_allclose(link_prob(LinkParams(0.3, -0.7, "probit"), d), norm.cdf(0.3 - 0.7 * d))

    @given(b=coef, g=st.floats(0.05, 3.0), d1=dose, d2=dose)
    def test_monotone_in_dose(self, b, g, d1, d2):
        if abs(d1 - d2) < 1e-3:
            return
        lo, hi = sorted((d1, d2))
        for link in Link:
            up = LinkParams(b, g, link)
            down = LinkParams(b, -g, link)
            assert link_prob(up, lo) < link_prob(up, hi)
            assert link_prob(down, lo) > link_prob(down, hi)


# ---------------------------------------------------------------------------
# Gumbel model
# ---------------------------------------------------------------------------

class TestGumbelCells:
    def test_independent_fair_margins(self):
        assert gumbel_cells(GumbelParams(0, 1, 0, 0.5, 0), 0.0) == pytest.approx((0.25,) * 4)

    def test_positive_association(self):
        cells = gumbel_cells(GumbelParams(0, 1, 0, 0.5, 1), 0.0)
        assert cells == pytest.approx((0.3125, 0.1875, 0.1875, 0.3125), abs=1e-15)

    @pytest.mark.parametrize("nu", [-1.0, 0.0, 0.5, 2.0, 3.0])
    def test_cells_sum_to_one(self, nu):
        d = np.linspace(-3, 3, 61)
        th = GumbelParams(0, 1, 0, 0.5, nu)
        if check_feasibility(th, d):
            assert np.allclose(np.sum(gumbel_cells(th, d), axis=0), 1.0, atol=1e-12)

    def test_infeasible_raises(self):
        with pytest.raises(FeasibilityError):
            gumbel_cells(GumbelParams(3, 1, 3, 1, -4), 0.0)

    def test_matches_oracle(self):
        th = GumbelParams(0.4, 1.6, 0.4, 0.8, 3.0)
        d = np.linspace(-3, 3, 7)
        np.testing.assert_allclose(np.stack(gumbel_cells(th, d), -1), oracle_cells(th.as_array(), d), atol=1e-15)

    def test_cell_factors_reproduce_cells(self):
        x = np.array([0.3, -1.2, 0.8, 0.4, 2.1])
        d = np.linspace(-3, 3, 9)
        f, _ = cell_factors(x, d)
        a = expit(x[0] + x[1] * d)[:, None]
        b = expit(x[2] + x[3] * d)[:, None]
        scale = np.hstack([(1 - a) * (1 - b), (1 - a) * b, a * (1 - b), a * b])
        np.testing.assert_allclose(f * scale, cells_raw(x, d), atol=1e-15)

    def test_cell_factor_jacobian(self):
        x = np.array([0.3, -1.2, 0.8, 0.4, 2.1])
        d = np.linspace(-3, 3, 5)
        _, J = cell_factors(x, d)
        h = 1e-6
        for j in range(5):
            e = np.zeros(5)
            e[j] = h
            fd = (cell_factors(x + e, d)[0] - cell_factors(x - e, d)[0]) / (2 * h)
            np.testing.assert_allclose(J[..., j], fd, atol=1e-8)


class TestMarginalsAndCorrelation:
    def test_marginals_ignore_nu(self):
        assert gumbel_marginals(GumbelParams(0, 1, 0, 0.5, 3), 0.0) == (0.5, 0.5)

    def test_case_study_toxicity_margin(self):
        _, pt = gumbel_marginals(CASE_REF, 1.0)
        assert pt == pytest.approx(0.334, abs=5e-4)

    @pytest.mark.parametrize("nu,expected", [(1.0, 0.25), (3.0, 0.75)])
    def test_correlation_peak(self, nu, expected):
        assert gumbel_correlation(GumbelParams(0, 1, 0, 0.5, nu), 0.0) == pytest.approx(expected)

    def test_correlation_range_over_design(self):
        r = gumbel_correlation(GumbelParams(0, 1, 0, 0.5, 1), np.arange(-3.0, 4.0))
        assert r.max() == pytest.approx(0.25)
        assert r.min() == pytest.approx(0.08, abs=0.005)

    def test_zero_nu_zero_correlation(self):
        assert np.all(gumbel_correlation(GumbelParams(1, 2, -1, 0.3, 0), np.linspace(-3, 3, 9)) == 0)


class TestGumbelProperties:
    @given(feasible_theta_dose())
    @settings(max_examples=300)
    def test_cell_sum(self, td):
        th, d = td
        assert sum(gumbel_cells(th, d)) == pytest.approx(1.0, abs=1e-12)

    @given(feasible_theta_dose())
    @settings(max_examples=300)
    def test_marginal_consistency(self, td):
        th, d = td
        p00, p01, p10, p11 = gumbel_cells(th, d)
        pe, pt = gumbel_marginals(th, d)
        assert abs(p11 + p10 - pe) <= 1e-12
        assert abs(p11 + p01 - pt) <= 1e-12

    @given(feasible_theta_dose())
    @settings(max_examples=300)
    def test_correlation_identity(self, td):
        th, d = td
        p11 = gumbel_cells(th, d)[3]
        pe, pt = gumbel_marginals(th, d)
        r = (p11 - pe * pt) / np.sqrt(pe * (1 - pe) * pt * (1 - pt))
        assert abs(r - gumbel_correlation(th, d)) <= 1e-10

    @given(st.lists(coef, min_size=4, max_size=4), dose)
    def test_independence_when_nu_zero(self, x4, d):
        th = GumbelParams(*x4, 0.0)
        pe, pt = gumbel_marginals(th, d)
        assert gumbel_cells(th, d)[3] == pytest.approx(pe * pt, abs=1e-15)


# ---------------------------------------------------------------------------
# Log-likelihoods
# ---------------------------------------------------------------------------

class TestLoglikUniv:
    def test_single_dose(self):
        t = CountTable(DoseDesign((0.0,), (2,)), np.array([1]))
        assert loglik_univ(LinkParams(0, 1), t) == pytest.approx(-1.3863, abs=5e-5)

    def test_saturated_bound(self, saturated_table):
        b = np.log(4.0) / 2  # logit(0.8) = 2b and logit(0.5) = 0 at the midpoint
        sat = 5 * np.log(0.5) * 2 + 8 * np.log(0.8) + 2 * np.log(0.2)
        assert loglik_univ(LinkParams(b, b), saturated_table) == pytest.approx(sat, abs=1e-12)
        assert loglik_univ(LinkParams(0.693, 0.693), saturated_table) == pytest.approx(sat, abs=1e-5)

    def test_saturated_is_maximum(self, saturated_table, rng):
        sat = loglik_univ(LinkParams(np.log(2), np.log(2)), saturated_table)
        for x in rng.normal(0, 1, size=(50, 2)):
            assert loglik_univ(LinkParams(*x), saturated_table) <= sat

    def test_floor_flag(self):
        t = CountTable(DoseDesign((0.0, 1.0), (3, 3)), np.array([0, 3]))
        v, flag = loglik_univ(LinkParams(1000.0, 0.0), t, with_flag=True)
        assert np.isfinite(v) and flag

    def test_rejects_bivariate(self):
        t = CountTable(DoseDesign((0.0, 1.0), (1, 1)), np.array([[1, 0, 0, 0]] * 2))
        with pytest.raises(ValueError):
            loglik_univ(LinkParams(0, 1), t)


class TestLoglikGumbel:
    def test_single_subject(self):
        t = CountTable(DoseDesign((0.0,), (1,)), np.array([[0, 0, 0, 1]]))
        assert loglik_gumbel(GumbelParams(0, 1, 0, 0.5, 1), t) == pytest.approx(-1.1632, abs=5e-5)

    def test_independence_factorizes(self, rng):
        design = standard_design(15)
        z = rng.multinomial(15, [0.1, 0.2, 0.3, 0.4], size=7)
        t = CountTable(design, z)
        th = GumbelParams(0.2, 0.9, -0.4, 0.6, 0.0)
        split = loglik_univ(th.efficacy, t.margin("efficacy")) + loglik_univ(th.toxicity, t.margin("toxicity"))
        assert loglik_gumbel(th, t) == pytest.approx(split, abs=1e-10)

    def test_perfect_fit_limit(self):
        t = CountTable(DoseDesign((0.0, 1.0), (5, 5)), np.array([[5, 0, 0, 0]] * 2))
        values = [loglik_gumbel(GumbelParams(-s, 0, -s, 0, 0), t) for s in (2, 5, 10, 20)]
        assert all(v < 0 for v in values)
        assert np.all(np.diff(values) > 0)
        assert values[-1] > -1e-6

    def test_infeasible_raises(self):
        t = CountTable(DoseDesign((0.0, 1.0), (1, 1)), np.array([[1, 0, 0, 0]] * 2))
        with pytest.raises(FeasibilityError):
            loglik_gumbel(GumbelParams(3, 0, 3, 0, -4), t)


def _central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestGradients:
    @pytest.mark.parametrize("link", list(Link))
    def test_univ_gradient(self, link, rng):
        design = standard_design(30)
        for _ in range(20):
            x = rng.uniform(-1.5, 1.5, 2)
            t = CountTable(design, rng.binomial(30, link_prob(LinkParams(*x, link), design.dose_array)))
            g = grad_loglik_univ(LinkParams(*x, link), t)
            fd = _central_diff(lambda v: loglik_univ(LinkParams(*v, link), t), x)
            assert np.max(np.abs(g - fd)) <= 1e-5 * max(np.max(np.abs(g)), 1.0)

    def test_gumbel_gradient(self, rng):
        from conftest import random_feasible_theta

        design = standard_design(30)
        for _ in range(20):
            th = random_feasible_theta(rng, design.dose_array, shrink=0.8, coef=1.5)
            cells = oracle_cells(th.as_array(), design.dose_array)
            t = CountTable(design, np.stack([rng.multinomial(30, c / c.sum()) for c in cells]))
            g = grad_loglik_gumbel(th, t)
            fd = _central_diff(lambda v: loglik_gumbel(GumbelParams.from_array(v), t), th.as_array())
            assert np.max(np.abs(g - fd)) <= 1e-5 * max(np.max(np.abs(g)), 1.0)


# ---------------------------------------------------------------------------
# Deviation functionals
# ---------------------------------------------------------------------------

class TestMaxAbsDeviation:
    def test_identical_curves(self):
        p = LinkParams(0.3, 1.2)
        assert max_abs_deviation(p, p, dose_grid((-3, 3))).value == 0.0

    def test_case_study_efficacy(self):
        r = max_abs_deviation(CASE_REF.efficacy, CASE_TEST.efficacy, dose_grid((0, 1), 201))
        assert r.value == pytest.approx(0.106, abs=1e-3)
        assert r.argmax_dose == pytest.approx(0.08, abs=0.01)

    def test_case_study_toxicity(self):
        r = max_abs_deviation(CASE_REF.toxicity, CASE_TEST.toxicity, dose_grid((0, 1), 201))
        assert r.value == pytest.approx(0.039, abs=1e-3)
        assert r.argmax_dose == 1.0

    def test_scenario_deviation(self):
        # the exact maximizer of |expit(d) - expit(0.2 + 1.4 d)| on [-3, 3] is near 0.99
        r = max_abs_deviation(LinkParams(0, 1), LinkParams(0.2, 1.4), dose_grid((-3, 3), 6001))
        assert r.value == pytest.approx(0.1, abs=0.002)
        assert r.argmax_dose == pytest.approx(0.99, abs=0.01)

    def test_ties_go_to_smallest_dose(self):
        r = max_abs_deviation(lambda d: np.zeros_like(d), lambda d: np.ones_like(d), [2.0, 0.0, 1.0])
        assert r.argmax_dose == 0.0

    def test_argmax_is_grid_node(self, rng):
        g = dose_grid((-3, 3), 37)
        r = max_abs_deviation(LinkParams(0, 1), LinkParams(0.6, 1.9), g)
        assert r.argmax_dose in g


class TestSmoothMax:
    def test_equal_inputs(self):
        assert smooth_max([0.3] * 7, 0.01) == pytest.approx(0.3 + 0.01 * np.log(7), abs=1e-15)

    def test_dominated_term(self):
        assert smooth_max([0.0, 1.0], 0.01) == pytest.approx(1.0, abs=1e-12)

    def test_no_overflow(self):
        assert smooth_max([1e4, 1e4 - 1], 1e-3) == pytest.approx(1e4)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_rejects_nonpositive_lambda(self, bad):
        with pytest.raises(ValueError):
            smooth_max([1.0], bad)

    @given(
        st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=50),
        st.floats(1e-4, 10.0),
    )
    def test_sandwich(self, values, lam):
        s = smooth_max(values, lam)
        m = max(values)
        tol = 1e-12 * max(abs(m), 1.0)
        assert m - tol <= s <= m + lam * np.log(len(values)) + tol
