"""Tests for bootstrap quantiles, p-values and the two equivalence tests."""

from __future__ import annotations

import math

import numpy as np
import pytest

import doseequiv.bootstrap as bootstrap
from doseequiv.bootstrap import (
    TestConfig,
    bootstrap_quantile,
    p_value,
    report_from_dict,
    report_to_dict,
    test_bivariate,
    test_univ,
)
from doseequiv.datagen import RngStream, sample_gumbel, sample_univ
from doseequiv.errors import BootstrapWarning, ConfigError
from doseequiv.estimation import LAMBDA_SCHEDULE
from doseequiv.model import GumbelParams, LinkParams, standard_design

Config = TestConfig


def check_coherence(report):
    for ep in report.endpoints:
        assert report.reject[ep] == (report.statistics[ep] < report.quantiles[ep])
        assert report.p_values[ep] == p_value(report.replicates[ep], report.statistics[ep])
        assert 0.0 <= report.p_values[ep] <= 1.0
        assert list(report.replicates[ep]) == sorted(report.replicates[ep])
    assert report.reject_global == all(report.reject.values())


def check_null_generation(report, grid_size=201):
    slack = LAMBDA_SCHEDULE[-1] * math.log(grid_size) + 1e-3
    for ep in report.endpoints:
        eps = report.config.margin(ep)
        if report.null_branch[ep] == "constrained":
            assert report.null_deviation[ep] >= eps - slack
        else:
            assert report.statistics[ep] >= eps


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def univ_data():
    d = standard_design(30)
    return (
        sample_univ(LinkParams(0, 1), d, RngStream(100, 0)),
        sample_univ(LinkParams(0.1, 1.1), d, RngStream(100, 1)),
    )


@pytest.fixture(scope="module")
def biv_data():
    d = standard_design(21)
    return (
        sample_gumbel(GumbelParams(0, 1, 0, 0.5, 1), d, RngStream(200, 0)),
        sample_gumbel(GumbelParams(0.1, 1.1, 0.1, 0.6, 1), d, RngStream(200, 1)),
    )


@pytest.fixture
def small_chunks(monkeypatch):
    """Split bootstrap work into many chunks so several workers actually share it."""
    monkeypatch.setattr(bootstrap, "BOOT_CHUNK", 10)


# ---------------------------------------------------------------------------
# Quantile and p-value
# ---------------------------------------------------------------------------

class TestBootstrapQuantile:
    def test_order_statistic_index(self):
        r = np.arange(400.0)[::-1]
        assert bootstrap_quantile(r, 0.05) == 19.0  # the 20th smallest

    def test_median_like(self):
        assert bootstrap_quantile(np.arange(1.0, 101.0), 0.5) == 50.0

    def test_sentinel_when_index_zero(self):
        with pytest.warns(BootstrapWarning):
            assert bootstrap_quantile(np.arange(10.0), 0.05) == -math.inf

    def test_empty(self):
        with pytest.raises(ValueError):
            bootstrap_quantile([], 0.05)


class TestPValue:
    def test_below_all(self):
        assert p_value([1.0, 2.0, 3.0], 0.5) == 0.0

    def test_above_all(self):
        assert p_value([1.0, 2.0, 3.0], 3.5) == 1.0

    @pytest.mark.parametrize("k", [1, 3, 7, 10])
    def test_ties_count(self, k):
        r = np.arange(1.0, 11.0)
        assert p_value(r, r[k - 1]) == k / 10


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [{"epsilon": 0.0}, {"epsilon": 1.0}, {"epsilon": (0.1, 0.2, 0.3)}, {"alpha": 1.0},
         {"n_boot": 0}, {"grid_size": 0}, {"workers": 0}, {"dose_range": (1.0, 0.0)}],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            Config(**kwargs)

    def test_warns_when_quantile_undefined(self):
        with pytest.warns(BootstrapWarning):
            Config(n_boot=10, alpha=0.05)

    def test_round_trip(self):
        c = Config(epsilon=(0.1, 0.2), alpha=0.1, n_boot=50, dose_range=(0.0, 1.0), seed=4)
        assert Config.from_dict(c.to_dict()) == c

    def test_univariate_test_needs_single_margin(self, univ_data):
        with pytest.raises(ConfigError):
            test_univ(*univ_data, Config(epsilon=(0.2, 0.2)))


# ---------------------------------------------------------------------------
# Univariate test
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def univ_report(univ_data):
    return test_univ(*univ_data, Config(epsilon=0.2, n_boot=100, seed=1))


class TestUnivariateTest:
    def test_coherent(self, univ_report):
        check_coherence(univ_report)

    def test_null_generation(self, univ_report):
        check_null_generation(univ_report)
        assert univ_report.null_branch["efficacy"] == "constrained"

    def test_replicate_count(self, univ_report):
        assert len(univ_report.replicates["efficacy"]) + univ_report.n_dropped["efficacy"] == 100

    def test_no_toxicity(self, univ_report):
        assert univ_report.endpoints == ("efficacy",)

    def test_outside_margin_uses_fits(self, univ_data):
        r = test_univ(univ_data[0], univ_data[1], Config(epsilon=0.01, n_boot=20, seed=1))
        assert r.null_branch["efficacy"] == "unconstrained"
        assert r.null_fits["efficacy"] == r.fits
        check_null_generation(r)
        assert not r.reject_global

    def test_round_trip(self, univ_report):
        again = report_from_dict(report_to_dict(univ_report))
        assert report_to_dict(again) == report_to_dict(univ_report)
        assert again.fits == univ_report.fits

    def test_worker_invariance(self, univ_data, small_chunks):
        cfgs = [Config(epsilon=0.2, n_boot=60, seed=5, workers=w) for w in (1, 2, 8)]
        docs = [report_to_dict(test_univ(*univ_data, c)) for c in cfgs]
        for d in docs:
            d["config"].pop("workers")
        assert docs[0] == docs[1] == docs[2]

    def test_seed_changes_replicates(self, univ_data):
        a = test_univ(*univ_data, Config(n_boot=40, seed=1))
        b = test_univ(*univ_data, Config(n_boot=40, seed=2))
        assert a.replicates != b.replicates
        assert a.statistics == b.statistics

    def test_drops_failed_refits(self, univ_data, monkeypatch):
        real = bootstrap._replicate_chunk

        def flaky(task):
            out = real(task)
            out[::10] = np.nan
            return out

        monkeypatch.setattr(bootstrap, "_replicate_chunk", flaky)
        r = test_univ(*univ_data, Config(n_boot=100, seed=3))
        assert r.n_dropped["efficacy"] == 10
        assert len(r.replicates["efficacy"]) == 90
        # the order statistic index follows the surviving count
        assert r.quantiles["efficacy"] == r.replicates["efficacy"][math.floor(90 * 0.05) - 1]


# ---------------------------------------------------------------------------
# Bivariate test
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def biv_report(biv_data):
    return test_bivariate(*biv_data, Config(epsilon=(0.2, 0.2), n_boot=60, seed=1))


class TestBivariateTest:
    def test_coherent(self, biv_report):
        check_coherence(biv_report)

    def test_null_generation(self, biv_report):
        check_null_generation(biv_report)

    def test_each_endpoint_has_own_null(self, biv_report):
        assert biv_report.endpoints == ("efficacy", "toxicity")
        assert biv_report.null_fits["efficacy"] != biv_report.null_fits["toxicity"]

    def test_endpoint_streams_disjoint(self, biv_report):
        assert biv_report.replicates["efficacy"] != biv_report.replicates["toxicity"]

    def test_scalar_margin_applies_to_both(self, biv_data):
        r = test_bivariate(*biv_data, Config(epsilon=0.2, n_boot=20, seed=1))
        assert r.config.epsilon == (0.2, 0.2)

    def test_rejects_probit(self, biv_data):
        with pytest.raises(ConfigError):
            test_bivariate(*biv_data, Config(n_boot=20, link="probit"))

    def test_worker_invariance(self, biv_data, small_chunks):
        cfgs = [Config(epsilon=(0.2, 0.2), n_boot=30, seed=9, workers=w) for w in (1, 2, 8)]
        docs = [report_to_dict(test_bivariate(*biv_data, c)) for c in cfgs]
        for d in docs:
            d["config"].pop("workers")
        assert docs[0] == docs[1] == docs[2]

    def test_deep_alternative(self):
        d = standard_design(2000)
        th = GumbelParams(0, 1, 0, 0.5, 1)
        data = sample_gumbel(th, d, RngStream(3, 0)), sample_gumbel(th, d, RngStream(3, 1))
        r = test_bivariate(*data, Config(epsilon=(0.5, 0.5), alpha=0.1, n_boot=50, seed=3))
        check_coherence(r)
        assert r.reject_global
        assert all(p <= 0.02 for p in r.p_values.values())
