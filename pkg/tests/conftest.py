"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from doseequiv.model import CountTable, DoseDesign, GumbelParams, LinkParams, standard_design

# case-study fits over the dose range [0, 1]
CASE_REF = GumbelParams(-0.971, 2.254, -2.497, 1.806, -0.030)
CASE_TEST = GumbelParams(-1.585, 2.963, -2.162, 1.287, 1.003)


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def oracle_cells(theta, d):
    """Cell probabilities written out term by term from the Gumbel distribution."""
    b1, g1, b2, g2, nu = np.asarray(theta, dtype=float)
    d = np.asarray(d, dtype=float)
    a = expit(b1 + g1 * d)
    b = expit(b2 + g2 * d)
    p11 = a * b * (1.0 + nu * (1.0 - a) * (1.0 - b))
    p10 = a - p11
    p01 = b - p11
    p00 = 1.0 - a - b + p11
    return np.stack([p00, p01, p10, p11], axis=-1)


def nu_interval(x4, doses):
    """Range of ``nu`` keeping every cell nonnegative at ``doses`` for fixed margins."""
    d = np.asarray(doses, dtype=float)
    a = expit(x4[0] + x4[1] * d)
    b = expit(x4[2] + x4[3] * d)
    # p11 >= 0 and p00 >= 0 bound nu below; p10 >= 0 and p01 >= 0 bound it above
    lo = max(np.max(-1.0 / ((1 - a) * (1 - b))), np.max(-1.0 / (a * b)))
    hi = min(np.min(1.0 / (a * (1 - b))), np.min(1.0 / ((1 - a) * b)))
    return float(lo), float(hi)


def random_feasible_theta(rng, doses, shrink=0.9, coef=2.0):
    """A Gumbel parameter feasible at ``doses`` with ``nu`` drawn inside its range."""
    x4 = rng.uniform(-coef, coef, size=4)
    lo, hi = nu_interval(x4, doses)
    nu = shrink * rng.uniform(max(lo, -4.0), min(hi, 4.0))
    return GumbelParams.from_array(np.append(x4, nu))


def exact_univ_table(params: LinkParams, design: DoseDesign) -> CountTable:
    """Counts rounded from the exact response probabilities."""
    p = np.asarray(params(design.dose_array))
    return CountTable(design, np.rint(p * design.size_array).astype(int))


def exact_gumbel_table(theta: GumbelParams, design: DoseDesign) -> CountTable:
    """Cell counts proportional to the exact cells, rounded to sum to n."""
    cells = oracle_cells(theta.as_array(), design.dose_array)
    n = design.size_array
    z = np.floor(cells * n[:, None]).astype(int)
    # hand the rounding remainder to the largest cell
    z[np.arange(len(n)), np.argmax(cells, axis=1)] += n - z.sum(axis=1)
    return CountTable(design, z)


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

@pytest.fixture
def rng():
    return np.random.default_rng(20240)


@pytest.fixture
def design21():
    return standard_design(21)


@pytest.fixture
def saturated_table():
    """Two doses where the logistic model reproduces the frequencies 0.5 and 0.8."""
    return CountTable(DoseDesign((-1.0, 1.0), (10, 10)), np.array([5, 8]))


# ---------------------------------------------------------------------------
# Acceptance summary
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if failed or (rep.when == "call" and number not in _CRITERIA):
        _CRITERIA[number] = ("FAIL" if failed else "PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
