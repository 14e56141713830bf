"""Parametric bootstrap equivalence tests for one or two binary endpoints.

Replicates are generated from parameters lying on the null hypothesis
(the fitted curves if they already deviate by at least the margin,
otherwise the constrained fit), refitted, and the maximum deviation is
recomputed.  The observed deviation is compared with the lower
``alpha``-quantile of the replicates.

For two endpoints each margin is tested separately with its own
constrained null and its own bootstrap sample; the global null is rejected
only when both endpoint tests reject.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from doseequiv.datagen import RngStream, sample_gumbel_streams, sample_univ_streams
from doseequiv.errors import BootstrapWarning, ConfigError
from doseequiv.estimation import (
    LAMBDA_SCHEDULE,
    fit_constrained,
    fit_gumbel_batch,
    fit_mle_gumbel,
    fit_mle_univ,
    fit_univ_batch,
    select_null_params,
)
from doseequiv.model import (
    CountTable,
    DEFAULT_GRID_SIZE,
    GumbelParams,
    Kind,
    Link,
    LinkParams,
    curve_matrix,
    dose_grid,
    max_abs_deviation,
)

#: Replicates per work unit; fixed so results do not depend on the worker count.
BOOT_CHUNK = 100
ENDPOINTS = ("efficacy", "toxicity")
_SLICES = {"efficacy": slice(0, 2), "toxicity": slice(2, 4)}


@dataclass(frozen=True)
class TestConfig:
    epsilon: float | tuple[float, float] = 0.2
    alpha: float = 0.05
    n_boot: int = 400
    grid_size: int = DEFAULT_GRID_SIZE
    dose_range: tuple[float, float] | None = None
    seed: int = 0
    link: Link = Link.LOGISTIC
    workers: int = 1
    lambdas: tuple[float, ...] = LAMBDA_SCHEDULE

    __test__ = False  # not a pytest class

    def __post_init__(self):
        object.__setattr__(self, "link", Link(self.link))
        eps = self.epsilon
        eps = (float(eps),) if np.ndim(eps) == 0 else tuple(float(e) for e in eps)
        if len(eps) not in (1, 2) or not all(0.0 < e < 1.0 for e in eps):
            raise ConfigError("epsilon must be one or two margins in (0, 1)")
        object.__setattr__(self, "epsilon", eps[0] if len(eps) == 1 else eps)
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.n_boot < 1:
            raise ConfigError("n_boot must be >= 1")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.dose_range is not None:
            lo, hi = self.dose_range
            if not lo <= hi:
                raise ConfigError("dose range must satisfy lo <= hi")
            object.__setattr__(self, "dose_range", (float(lo), float(hi)))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if math.floor(self.n_boot * self.alpha + 1e-9) < 1:
            warnings.warn(
                f"n_boot * alpha = {self.n_boot * self.alpha:g} < 1: the bootstrap quantile "
                "is undefined and the test can never reject",
                BootstrapWarning,
                stacklevel=2,
            )

    def margin(self, endpoint: str) -> float:
        if isinstance(self.epsilon, tuple):
            return self.epsilon[ENDPOINTS.index(endpoint)]
        return self.epsilon

    def grid_for(self, data_a: CountTable, data_b: CountTable) -> np.ndarray:
        if self.dose_range is not None:
            rng = self.dose_range
        else:
            rng = (
                min(data_a.design.range[0], data_b.design.range[0]),
                max(data_a.design.range[1], data_b.design.range[1]),
            )
        return dose_grid(rng, self.grid_size)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["link"] = self.link.value
        out["epsilon"] = list(self.epsilon) if isinstance(self.epsilon, tuple) else self.epsilon
        out["dose_range"] = list(self.dose_range) if self.dose_range else None
        out["lambdas"] = list(self.lambdas)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> TestConfig:
        d = dict(d)
        if isinstance(d.get("epsilon"), list):
            d["epsilon"] = tuple(d["epsilon"])
        if d.get("dose_range") is not None:
            d["dose_range"] = tuple(d["dose_range"])
        d["lambdas"] = tuple(d.get("lambdas", LAMBDA_SCHEDULE))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BootstrapWarning)
            return cls(**d)


@dataclass(frozen=True, eq=False)
class EquivalenceReport:
    """Outcome of one equivalence test.

    Per-endpoint quantities are dicts keyed by ``"efficacy"`` (and
    ``"toxicity"`` for bivariate data).
    """

    kind: Kind
    config: TestConfig
    fits: tuple
    statistics: dict[str, float]
    argmax_doses: dict[str, float]
    null_branch: dict[str, str]
    null_fits: dict[str, tuple]
    null_deviation: dict[str, float]
    quantiles: dict[str, float]
    p_values: dict[str, float]
    reject: dict[str, bool]
    reject_global: bool
    replicates: dict[str, tuple[float, ...]] = field(repr=False)
    n_dropped: dict[str, int] = field(default_factory=dict)

    @property
    def endpoints(self) -> tuple[str, ...]:
        return tuple(self.statistics)


# ---------------------------------------------------------------------------
# Quantile and p-value
# ---------------------------------------------------------------------------

def bootstrap_quantile(replicates, alpha: float) -> float:
    """The ``floor(n * alpha)``-th smallest replicate (1-based).

    Returns ``-inf`` with a ``BootstrapWarning`` when that index is zero.
    """
    r = np.asarray(replicates, dtype=float)
    if r.size == 0:
        raise ValueError("replicates must be nonempty")
    k = math.floor(r.size * alpha + 1e-9)
    if k < 1:
        warnings.warn(
            f"floor({r.size} * {alpha}) = 0: no order statistic available", BootstrapWarning
        )
        return -math.inf
    return float(np.sort(r)[k - 1])


def p_value(replicates, statistic: float) -> float:
    """Empirical distribution function of the replicates at ``statistic``."""
    r = np.asarray(replicates, dtype=float)
    if r.size == 0:
        raise ValueError("replicates must be nonempty")
    return float(np.count_nonzero(r <= statistic) / r.size)


# ---------------------------------------------------------------------------
# Bootstrap replicate generation
# ---------------------------------------------------------------------------

def _replicate_chunk(task):
    """Deviation statistics for replicates ``start..stop`` (NaN where a refit failed)."""
    kind, xa, xb, design_a, design_b, link, grid, endpoint, seed, prefix, start, stop = task
    ids = range(start, stop)
    sa = [RngStream(seed, prefix + (b, 0)) for b in ids]
    sb = [RngStream(seed, prefix + (b, 1)) for b in ids]
    if kind is Kind.UNIVARIATE:
        fa = fit_univ_batch(sample_univ_streams(xa, design_a, link, sa), design_a, link)
        fb = fit_univ_batch(sample_univ_streams(xb, design_b, link, sb), design_b, link)
        ca, cb = fa.x, fb.x
    else:
        fa = fit_gumbel_batch(sample_gumbel_streams(xa, design_a, sa), design_a)
        fb = fit_gumbel_batch(sample_gumbel_streams(xb, design_b, sb), design_b)
        sl = _SLICES[endpoint]
        ca, cb = fa.x[:, sl], fb.x[:, sl]
    dev = np.max(np.abs(curve_matrix(ca, grid, link) - curve_matrix(cb, grid, link)), axis=1)
    return np.where(fa.converged & fb.converged, dev, np.nan)


def bootstrap_replicates(
    kind: Kind,
    null_pair,
    designs,
    grid,
    n_boot: int,
    seed: int,
    prefix: tuple = (),
    endpoint: str = "efficacy",
    link: Link = Link.LOGISTIC,
    workers: int = 1,
) -> np.ndarray:
    """Unsorted replicate statistics in replicate order; NaN marks a dropped refit.

    Replicate ``b`` draws group A from stream ``prefix + (b, 0)`` and group B
    from ``prefix + (b, 1)``.
    """
    xa, xb = (np.asarray(p.as_array(), dtype=float) for p in null_pair)
    tasks = [
        (kind, xa, xb, designs[0], designs[1], Link(link), np.asarray(grid), endpoint,
         seed, tuple(prefix), s, min(s + BOOT_CHUNK, n_boot))
        for s in range(0, n_boot, BOOT_CHUNK)
    ]
    if workers <= 1 or len(tasks) == 1:
        parts = [_replicate_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
            parts = list(ex.map(_replicate_chunk, tasks))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Tests
# ---------------------------------------------------------------------------

def _endpoint_test(kind, fits, data, endpoint, config, grid, prefix, sl):
    eps = config.margin(endpoint)
    link = config.link
    ca, cb = (LinkParams.from_array(f.params.as_array()[sl], link) for f in fits)
    dev = max_abs_deviation(ca, cb, grid)
    constrained = None
    if dev.value < eps:
        constrained = fit_constrained(
            data[0], data[1], endpoint, eps, grid, config.lambdas, link,
            start=(fits[0].params, fits[1].params),
        )
    null = select_null_params(fits, constrained, dev.value, eps)
    na, nb = (LinkParams.from_array(p.as_array()[sl], link) for p in null)
    null_dev = max_abs_deviation(na, nb, grid).value
    reps = bootstrap_replicates(
        kind, null, (data[0].design, data[1].design), grid, config.n_boot, config.seed,
        prefix, endpoint, link, config.workers,
    )
    kept = np.sort(reps[~np.isnan(reps)])
    n_drop = int(reps.size - kept.size)
    if kept.size == 0:
        q, pv = -math.inf, 1.0
    else:
        q = bootstrap_quantile(kept, config.alpha)
        pv = p_value(kept, dev.value)
    return {
        "statistic": dev.value,
        "argmax": dev.argmax_dose,
        "branch": "unconstrained" if constrained is None else "constrained",
        "null": null,
        "null_dev": null_dev,
        "quantile": q,
        "p_value": pv,
        "reject": bool(dev.value < q),
        "replicates": tuple(float(v) for v in kept),
        "dropped": n_drop,
    }


def _assemble(kind, config, fits, results) -> EquivalenceReport:
    def pick(key):
        return {ep: r[key] for ep, r in results.items()}

    reject = pick("reject")
    return EquivalenceReport(
        kind=kind,
        config=config,
        fits=tuple(f.params for f in fits),
        statistics=pick("statistic"),
        argmax_doses=pick("argmax"),
        null_branch=pick("branch"),
        null_fits=pick("null"),
        null_deviation=pick("null_dev"),
        quantiles=pick("quantile"),
        p_values=pick("p_value"),
        reject=reject,
        reject_global=all(reject.values()),
        replicates=pick("replicates"),
        n_dropped=pick("dropped"),
    )


def test_univ(data_a: CountTable, data_b: CountTable, config: TestConfig, stream_prefix=()):
    """Bootstrap equivalence test for a single binary endpoint.

    Bootstrap replicate ``b`` uses streams ``(config.seed, stream_prefix + (0, b, g))``.
    """
    if data_a.kind is not Kind.UNIVARIATE or data_b.kind is not Kind.UNIVARIATE:
        raise ValueError("test_univ needs univariate data for both groups")
    if isinstance(config.epsilon, tuple):
        raise ConfigError("test_univ takes a single margin")
    grid = config.grid_for(data_a, data_b)
    fits = (fit_mle_univ(data_a, config.link), fit_mle_univ(data_b, config.link))
    res = _endpoint_test(
        Kind.UNIVARIATE, fits, (data_a, data_b), "efficacy", config, grid,
        tuple(stream_prefix) + (0,), slice(0, 2),
    )
    return _assemble(Kind.UNIVARIATE, config, fits, {"efficacy": res})


def test_bivariate(data_a: CountTable, data_b: CountTable, config: TestConfig, stream_prefix=()):
    """Intersection-union bootstrap test for efficacy and toxicity jointly.

    Each endpoint gets its own constrained null and bootstrap sample (endpoint
    ``e`` uses streams ``stream_prefix + (e, b, g)``); the global null is rejected
    iff both endpoint tests reject.  No multiplicity adjustment is applied.
    """
    if data_a.kind is not Kind.BIVARIATE or data_b.kind is not Kind.BIVARIATE:
        raise ValueError("test_bivariate needs bivariate data for both groups")
    if config.link is not Link.LOGISTIC:
        raise ConfigError("the Gumbel model has logistic margins only")
    if not isinstance(config.epsilon, tuple):
        config = _with_margins(config, (config.epsilon, config.epsilon))
    grid = config.grid_for(data_a, data_b)
    fits = (fit_mle_gumbel(data_a), fit_mle_gumbel(data_b))
    results = {
        ep: _endpoint_test(
            Kind.BIVARIATE, fits, (data_a, data_b), ep, config, grid,
            tuple(stream_prefix) + (e,), _SLICES[ep],
        )
        for e, ep in enumerate(ENDPOINTS)
    }
    return _assemble(Kind.BIVARIATE, config, fits, results)


def _with_margins(config: TestConfig, eps) -> TestConfig:
    d = config.to_dict()
    d["epsilon"] = list(eps)
    return TestConfig.from_dict(d)


def default_workers() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def params_to_dict(p):
    if isinstance(p, GumbelParams):
        return {"model": "gumbel", **{k: float(v) for k, v in zip(
            ("beta_e", "gamma_e", "beta_t", "gamma_t", "nu"), p.as_array())}}
    return {"model": "binary", "beta": p.beta, "gamma": p.gamma, "link": p.link.value}


def params_from_dict(d):
    if d["model"] == "gumbel":
        return GumbelParams(d["beta_e"], d["gamma_e"], d["beta_t"], d["gamma_t"], d["nu"])
    return LinkParams(d["beta"], d["gamma"], Link(d["link"]))


def report_to_dict(report: EquivalenceReport) -> dict:
    return {
        "kind": report.kind.value,
        "config": report.config.to_dict(),
        "fits": [params_to_dict(p) for p in report.fits],
        "statistics": dict(report.statistics),
        "argmax_doses": dict(report.argmax_doses),
        "null_branch": dict(report.null_branch),
        "null_fits": {k: [params_to_dict(p) for p in v] for k, v in report.null_fits.items()},
        "null_deviation": dict(report.null_deviation),
        "quantiles": dict(report.quantiles),
        "p_values": dict(report.p_values),
        "reject": dict(report.reject),
        "reject_global": report.reject_global,
        "replicates": {k: list(v) for k, v in report.replicates.items()},
        "n_dropped": dict(report.n_dropped),
    }


def report_from_dict(d: dict) -> EquivalenceReport:
    return EquivalenceReport(
        kind=Kind(d["kind"]),
        config=TestConfig.from_dict(d["config"]),
        fits=tuple(params_from_dict(p) for p in d["fits"]),
        statistics=dict(d["statistics"]),
        argmax_doses=dict(d["argmax_doses"]),
        null_branch=dict(d["null_branch"]),
        null_fits={k: tuple(params_from_dict(p) for p in v) for k, v in d["null_fits"].items()},
        null_deviation=dict(d["null_deviation"]),
        quantiles=dict(d["quantiles"]),
        p_values=dict(d["p_values"]),
        reject=dict(d["reject"]),
        reject_global=bool(d["reject_global"]),
        replicates={k: tuple(v) for k, v in d["replicates"].items()},
        n_dropped=dict(d["n_dropped"]),
    )


test_univ.__test__ = False
test_bivariate.__test__ = False
