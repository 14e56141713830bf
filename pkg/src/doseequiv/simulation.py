"""Scenario registry and Monte Carlo driver for operating characteristics.

Each simulation run draws both groups from the true curves, runs the
applicable bootstrap test and records the decisions.  Streams are keyed by
``(run, 0, group)`` for the data and ``(run, 1, ...)`` for the bootstrap,
so every run is reproducible on its own and results do not depend on how
runs are scheduled across workers.
"""

from __future__ import annotations

import csv
import io
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from doseequiv.bootstrap import ENDPOINTS, TestConfig, test_bivariate, test_univ
from doseequiv.datagen import RngStream, sample_gumbel, sample_univ
from doseequiv.errors import ConfigError, DoseEquivError
from doseequiv.model import (
    DEFAULT_GRID_SIZE,
    DoseDesign,
    GumbelParams,
    Kind,
    Link,
    LinkParams,
    check_feasibility,
    dose_grid,
    max_abs_deviation,
    standard_design,
)

#: Runs per work unit; fixed so results do not depend on the worker count.
SIM_CHUNK = 10
DESK_EFFORT = (500, 300)
FULL_EFFORT = (1000, 400)

REFERENCE_UNIV = (0.0, 1.0)
REFERENCE_GUMBEL = (0.0, 1.0, 0.0, 0.5)

# (test-group curve, nominal deviation)
UNIV_TRUTHS = (
    ((0.0, 1.0), 0.0),
    ((0.1, 1.2), 0.05),
    ((0.2, 1.4), 0.1),
    ((0.4, 1.6), 0.15),
    ((0.6, 1.9), 0.2),
    ((1.3, 2.1), 0.3),
    ((0.2, 1.1), 0.1),
)

# (test-group margins, nominal (efficacy, toxicity) deviation)
BIVARIATE_TRUTHS = (
    ((0.0, 1.0, 0.0, 0.5), (0.0, 0.0)),
    ((0.1, 1.2, 0.1, 0.6), (0.05, 0.05)),
    ((0.2, 1.4, 0.2, 0.7), (0.1, 0.1)),
    ((0.4, 1.6, 0.4, 0.8), (0.15, 0.15)),
    ((0.0, 1.0, 0.4, 0.8), (0.0, 0.15)),
    ((0.6, 1.9, 0.5, 1.0), (0.2, 0.2)),
    ((0.0, 1.0, 0.5, 1.0), (0.0, 0.2)),
)


def _fmt(v: float) -> str:
    return f"{v:g}"


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation study cell.

    ``d_tag`` is the nominal maximum deviation the scenario is labelled with;
    :attr:`deviation` is the exact value for the true curves.
    """

    id: str
    truth_a: LinkParams | GumbelParams
    truth_b: LinkParams | GumbelParams
    d_tag: float | tuple[float, float]
    design: DoseDesign = field(default_factory=lambda: standard_design(21))
    epsilon: float | tuple[float, float] = 0.2
    alpha: float = 0.05
    n_sims: int = DESK_EFFORT[0]
    n_boot: int = DESK_EFFORT[1]
    seed: int = 0
    link: Link = Link.LOGISTIC
    grid_size: int = DEFAULT_GRID_SIZE

    def __post_init__(self):
        object.__setattr__(self, "link", Link(self.link))
        if type(self.truth_a) is not type(self.truth_b):
            raise ConfigError("both truths must be of the same model type")
        if self.n_sims < 1 or self.n_boot < 1:
            raise ConfigError("n_sims and n_boot must be >= 1")
        if self.kind is Kind.BIVARIATE:
            for t in (self.truth_a, self.truth_b):
                if not check_feasibility(t, self.design.dose_array):
                    raise ConfigError(f"{self.id}: {t} is infeasible on the design doses")
        # validates epsilon and alpha
        self.config()

    @property
    def kind(self) -> Kind:
        return Kind.BIVARIATE if isinstance(self.truth_a, GumbelParams) else Kind.UNIVARIATE

    @property
    def nu(self) -> float | None:
        return self.truth_b.nu if self.kind is Kind.BIVARIATE else None

    @property
    def n_per_dose(self) -> int:
        sizes = set(self.design.sizes)
        return sizes.pop() if len(sizes) == 1 else -1

    @property
    def endpoints(self) -> tuple[str, ...]:
        return ENDPOINTS if self.kind is Kind.BIVARIATE else ENDPOINTS[:1]

    def margins(self) -> tuple[float, ...]:
        cfg = self.config()
        return tuple(cfg.margin(ep) for ep in self.endpoints)

    def tags(self) -> tuple[float, ...]:
        return self.d_tag if isinstance(self.d_tag, tuple) else (self.d_tag,)

    @property
    def deviation(self) -> tuple[float, ...]:
        """Exact maximum deviation of the true curves on the design range, per endpoint."""
        grid = dose_grid(self.design.range, self.grid_size)
        if self.kind is Kind.UNIVARIATE:
            return (max_abs_deviation(self.truth_a, self.truth_b, grid).value,)
        return tuple(
            max_abs_deviation(self.truth_a.margin(ep), self.truth_b.margin(ep), grid).value
            for ep in ENDPOINTS
        )

    @property
    def region(self) -> str:
        """``"alternative"``, ``"null-margin"`` or ``"null-interior"`` from the tags and margins."""
        pairs = list(zip(self.tags(), self.margins()))
        if all(t < e - 1e-9 for t, e in pairs):
            return "alternative"
        if any(t > e + 1e-9 for t, e in pairs):
            return "null-interior"
        return "null-margin"

    def config(self, workers: int = 1) -> TestConfig:
        return TestConfig(
            epsilon=self.epsilon, alpha=self.alpha, n_boot=self.n_boot,
            grid_size=self.grid_size, seed=self.seed, link=self.link, workers=workers,
        )

    def with_effort(self, n_sims: int, n_boot: int) -> ScenarioSpec:
        return replace(self, n_sims=n_sims, n_boot=n_boot)


def builtin_scenarios(
    n_per_dose: int = 21,
    epsilon: float | tuple[float, float] = 0.2,
    nus: tuple[float, ...] = (1.0, 3.0),
    *,
    full_effort: bool = False,
    seed: int = 0,
) -> list[ScenarioSpec]:
    """The univariate and bivariate study cells on seven equally spaced doses in [-3, 3].

    The pair ``(0.2, 1.1)`` is tagged 0.1 although its exact deviation is
    about 0.057; compare :attr:`ScenarioSpec.deviation`.
    """
    design = standard_design(n_per_dose)
    n_sims, n_boot = FULL_EFFORT if full_effort else DESK_EFFORT
    eps_u = epsilon[0] if isinstance(epsilon, tuple) else epsilon
    eps_b = epsilon if isinstance(epsilon, tuple) else (epsilon, epsilon)
    ref_u = LinkParams(*REFERENCE_UNIV)
    out = [
        ScenarioSpec(
            id=f"univ:{_fmt(b)},{_fmt(g)}", truth_a=ref_u, truth_b=LinkParams(b, g),
            d_tag=tag, design=design, epsilon=eps_u, n_sims=n_sims, n_boot=n_boot, seed=seed,
        )
        for (b, g), tag in UNIV_TRUTHS
    ]
    for nu in nus:
        ref = GumbelParams(*REFERENCE_GUMBEL, nu)
        for margins, tag in BIVARIATE_TRUTHS:
            out.append(ScenarioSpec(
                id=f"biv-nu{_fmt(nu)}:{','.join(_fmt(v) for v in margins)}",
                truth_a=ref, truth_b=GumbelParams(*margins, nu), d_tag=tag, design=design,
                epsilon=eps_b, n_sims=n_sims, n_boot=n_boot, seed=seed,
            ))
    return out


# ---------------------------------------------------------------------------
# Monte Carlo driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatingCharacteristics:
    """Rejection frequencies of one scenario.

    Rates are over the runs that completed; runs whose fits failed are
    counted in ``drop_counts["failed_runs"]``.
    """

    scenario_id: str
    n_sims: int
    n_valid: int
    rejection_rate_global: float
    rejection_rate_endpoint: dict[str, float]
    mc_stderr: float
    mc_stderr_endpoint: dict[str, float]
    drop_counts: dict[str, int]
    decisions: tuple[tuple[bool, ...], ...] = field(repr=False)
    runtime: float = field(default=0.0, compare=False)


def binomial_stderr(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n) if n > 0 else math.nan


def _simulate_run(spec: ScenarioSpec, i: int):
    """Decisions ``(global, per endpoint...)`` and dropped replicates, or None on failure."""
    seed = spec.seed
    sa, sb = RngStream(seed, (i, 0, 0)), RngStream(seed, (i, 0, 1))
    cfg = spec.config()
    try:
        if spec.kind is Kind.UNIVARIATE:
            da = sample_univ(spec.truth_a, spec.design, sa)
            db = sample_univ(spec.truth_b, spec.design, sb)
            rep = test_univ(da, db, cfg, stream_prefix=(i, 1))
        else:
            da = sample_gumbel(spec.truth_a, spec.design, sa)
            db = sample_gumbel(spec.truth_b, spec.design, sb)
            rep = test_bivariate(da, db, cfg, stream_prefix=(i, 1))
    except DoseEquivError:
        return None
    decisions = (rep.reject_global,) + tuple(rep.reject[ep] for ep in spec.endpoints)
    return decisions, sum(rep.n_dropped.values())


def _simulate_chunk(task):
    spec, start, stop = task
    return [_simulate_run(spec, i) for i in range(start, stop)]


def run_scenario(spec: ScenarioSpec, workers: int = 1) -> OperatingCharacteristics:
    """Estimate rejection rates for ``spec`` by Monte Carlo.

    Runs are split into fixed chunks of ``SIM_CHUNK``; with ``workers > 1``
    chunks go to a process pool.  Bootstrap replicates inside a run are
    computed serially, so the pool is never nested.
    """
    t0 = time.perf_counter()
    tasks = [(spec, s, min(s + SIM_CHUNK, spec.n_sims)) for s in range(0, spec.n_sims, SIM_CHUNK)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if workers <= 1 or len(tasks) == 1:
            parts = [_simulate_chunk(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
                parts = list(ex.map(_simulate_chunk, tasks))
    runs = [r for part in parts for r in part]
    ok = [r for r in runs if r is not None]
    dec = np.array([r[0] for r in ok], dtype=bool).reshape(len(ok), 1 + len(spec.endpoints))
    n = len(ok)
    rates = dec.mean(axis=0) if n else np.full(dec.shape[1], math.nan)
    ep_rates = {ep: float(rates[1 + j]) for j, ep in enumerate(spec.endpoints)}
    return OperatingCharacteristics(
        scenario_id=spec.id,
        n_sims=spec.n_sims,
        n_valid=n,
        rejection_rate_global=float(rates[0]),
        rejection_rate_endpoint=ep_rates,
        mc_stderr=binomial_stderr(float(rates[0]), n),
        mc_stderr_endpoint={ep: binomial_stderr(r, n) for ep, r in ep_rates.items()},
        drop_counts={
            "failed_runs": len(runs) - n,
            "dropped_replicates": int(sum(r[1] for r in ok)),
        },
        decisions=tuple(tuple(bool(v) for v in row) for row in dec),
        runtime=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Results table
# ---------------------------------------------------------------------------

RESULT_COLUMNS = (
    "scenario_id", "region", "n_per_dose", "epsilon_e", "epsilon_t", "nu", "d_tag_e", "d_tag_t",
    "global_rate", "rate_e", "rate_t", "stderr", "n_valid", "failed_runs",
    "dropped_replicates", "runtime_s",
)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 6))
    return str(v)


def result_row(spec: ScenarioSpec, oc: OperatingCharacteristics) -> dict[str, str]:
    eps = spec.margins()
    tags = spec.tags()
    two = spec.kind is Kind.BIVARIATE
    row = {
        "scenario_id": spec.id,
        "region": spec.region,
        "n_per_dose": spec.n_per_dose,
        "epsilon_e": eps[0],
        "epsilon_t": eps[1] if two else None,
        "nu": spec.nu,
        "d_tag_e": tags[0],
        "d_tag_t": tags[1] if two else None,
        "global_rate": oc.rejection_rate_global,
        "rate_e": oc.rejection_rate_endpoint["efficacy"],
        "rate_t": oc.rejection_rate_endpoint.get("toxicity"),
        "stderr": oc.mc_stderr,
        "n_valid": oc.n_valid,
        "failed_runs": oc.drop_counts["failed_runs"],
        "dropped_replicates": oc.drop_counts["dropped_replicates"],
        "runtime_s": round(oc.runtime, 3),
    }
    return {k: _cell(float(v) if isinstance(v, (np.floating,)) else v) for k, v in row.items()}


def results_csv(results) -> str:
    """``(spec, oc)`` pairs as CSV text, one row each."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for spec, oc in results:
        w.writerow(result_row(spec, oc))
    return buf.getvalue()


def write_results_csv(results, path) -> Path:
    path = Path(path)
    path.write_text(results_csv(results), encoding="utf-8")
    return path
