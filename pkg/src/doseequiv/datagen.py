"""Seeded generation of univariate and correlated bivariate binary trial data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from doseequiv.errors import InfeasibleCorrelation
from doseequiv.model import (
    CELL_TOL,
    CountTable,
    DoseDesign,
    GumbelParams,
    LinkParams,
    _check_cells,
    cells_raw,
    link_prob,
)


@dataclass(frozen=True)
class RngStream:
    """Addressable random stream.

    ``(seed, stream_id)`` fully determines the sequence: the generator is a
    counter-based Philox keyed through ``SeedSequence(seed, spawn_key=...)``,
    so any replicate can be regenerated without replaying its predecessors.
    ``stream_id`` may be an int or a tuple for hierarchical addressing, e.g.
    ``(simulation, endpoint, replicate)``.
    """

    seed: int
    stream_id: int | tuple[int, ...] = 0

    def generator(self) -> np.random.Generator:
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        ss = np.random.SeedSequence(int(self.seed), spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *ids: int) -> RngStream:
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        return RngStream(self.seed, key + tuple(ids))


def _gen(rng) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngStream) else rng


@dataclass(frozen=True)
class JointBernoulliSpec:
    pE: float
    pT: float
    rho: float


def sample_univ(params: LinkParams, design: DoseDesign, rng) -> CountTable:
    p = np.asarray(link_prob(params, design.dose_array), dtype=float)
    z = _gen(rng).binomial(design.size_array, p)
    return CountTable(design, z)


def sample_gumbel(theta: GumbelParams, design: DoseDesign, rng) -> CountTable:
    """Multinomial cell counts at each design dose.

    Raises
    ------
    FeasibilityError
        If ``theta`` gives invalid cell probabilities at a design dose.
    """
    cells = cells_raw(theta.as_array(), design.dose_array)
    _check_cells(cells)
    return CountTable(design, _multinomial(_gen(rng), design.size_array, cells))


def _multinomial(gen, n, cells):
    pv = np.clip(cells, 0.0, None)
    pv = pv / pv.sum(axis=-1, keepdims=True)
    return gen.multinomial(n, pv)


def frechet_bounds(pE: float, pT: float) -> tuple[float, float]:
    """Attainable correlation range of two Bernoulli variables with these margins."""
    qE, qT = 1.0 - pE, 1.0 - pT
    lower = max(-np.sqrt(pE * pT / (qE * qT)), -np.sqrt(qE * qT / (pE * pT)))
    upper = min(np.sqrt(pE * qT / (qE * pT)), np.sqrt(qE * pT / (pE * qT)))
    return float(lower), float(upper)


def joint_cells_from_marginals(spec: JointBernoulliSpec, tol: float = CELL_TOL):
    """Cell probabilities ``(p00, p01, p10, p11)`` from margins and correlation.

    Raises
    ------
    InfeasibleCorrelation
        If ``rho`` lies outside the Fréchet bounds for the margins.
    """
    pE, pT, rho = spec.pE, spec.pT, spec.rho
    p11 = pE * pT + rho * np.sqrt(pE * (1.0 - pE) * pT * (1.0 - pT))
    p10 = pE - p11
    p01 = pT - p11
    p00 = 1.0 - pE - pT + p11
    cells = (p00, p01, p10, p11)
    if min(cells) < -tol or max(cells) > 1.0 + tol:
        lo, hi = frechet_bounds(pE, pT)
        raise InfeasibleCorrelation(f"rho={rho} outside [{lo:.6g}, {hi:.6g}]")
    return cells


# ---------------------------------------------------------------------------
# Replicate generation for the bootstrap
# ---------------------------------------------------------------------------

def sample_univ_streams(x, design: DoseDesign, link, streams) -> np.ndarray:
    """Success counts for each stream: ``(len(streams), k)``."""
    p = np.asarray(link_prob(LinkParams.from_array(x, link), design.dose_array), dtype=float)
    n = design.size_array
    return np.stack([s.generator().binomial(n, p) for s in streams])


def sample_gumbel_streams(x, design: DoseDesign, streams) -> np.ndarray:
    """Cell counts for each stream: ``(len(streams), k, 4)``."""
    cells = cells_raw(np.asarray(x, dtype=float), design.dose_array)
    _check_cells(cells)
    n = design.size_array
    return np.stack([_multinomial(s.generator(), n, cells) for s in streams])
