"""Dose-response model mathematics.

Univariate binary curves use a logistic or probit link on the linear
predictor ``beta + gamma * d``.  The bivariate efficacy-toxicity model is the
Gumbel bivariate logistic model with parameter vector
``(beta_e, gamma_e, beta_t, gamma_t, nu)``.  Writing ``a = sigmoid(u1)``,
``b = sigmoid(u2)`` for the two margins, the association term is
``nu * a(1-a) * b(1-b)`` and the four cells are

    p11 = a b + c,  p10 = a - p11,  p01 = b - p11,  p00 = 1 - a - b + p11.

Cell arrays are always ordered ``(p00, p01, p10, p11)``, first index
efficacy, second toxicity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, log_expit, log_ndtr, ndtr

from doseequiv.errors import FeasibilityError

#: Floor applied to log-likelihood terms (``log`` of the smallest normal double).
LOG_FLOOR = -708.0
#: Absolute tolerance separating infeasible cells from round-off.
CELL_TOL = 1e-12
#: Default number of evaluation grid nodes over the dose range.
DEFAULT_GRID_SIZE = 201

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class Link(str, enum.Enum):
    LOGISTIC = "logit"
    PROBIT = "probit"


class Kind(str, enum.Enum):
    UNIVARIATE = "univariate"
    BIVARIATE = "bivariate"


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoseDesign:
    """Dose levels, per-dose sample sizes and the dose range they live in."""

    doses: tuple[float, ...]
    sizes: tuple[int, ...]
    range: tuple[float, float] | None = None

    def __post_init__(self):
        doses = tuple(float(d) for d in self.doses)
        sizes = tuple(int(n) for n in self.sizes)
        if len(doses) == 0 or len(doses) != len(sizes):
            raise ValueError("doses and sizes must be nonempty and of equal length")
        if not all(np.isfinite(doses)):
            raise ValueError("doses must be finite")
        if any(b <= a for a, b in zip(doses, doses[1:])):
            raise ValueError("doses must be strictly increasing")
        if any(n < 1 for n in sizes):
            raise ValueError("all sizes must be >= 1")
        rng = self.range if self.range is not None else (doses[0], doses[-1])
        rng = (float(rng[0]), float(rng[1]))
        if not rng[0] <= doses[0] or not doses[-1] <= rng[1]:
            raise ValueError(f"doses must lie inside the range {rng}")
        object.__setattr__(self, "doses", doses)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "range", rng)

    @classmethod
    def equal(cls, doses: Sequence[float], n: int, range=None) -> DoseDesign:
        return cls(tuple(doses), (n,) * len(doses), range)

    @property
    def k(self) -> int:
        return len(self.doses)

    @property
    def dose_array(self) -> NDArray[np.float64]:
        return np.asarray(self.doses, dtype=float)

    @property
    def size_array(self) -> NDArray[np.int64]:
        return np.asarray(self.sizes, dtype=np.int64)

    def grid(self, r: int = DEFAULT_GRID_SIZE) -> NDArray[np.float64]:
        return dose_grid(self.range, r)


def standard_design(n: int) -> DoseDesign:
    """Seven equally spaced doses on [-3, 3] with ``n`` subjects each."""
    return DoseDesign.equal(np.arange(-3.0, 4.0), n, (-3.0, 3.0))


@dataclass(frozen=True)
class LinkParams:
    beta: float
    gamma: float
    link: Link = Link.LOGISTIC

    def __post_init__(self):
        object.__setattr__(self, "link", Link(self.link))
        if not (np.isfinite(self.beta) and np.isfinite(self.gamma)):
            raise ValueError("beta and gamma must be finite")

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.beta, self.gamma], dtype=float)

    @classmethod
    def from_array(cls, x: ArrayLike, link: Link = Link.LOGISTIC) -> LinkParams:
        x = np.asarray(x, dtype=float)
        return cls(float(x[0]), float(x[1]), link)

    def __call__(self, d: ArrayLike):
        return link_prob(self, d)


@dataclass(frozen=True)
class GumbelParams:
    beta_e: float
    gamma_e: float
    beta_t: float
    gamma_t: float
    nu: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("all Gumbel parameters must be finite")

    def as_array(self) -> NDArray[np.float64]:
        return np.array(
            [self.beta_e, self.gamma_e, self.beta_t, self.gamma_t, self.nu], dtype=float
        )

    @classmethod
    def from_array(cls, x: ArrayLike) -> GumbelParams:
        return cls(*(float(v) for v in np.asarray(x, dtype=float)))

    @property
    def efficacy(self) -> LinkParams:
        return LinkParams(self.beta_e, self.gamma_e)

    @property
    def toxicity(self) -> LinkParams:
        return LinkParams(self.beta_t, self.gamma_t)

    def margin(self, endpoint: str) -> LinkParams:
        return self.efficacy if endpoint == "efficacy" else self.toxicity


@dataclass(frozen=True, eq=False)
class CountTable:
    """Per-dose response counts for one treatment group.

    ``counts`` has shape ``(k,)`` (successes) for univariate data or
    ``(k, 4)`` with columns ``(z00, z01, z10, z11)`` for bivariate data.
    """

    design: DoseDesign
    counts: NDArray[np.int64]
    label: str = ""

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        n = self.design.size_array
        if counts.ndim == 1:
            if counts.shape != (self.design.k,):
                raise ValueError("univariate counts must have one entry per dose")
            if np.any(counts < 0) or np.any(counts > n):
                raise ValueError("successes must satisfy 0 <= z <= n")
        elif counts.ndim == 2:
            if counts.shape != (self.design.k, 4):
                raise ValueError("bivariate counts must have shape (k, 4)")
            if np.any(counts < 0) or np.any(counts.sum(axis=1) != n):
                raise ValueError("cell counts must be nonnegative and sum to n per dose")
        else:
            raise ValueError("counts must be 1- or 2-dimensional")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def kind(self) -> Kind:
        return Kind.UNIVARIATE if self.counts.ndim == 1 else Kind.BIVARIATE

    def margin(self, endpoint: str) -> CountTable:
        """Collapse bivariate cells to the efficacy or toxicity success counts."""
        if self.kind is Kind.UNIVARIATE:
            return self
        c = self.counts
        z = c[:, 2] + c[:, 3] if endpoint == "efficacy" else c[:, 1] + c[:, 3]
        return CountTable(self.design, z, self.label)

    def same_as(self, other: CountTable) -> bool:
        return (
            self.design == other.design
            and self.counts.shape == other.counts.shape
            and bool(np.all(self.counts == other.counts))
        )


@dataclass(frozen=True, eq=False)
class DeviationResult:
    value: float
    argmax_dose: float
    grid: NDArray[np.float64] = field(repr=False)


def dose_grid(range: tuple[float, float], r: int = DEFAULT_GRID_SIZE) -> NDArray[np.float64]:
    """``r`` equally spaced nodes over the closed dose range."""
    if r < 1:
        raise ValueError("grid size must be >= 1")
    lo, hi = range
    if r == 1:
        return np.array([float(lo)])
    return np.linspace(lo, hi, r)


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------

def _cdf(u, link: Link):
    return expit(u) if link is Link.LOGISTIC else ndtr(u)


def _log_cdf_pair(u, link: Link):
    """``(log F(u), log(1 - F(u)))`` without cancellation."""
    if link is Link.LOGISTIC:
        return log_expit(u), log_expit(-u)
    return log_ndtr(u), log_ndtr(-u)


def link_prob(params: LinkParams, d: ArrayLike):
    u = params.beta + params.gamma * np.asarray(d, dtype=float)
    p = _cdf(u, params.link)
    return float(p) if np.ndim(p) == 0 else p


def curve_matrix(x: NDArray, d: NDArray, link: Link = Link.LOGISTIC) -> NDArray:
    """Evaluate a stack of curves: ``x`` is ``(..., 2)``, result ``(..., len(d))``."""
    x = np.asarray(x, dtype=float)
    u = x[..., 0:1] + x[..., 1:2] * np.asarray(d, dtype=float)
    return _cdf(u, link)


# ---------------------------------------------------------------------------
# Gumbel model
# ---------------------------------------------------------------------------

def _margins(x: NDArray, d: NDArray):
    u1 = x[..., 0:1] + x[..., 1:2] * d
    u2 = x[..., 2:3] + x[..., 3:4] * d
    return expit(u1), expit(u2)


def cells_raw(x: NDArray, d: ArrayLike) -> NDArray[np.float64]:
    """Unchecked cell probabilities.

    ``x`` has shape ``(..., 5)`` and ``d`` shape ``(k,)``; the result has shape
    ``(..., k, 4)``.
    """
    x = np.asarray(x, dtype=float)
    d = np.atleast_1d(np.asarray(d, dtype=float))
    a, b = _margins(x, d)
    p11 = a * b + x[..., 4:5] * (a * (1.0 - a)) * (b * (1.0 - b))
    p10 = a - p11
    p01 = b - p11
    p00 = 1.0 - a - b + p11
    return np.stack([p00, p01, p10, p11], axis=-1)


def cells_jacobian(x: NDArray, d: ArrayLike):
    """Cells and their derivatives with respect to ``(u1, u2, nu)``.

    Returns ``(cells, J)`` with ``cells`` of shape ``(..., k, 4)`` and ``J`` of
    shape ``(..., k, 4, 3)``.
    """
    x = np.asarray(x, dtype=float)
    d = np.atleast_1d(np.asarray(d, dtype=float))
    nu = x[..., 4:5]
    a, b = _margins(x, d)
    A = a * (1.0 - a)
    B = b * (1.0 - b)
    A1 = A * (1.0 - 2.0 * a)
    B1 = B * (1.0 - 2.0 * b)
    p11 = a * b + nu * A * B
    d11 = np.stack([A * b + nu * A1 * B, a * B + nu * A * B1, A * B], axis=-1)
    zero = np.zeros_like(A)
    da = np.stack([A, zero, zero], axis=-1)
    db = np.stack([zero, B, zero], axis=-1)
    cells = np.stack([1.0 - a - b + p11, b - p11, a - p11, p11], axis=-1)
    J = np.stack([d11 - da - db, db - d11, da - d11, d11], axis=-2)
    return cells, J


def cell_factors(x: NDArray, d: ArrayLike):
    """Scale-free feasibility factors and their parameter derivatives.

    Each cell is a positive product of margins times a factor linear in
    ``nu``, e.g. ``p00 = (1-a)(1-b)(1 + nu*a*b)``, so the cells are
    nonnegative exactly when the factors are.  Returns ``(f, J)`` with shapes
    ``(..., k, 4)`` and ``(..., k, 4, 5)``.
    """
    x = np.asarray(x, dtype=float)
    d = np.atleast_1d(np.asarray(d, dtype=float))
    nu = x[..., 4:5]
    u1 = x[..., 0:1] + x[..., 1:2] * d
    u2 = x[..., 2:3] + x[..., 3:4] * d
    a, abar = expit(u1), expit(-u1)
    b, bbar = expit(u2), expit(-u2)
    A = a * abar
    B = b * bbar
    f = np.stack(
        [1.0 + nu * a * b, 1.0 - nu * a * bbar, 1.0 - nu * abar * b, 1.0 + nu * abar * bbar],
        axis=-1,
    )
    du1 = np.stack([nu * A * b, -nu * A * bbar, nu * A * b, -nu * A * bbar], axis=-1)
    du2 = np.stack([nu * a * B, nu * a * B, -nu * abar * B, -nu * abar * B], axis=-1)
    dnu = np.stack([a * b, -a * bbar, -abar * b, abar * bbar], axis=-1)
    dd = d[:, None]
    J = np.stack([du1, du1 * dd, du2, du2 * dd, dnu * np.ones_like(du1)], axis=-1)
    return f, J


def _check_cells(cells: NDArray, tol: float = CELL_TOL) -> None:
    if np.any(cells < -tol) or np.any(cells > 1.0 + tol):
        bad = float(cells.min()) if np.any(cells < -tol) else float(cells.max())
        raise FeasibilityError(f"cell probability {bad:.3g} outside [0, 1]")


def gumbel_cells(theta: GumbelParams, d: ArrayLike, tol: float = CELL_TOL):
    """Cell probabilities ``(p00, p01, p10, p11)`` at dose(s) ``d``.

    Raises
    ------
    FeasibilityError
        If any cell lies outside ``[-tol, 1 + tol]``.
    """
    scalar = np.ndim(d) == 0
    cells = cells_raw(theta.as_array(), d)
    _check_cells(cells, tol)
    if scalar:
        return tuple(float(c) for c in cells[0])
    return tuple(cells[:, j] for j in range(4))


def gumbel_marginals(theta: GumbelParams, d: ArrayLike):
    return link_prob(theta.efficacy, d), link_prob(theta.toxicity, d)


def gumbel_correlation(theta: GumbelParams, d: ArrayLike):
    d = np.asarray(d, dtype=float)
    u1 = theta.beta_e + theta.gamma_e * d
    u2 = theta.beta_t + theta.gamma_t * d
    r = theta.nu / ((2.0 * np.cosh(u1 / 2.0)) * (2.0 * np.cosh(u2 / 2.0)))
    return float(r) if r.ndim == 0 else r


def check_feasibility(theta: GumbelParams, doses: ArrayLike, tol: float = CELL_TOL) -> bool:
    cells = cells_raw(theta.as_array(), doses)
    return bool(np.all(cells >= -tol) and np.all(cells <= 1.0 + tol))


# ---------------------------------------------------------------------------
# Log-likelihoods
# ---------------------------------------------------------------------------

def _loglik_univ_array(x, d, z, n, link: Link):
    """Batched binomial log-likelihood; ``x`` is ``(..., 2)``, ``z`` is ``(..., k)``."""
    u = x[..., 0:1] + x[..., 1:2] * d
    lp, lq = _log_cdf_pair(u, link)
    clamped = np.any((lp < LOG_FLOOR) | (lq < LOG_FLOOR), axis=-1)
    lp = np.maximum(lp, LOG_FLOOR)
    lq = np.maximum(lq, LOG_FLOOR)
    return np.sum(z * lp + (n - z) * lq, axis=-1), clamped


def _score_univ_array(x, d, z, n, link: Link):
    """Score vector and expected information for the binomial model."""
    u = x[..., 0:1] + x[..., 1:2] * d
    if link is Link.LOGISTIC:
        p = expit(u)
        r = z - n * p
        w = n * p * (1.0 - p)
    else:
        log_phi = -0.5 * u * u - _LOG_SQRT_2PI
        lp, lq = log_ndtr(u), log_ndtr(-u)
        r = z * np.exp(log_phi - lp) - (n - z) * np.exp(log_phi - lq)
        w = n * np.exp(2.0 * log_phi - lp - lq)
    g = np.stack([r.sum(-1), (r * d).sum(-1)], axis=-1)
    wd = w * d
    info = np.stack(
        [
            np.stack([w.sum(-1), wd.sum(-1)], axis=-1),
            np.stack([wd.sum(-1), (wd * d).sum(-1)], axis=-1),
        ],
        axis=-2,
    )
    return g, info


def loglik_univ(params: LinkParams, data: CountTable, *, with_flag: bool = False):
    """Binomial log-likelihood of ``data`` under the curve ``params``.

    Log terms are floored at ``LOG_FLOOR`` instead of returning ``-inf``; pass
    ``with_flag=True`` to also get a boolean telling whether the floor was hit.
    """
    if data.kind is not Kind.UNIVARIATE:
        raise ValueError("loglik_univ needs univariate data")
    value, clamped = _loglik_univ_array(
        params.as_array(), data.design.dose_array, data.counts, data.design.size_array, params.link
    )
    value = float(value)
    return (value, bool(clamped)) if with_flag else value


def grad_loglik_univ(params: LinkParams, data: CountTable) -> NDArray[np.float64]:
    g, _ = _score_univ_array(
        params.as_array(), data.design.dose_array, data.counts, data.design.size_array, params.link
    )
    return g


def _loglik_gumbel_array(x, d, z):
    """Batched Gumbel log-likelihood with floored logs; ``z`` is ``(..., k, 4)``."""
    cells = cells_raw(x, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        logc = np.log(cells)
    logc = np.where(np.isnan(logc), -np.inf, logc)
    clamped = np.any((logc < LOG_FLOOR) & (z > 0), axis=(-1, -2))
    logc = np.maximum(logc, LOG_FLOOR)
    return np.sum(z * logc, axis=(-1, -2)), clamped


def _score_gumbel_array(x, d, z, *, hessian: bool = False):
    """Score, expected information and (optionally) observed Hessian.

    Shapes: ``x`` ``(..., 5)``, ``z`` ``(..., k, 4)``.  Derivatives with respect
    to ``(u1, u2, nu)`` are mapped to the five parameters through the design
    rows ``[1, d]``.
    """
    cells, J = cells_jacobian(x, d)
    safe = np.maximum(cells, 1e-300)
    zr = z / safe
    # derivative in (u1, u2, nu) per dose
    s = np.einsum("...kc,...kcj->...kj", zr, J)
    one = np.ones_like(d)
    g = np.stack(
        [s[..., 0].sum(-1), (s[..., 0] * d).sum(-1), s[..., 1].sum(-1), (s[..., 1] * d).sum(-1),
         s[..., 2].sum(-1)],
        axis=-1,
    )
    n = z.sum(-1)
    # expected information in (u1, u2, nu) per dose: n * J^T diag(1/p) J
    Fk = np.einsum("...kci,...kc,...kcj->...kij", J, n[..., None] / safe, J)
    info = _chain_matrix(Fk, d, one)
    if not hessian:
        return g, info
    H2 = _second_derivs(x, d)
    # observed Hessian: sum_c z_c (d2p_c / p_c - dp_c dp_c^T / p_c^2)
    Hk = np.einsum("...kc,...kcij->...kij", zr, H2) - np.einsum(
        "...kci,...kc,...kcj->...kij", J, zr / safe, J
    )
    return g, info, _chain_matrix(Hk, d, one)


def _chain_matrix(Mk, d, one):
    """Map per-dose 3x3 matrices in ``(u1, u2, nu)`` to the 5x5 parameter space."""
    # rows of the per-dose chain matrix: beta_e, gamma_e, beta_t, gamma_t, nu
    zero = np.zeros_like(d)
    C = np.stack(
        [
            np.stack([one, zero, zero], -1),
            np.stack([d, zero, zero], -1),
            np.stack([zero, one, zero], -1),
            np.stack([zero, d, zero], -1),
            np.stack([zero, zero, one], -1),
        ],
        axis=-2,
    )  # (k, 5, 3)
    return np.einsum("kai,...kij,kbj->...ab", C, Mk, C)


def _second_derivs(x, d):
    """Second derivatives of the four cells in ``(u1, u2, nu)``: ``(..., k, 4, 3, 3)``."""
    nu = x[..., 4:5]
    a, b = _margins(x, d)
    A = a * (1.0 - a)
    B = b * (1.0 - b)
    A1 = A * (1.0 - 2.0 * a)
    B1 = B * (1.0 - 2.0 * b)
    A2 = A1 * (1.0 - 2.0 * a) - 2.0 * A * A
    B2 = B1 * (1.0 - 2.0 * b) - 2.0 * B * B
    h11 = np.empty(a.shape + (3, 3))
    h11[..., 0, 0] = A1 * b + nu * A2 * B
    h11[..., 0, 1] = h11[..., 1, 0] = A * B + nu * A1 * B1
    h11[..., 1, 1] = a * B1 + nu * A * B2
    h11[..., 0, 2] = h11[..., 2, 0] = A1 * B
    h11[..., 1, 2] = h11[..., 2, 1] = A * B1
    h11[..., 2, 2] = 0.0
    ha = np.zeros_like(h11)
    ha[..., 0, 0] = A1
    hb = np.zeros_like(h11)
    hb[..., 1, 1] = B1
    return np.stack([h11 - ha - hb, hb - h11, ha - h11, h11], axis=-3)


def loglik_gumbel(theta: GumbelParams, data: CountTable, *, with_flag: bool = False):
    """Multinomial log-likelihood of bivariate cell counts under ``theta``.

    Raises
    ------
    FeasibilityError
        If ``theta`` is infeasible at a design dose.
    """
    if data.kind is not Kind.BIVARIATE:
        raise ValueError("loglik_gumbel needs bivariate data")
    d = data.design.dose_array
    _check_cells(cells_raw(theta.as_array(), d))
    value, clamped = _loglik_gumbel_array(theta.as_array(), d, data.counts)
    value = float(value)
    return (value, bool(clamped)) if with_flag else value


def grad_loglik_gumbel(theta: GumbelParams, data: CountTable) -> NDArray[np.float64]:
    g, _ = _score_gumbel_array(theta.as_array(), data.design.dose_array, data.counts)
    return g


# ---------------------------------------------------------------------------
# Deviation functionals
# ---------------------------------------------------------------------------

def max_abs_deviation(
    curve_a: Callable[[NDArray], NDArray],
    curve_b: Callable[[NDArray], NDArray],
    grid: ArrayLike,
) -> DeviationResult:
    """Hard maximum of ``|A(d) - B(d)|`` over grid nodes.

    Ties go to the smallest dose.
    """
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    diff = np.abs(np.asarray(curve_a(grid), dtype=float) - np.asarray(curve_b(grid), dtype=float))
    i = int(np.argmax(diff))
    return DeviationResult(float(diff[i]), float(grid[i]), grid)


def smooth_max(values: ArrayLike, lam: float) -> float:
    """``lam * log(sum(exp(v / lam)))`` evaluated with a max shift."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("values must be nonempty")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    m = v.max()
    return float(m + lam * np.log(np.sum(np.exp((v - m) / lam))))


def smooth_max_weights(values: NDArray, lam: float):
    """Smooth maximum along the last axis together with its softmax gradient."""
    m = values.max(axis=-1, keepdims=True)
    e = np.exp((values - m) / lam)
    s = e.sum(axis=-1, keepdims=True)
    return (m + lam * np.log(s))[..., 0], e / s
