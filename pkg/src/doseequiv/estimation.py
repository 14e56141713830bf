"""Maximum-likelihood fitting, unconstrained and deviation-constrained.

Unconstrained fits use a batched projected Newton ascent so that many
datasets (a full set of bootstrap replicates) are fitted in one vectorized
pass.  Gumbel fits whose optimum sits on the cell-feasibility boundary fall
back to SLSQP with explicit cell constraints.

Constrained fits maximize the joint log-likelihood of two groups subject to
``smooth_max(|eta_A - eta_B|) == epsilon`` over a dose grid, using an
augmented Lagrangian outer loop around L-BFGS-B.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import lsq_linear, minimize

from doseequiv.errors import (
    ConstraintInfeasible,
    FeasibilityError,
    NonConvergence,
    SeparationWarning,
)
from doseequiv.model import (
    CountTable,
    GumbelParams,
    Kind,
    Link,
    LinkParams,
    _loglik_gumbel_array,
    _loglik_univ_array,
    _score_gumbel_array,
    _score_univ_array,
    cell_factors,
    cells_jacobian,
    cells_raw,
    curve_matrix,
    dose_grid,
    smooth_max_weights,
)

BETA_BOUND = 10.0
GAMMA_BOUND = 10.0
NU_BOUND = 4.0
GRAD_TOL = 1e-6
REFINE_FACTOR = 1e-3
STATIONARITY_TOL = 1e-5
CONSTRAINT_TOL = 1e-5
#: Cell factors are held at least this far above zero so the null fit samples cleanly.
FRECHET_MARGIN = 1e-7
LAMBDA_SCHEDULE = (1e-2, 1e-3)

_UNIV_LO = np.array([-BETA_BOUND, -GAMMA_BOUND])
_UNIV_HI = -_UNIV_LO
_GUMBEL_LO = np.array([-BETA_BOUND, -GAMMA_BOUND, -BETA_BOUND, -GAMMA_BOUND, -NU_BOUND])
_GUMBEL_HI = -_GUMBEL_LO


@dataclass(frozen=True)
class FitResult:
    params: LinkParams | GumbelParams
    loglik: float
    converged: bool
    gradient_norm: float
    boundary_flag: bool
    n_iter: int = 0


@dataclass(frozen=True, eq=False)
class BatchFit:
    """Fits of many datasets sharing one design.  Arrays are indexed by dataset."""

    x: NDArray[np.float64]
    loglik: NDArray[np.float64]
    converged: NDArray[np.bool_]
    gradient_norm: NDArray[np.float64]
    boundary: NDArray[np.bool_]
    n_iter: NDArray[np.int64]


@dataclass(frozen=True)
class ConstrainedFitResult:
    params: tuple
    constraint_residual: float
    hard_max_gap: float
    hard_max: float
    loglik: float
    feasible: bool
    stationarity: float
    converged: bool
    multiplier: float
    n_outer: int


# ---------------------------------------------------------------------------
# Batched projected Newton ascent
# ---------------------------------------------------------------------------

def _projected_newton(value, derivs, x0, lo, hi, *, tol=GRAD_TOL, max_iter=100, min_step=0.0):
    """Maximize ``value`` for a batch of independent problems under box bounds.

    ``value(x, rows)`` returns objective values (``-inf`` when infeasible) for
    the parameter rows ``x`` belonging to problems ``rows``; ``derivs(x, rows)``
    returns the ascent gradient and a positive definite curvature matrix.
    Rows whose accepted step length falls below ``min_step`` are abandoned
    as not converged.
    """
    x = np.array(x0, dtype=float)
    B, p = x.shape
    lo = np.broadcast_to(lo, (p,))
    hi = np.broadcast_to(hi, (p,))
    pinned = lo == hi
    f = value(x, np.arange(B))
    done = np.zeros(B, dtype=bool)
    conv = np.zeros(B, dtype=bool)
    gnorm = np.full(B, np.inf)
    iters = np.zeros(B, dtype=np.int64)
    eye = np.eye(p)

    for _ in range(max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        xa = x[act]
        g, C = derivs(xa, act)
        fixed = pinned | ((xa <= lo) & (g < 0)) | ((xa >= hi) & (g > 0))
        pg = np.where(fixed, 0.0, g)
        gn = np.max(np.abs(pg), axis=1)
        gnorm[act] = gn
        conv[act[gn <= tol]] = True
        # one more quadratic step past the tolerance costs little and buys accuracy
        ok = gn <= tol * REFINE_FACTOR
        done[act[ok]] = True
        keep = ~ok
        act, xa, g, C, fixed, pg = act[keep], xa[keep], g[keep], C[keep], fixed[keep], pg[keep]
        if act.size == 0:
            break
        iters[act] += 1

        mask = fixed[:, :, None] | fixed[:, None, :]
        Cm = np.where(mask, eye, C)
        try:
            step = np.linalg.solve(Cm, pg[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(c, r, rcond=None)[0] for c, r in zip(Cm, pg)])
        desc = np.sum(step * pg, axis=1)
        bad = ~(desc > 0) | ~np.all(np.isfinite(step), axis=1)
        if np.any(bad):
            scale = np.maximum(np.max(np.abs(np.diagonal(C[bad], axis1=1, axis2=2)), axis=1), 1.0)
            step[bad] = pg[bad] / scale[:, None]

        t = np.ones(act.size)
        accepted = np.zeros(act.size, dtype=bool)
        fa = f[act]
        # gains below round-off in f cannot be verified; tolerate that much loss
        slack = 64.0 * np.finfo(float).eps * np.maximum(np.abs(fa), 1.0)
        for _ls in range(40):
            idx = np.flatnonzero(~accepted)
            if idx.size == 0:
                break
            xt = np.clip(xa[idx] + t[idx, None] * step[idx], lo, hi)
            ft = value(xt, act[idx])
            gain = np.sum(g[idx] * (xt - xa[idx]), axis=1)
            good = np.isfinite(ft) & (ft >= fa[idx] + 1e-4 * gain - slack[idx]) & (gain > 0)
            sel = idx[good]
            x[act[sel]] = xt[good]
            f[act[sel]] = ft[good]
            accepted[sel] = True
            t[idx[~good]] *= 0.5
        done[act[~accepted | (t < min_step)]] = True

    boundary = np.any(((x <= lo) | (x >= hi)) & ~pinned, axis=1)
    return x, f, gnorm, conv, boundary, iters


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _wls_line(y, w, d):
    """Weighted least-squares intercept and slope of ``y`` on ``d`` (batched)."""
    sw = w.sum(-1)
    mx = (w * d).sum(-1) / sw
    my = (w * y).sum(-1) / sw
    sxx = (w * (d - mx[..., None]) ** 2).sum(-1)
    sxy = (w * (d - mx[..., None]) * (y - my[..., None])).sum(-1)
    slope = np.where(sxx > 0, sxy / np.where(sxx > 0, sxx, 1.0), 0.0)
    return np.stack([my - slope * mx, slope], axis=-1)


def init_univ(z, n, d, link: Link = Link.LOGISTIC):
    """Empirical-link regression with continuity correction ``(z + 0.5) / (n + 1)``."""
    from scipy.special import logit, ndtri

    z = np.asarray(z, dtype=float)
    p = (z + 0.5) / (n + 1.0)
    if link is Link.LOGISTIC:
        y = logit(p)
        w = n * p * (1.0 - p)
    else:
        y = ndtri(p)
        phi = np.exp(-0.5 * y * y) / np.sqrt(2.0 * np.pi)
        w = n * phi * phi / (p * (1.0 - p))
    return np.clip(_wls_line(y, w, d), _UNIV_LO, _UNIV_HI)


def init_gumbel(z, d, fix_nu: float | None = None):
    """Start values for Gumbel fits; ``z`` has shape ``(..., k, 4)``."""
    z = np.asarray(z, dtype=float)
    n = z.sum(-1)
    xe = init_univ(z[..., 2] + z[..., 3], n, d)
    xt = init_univ(z[..., 1] + z[..., 3], n, d)
    if fix_nu is not None:
        nu = np.full(xe.shape[:-1], float(fix_nu))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            pe = (z[..., 2] + z[..., 3]) / n
            pt = (z[..., 1] + z[..., 3]) / n
            den = np.sqrt(pe * (1 - pe) * pt * (1 - pt))
            r = np.where(den > 0, (z[..., 3] / n - pe * pt) / den, 0.0)
        a = curve_matrix(xe, d)
        b = curve_matrix(xt, d)
        # invert corr = nu * sqrt(a(1-a) b(1-b)) at each dose
        nu_k = r / np.sqrt(a * (1 - a) * b * (1 - b))
        nu = np.clip((n * nu_k).sum(-1) / n.sum(-1), -NU_BOUND, NU_BOUND)
    x = np.concatenate([xe, xt, nu[..., None]], axis=-1)
    if fix_nu is None:
        # shrink nu toward independence until strictly feasible at the design doses
        for _ in range(60):
            bad = np.any(cells_raw(x, d) <= 0, axis=(-1, -2))
            if not np.any(bad):
                break
            x[..., 4] = np.where(bad, 0.5 * x[..., 4], x[..., 4])
        x[..., 4] = np.where(np.any(cells_raw(x, d) <= 0, axis=(-1, -2)), 0.0, x[..., 4])
    return x


# ---------------------------------------------------------------------------
# Univariate fits
# ---------------------------------------------------------------------------

def fit_univ_batch(z, design, link: Link = Link.LOGISTIC, x0=None) -> BatchFit:
    """Fit the binomial curve to each row of ``z`` (shape ``(B, k)``)."""
    link = Link(link)
    d = design.dose_array
    n = design.size_array.astype(float)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    x0 = init_univ(z, n, d, link) if x0 is None else np.atleast_2d(x0)
    x, f, gn, conv, bnd, it = _projected_newton(
        lambda x, rows: _loglik_univ_array(x, d, z[rows], n, link)[0],
        lambda x, rows: _score_univ_array(x, d, z[rows], n, link),
        x0, _UNIV_LO, _UNIV_HI,
    )
    return BatchFit(x, f, conv, gn, bnd, it)


def fit_mle_univ(data: CountTable, link: Link = Link.LOGISTIC) -> FitResult:
    """Maximum-likelihood fit of a logistic or probit dose-response curve.

    Warns
    -----
    SeparationWarning
        If the fit ends on the parameter box boundary.

    Raises
    ------
    NonConvergence
        If the first-order tolerance is not reached.
    """
    if data.kind is not Kind.UNIVARIATE:
        raise ValueError("fit_mle_univ needs univariate data")
    if data.design.k < 2:
        raise ValueError("at least two distinct doses are required")
    link = Link(link)
    bf = fit_univ_batch(data.counts[None, :], data.design, link)
    res = FitResult(
        LinkParams.from_array(bf.x[0], link),
        float(bf.loglik[0]),
        bool(bf.converged[0]),
        float(bf.gradient_norm[0]),
        bool(bf.boundary[0]),
        int(bf.n_iter[0]),
    )
    if res.boundary_flag:
        warnings.warn("univariate fit stopped on the parameter box boundary", SeparationWarning)
    if not res.converged:
        raise NonConvergence(f"univariate fit: gradient norm {res.gradient_norm:.3g}")
    return res


# ---------------------------------------------------------------------------
# Gumbel fits
# ---------------------------------------------------------------------------

def _gumbel_value_strict(x, d, z):
    """Exact log-likelihood, ``-inf`` outside the feasible region."""
    cells = cells_raw(x, d)
    infeasible = np.any(cells < 0, axis=(-1, -2)) | np.any((cells <= 0) & (z > 0), axis=(-1, -2))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(z > 0, z * np.log(np.where(cells > 0, cells, 1.0)), 0.0)
    out = terms.sum(axis=(-1, -2))
    return np.where(infeasible, -np.inf, out)


def _gumbel_curvature(x, d, z):
    g, info, H = _score_gumbel_array(x, d, z, hessian=True)
    negH = -H
    # observed curvature where positive definite, expected information otherwise
    try:
        ev = np.linalg.eigvalsh(negH)
        pd = ev[:, 0] > 1e-8 * np.maximum(ev[:, -1], 1.0)
    except np.linalg.LinAlgError:
        pd = np.zeros(len(x), dtype=bool)
    tr = np.trace(info, axis1=1, axis2=2)
    info = info + (1e-10 * np.maximum(tr, 1.0))[:, None, None] * np.eye(5)
    C = np.where(pd[:, None, None], negH, info)
    return g, C


def fit_gumbel_batch(z, design, fix_nu: float | None = None, x0=None, polish: bool = True) -> BatchFit:
    """Fit the Gumbel model to each dataset in ``z`` (shape ``(B, k, 4)``)."""
    d = design.dose_array
    z = np.asarray(z, dtype=float)
    if z.ndim == 2:
        z = z[None]
    x0 = init_gumbel(z, d, fix_nu) if x0 is None else np.atleast_2d(np.asarray(x0, dtype=float))
    lo, hi = _GUMBEL_LO.copy(), _GUMBEL_HI.copy()
    if fix_nu is not None:
        lo[4] = hi[4] = float(fix_nu)
        x0 = x0.copy()
        x0[:, 4] = float(fix_nu)
    x, f, gn, conv, bnd, it = _projected_newton(
        lambda x, rows: _gumbel_value_strict(x, d, z[rows]),
        lambda x, rows: _gumbel_curvature(x, d, z[rows]),
        x0, lo, hi, max_iter=30, min_step=2.0**-8,
    )
    stuck = np.flatnonzero(~conv)
    if stuck.size:
        xs, fs, gs, cs, bs, its = _gumbel_barrier_path(x[stuck], d, z[stuck], lo, hi, fix_nu)
        x[stuck], gn[stuck], conv[stuck], bnd[stuck] = xs, gs, cs, bs
        f[stuck] = _gumbel_value_strict(xs, d, z[stuck])
        it[stuck] += its
    if polish:
        for i in np.flatnonzero(~conv):
            xi, fi, gi, ci, bi = _gumbel_slsqp(x[i], d, z[i], lo, hi)
            if ci or fi > f[i]:
                x[i], f[i], gn[i], conv[i], bnd[i] = xi, fi, gi, ci, bi
    return BatchFit(x, f, conv, gn, bnd, it)


#: Pseudo-counts added to empty cells along the barrier path.
BARRIER_PATH = (1e-2, 1e-4, 1e-6)


def _gumbel_barrier_path(x, d, z, lo, hi, fix_nu):
    """Fits whose maximum lies where an empty cell's probability reaches zero.

    A log barrier on the empty cells is the same as giving them a pseudo-count
    ``mu``; following ``mu -> 0`` tracks the boundary maximum from the
    interior.  At the end the barrier gradient equals the KKT residual with
    multipliers ``mu / p`` on the active cells.  The path stops at 1e-6:
    smaller cells lose precision to cancellation in the cell formulas.
    """
    x = x.copy()
    if fix_nu is None:
        # strictly interior start: pull nu toward independence
        for _ in range(60):
            bad = np.any(cells_raw(x, d) <= 1e-12, axis=(-1, -2))
            if not np.any(bad):
                break
            x[bad, 4] *= 0.7
    its = np.zeros(len(x), dtype=np.int64)
    for mu in BARRIER_PATH:
        zb = z + mu * (z == 0)
        x, f, gn, conv, bnd, it = _projected_newton(
            lambda x, rows: _gumbel_value_strict(x, d, zb[rows]),
            lambda x, rows: _gumbel_curvature(x, d, zb[rows]),
            x, lo, hi, max_iter=50,
        )
        its += it
    return x, f, gn, conv, bnd, its


def _gumbel_slsqp(x0, d, z, lo, hi):
    """Fallback for fits whose maximum lies on the cell-feasibility boundary."""
    N = float(z.sum())

    def fun(x):
        v, _ = _loglik_gumbel_array(x, d, z)
        g, _ = _score_gumbel_array(x, d, z)
        return -v / N, -g / N

    def cons(x):
        return cells_raw(x, d).ravel()

    def cons_jac(x):
        return _cells_param_jacobian(x, d).reshape(-1, 5)

    bounds = list(zip(lo, hi))
    res = minimize(
        fun, x0, jac=True, method="SLSQP", bounds=bounds,
        constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
        options={"maxiter": 500, "ftol": 1e-14},
    )
    x = np.clip(res.x, lo, hi)
    f = float(_gumbel_value_strict(x, d, z))
    if not np.isfinite(f):
        return x, -np.inf, np.inf, False, False
    g, _ = _score_gumbel_array(x, d, z)
    cells = cells_raw(x, d).ravel()
    Jc = _cells_param_jacobian(x, d).reshape(-1, 5)
    active = cells <= 1e-7
    cols = [Jc[active].T]
    cols.append(np.eye(5)[:, (x <= lo) & (lo < hi)])
    cols.append(-np.eye(5)[:, (x >= hi) & (lo < hi)])
    pinned = lo == hi
    A = np.hstack(cols)
    g_free = np.where(pinned, 0.0, g)
    A = np.where(pinned[:, None], 0.0, A)
    # first-order residual: min ||g + A mu|| over mu >= 0
    if A.shape[1]:
        sol = lsq_linear(A, -g_free, bounds=(0, np.inf))
        resid = float(np.max(np.abs(g_free + A @ sol.x)))
    else:
        resid = float(np.max(np.abs(g_free)))
    boundary = bool(np.any(((x <= lo) | (x >= hi)) & ~pinned))
    return x, f, resid, resid <= GRAD_TOL * max(1.0, N), boundary


def _cells_param_jacobian(x, d):
    """Derivatives of cells with respect to the five parameters: ``(..., k, 4, 5)``."""
    _, J = cells_jacobian(x, d)
    dd = np.asarray(d, dtype=float)[:, None]
    return np.stack(
        [J[..., 0], J[..., 0] * dd, J[..., 1], J[..., 1] * dd, J[..., 2]], axis=-1
    )


def fit_mle_gumbel(data: CountTable, fix_nu: float | None = None) -> FitResult:
    """Maximum-likelihood fit of the Gumbel model, feasible at the design doses.

    ``fix_nu`` holds the association parameter at a fixed value.
    """
    if data.kind is not Kind.BIVARIATE:
        raise ValueError("fit_mle_gumbel needs bivariate data")
    if data.design.k < 2:
        raise ValueError("at least two distinct doses are required")
    d = data.design.dose_array
    x0 = init_gumbel(data.counts[None].astype(float), d, fix_nu)
    if not np.isfinite(_gumbel_value_strict(x0, d, data.counts[None])[0]):
        raise FeasibilityError("no feasible starting point for the Gumbel fit")
    bf = fit_gumbel_batch(data.counts[None], data.design, fix_nu, x0=x0)
    res = FitResult(
        GumbelParams.from_array(bf.x[0]),
        float(bf.loglik[0]),
        bool(bf.converged[0]),
        float(bf.gradient_norm[0]),
        bool(bf.boundary[0]),
        int(bf.n_iter[0]),
    )
    if res.boundary_flag:
        warnings.warn("Gumbel fit stopped on the parameter box boundary", SeparationWarning)
    if not res.converged:
        raise NonConvergence(f"Gumbel fit: first-order residual {res.gradient_norm:.3g}")
    return res


def fit_mle(data: CountTable, link: Link = Link.LOGISTIC) -> FitResult:
    if data.kind is Kind.UNIVARIATE:
        return fit_mle_univ(data, link)
    return fit_mle_gumbel(data)


# ---------------------------------------------------------------------------
# Constrained fits
# ---------------------------------------------------------------------------

_ENDPOINT_SLICES = {
    Kind.UNIVARIATE: {"efficacy": slice(0, 2)},
    Kind.BIVARIATE: {"efficacy": slice(0, 2), "toxicity": slice(2, 4)},
}


def _curve_density(x2, d, link):
    u = x2[0] + x2[1] * d
    if link is Link.LOGISTIC:
        from scipy.special import expit

        p = expit(u)
        return p, p * (1.0 - p)
    from scipy.special import ndtr

    return ndtr(u), np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


#: Below this cell probability the log is continued by its quadratic Taylor expansion.
LOG_EXTENSION = 1e-6


def _extended_log(p, tau=LOG_EXTENSION):
    """``log p`` and its derivative, smoothly continued below ``tau``.

    A floored log is a cliff that stalls quasi-Newton line searches when a
    trial step leaves the feasible region; the quadratic continuation keeps
    the objective finite and smooth there.
    """
    q = np.maximum(p, tau)
    r = np.minimum(p - tau, 0.0)
    value = np.log(q) + r / tau - 0.5 * (r / tau) ** 2
    deriv = np.where(p >= tau, 1.0 / q, 1.0 / tau - r / tau**2)
    return value, deriv


def _gumbel_loglik_extended(x, d, z):
    cells, J = cells_jacobian(x, d)
    value, deriv = _extended_log(cells)
    w = np.where(z > 0, z * deriv, 0.0)
    gu = np.einsum("kc,kcj->kj", w, J)
    grad = np.array([gu[:, 0].sum(), gu[:, 0] @ d, gu[:, 1].sum(), gu[:, 1] @ d, gu[:, 2].sum()])
    return float(np.sum(np.where(z > 0, z * value, 0.0))), grad


class _ConstrainedProblem:
    """Objective, equality constraint and Fréchet inequalities for two groups."""

    def __init__(self, data_a, data_b, endpoint, epsilon, grid, link):
        self.kind = data_a.kind
        self.link = Link(link)
        self.p = 2 if self.kind is Kind.UNIVARIATE else 5
        self.sl = _ENDPOINT_SLICES[self.kind][endpoint]
        self.eps = float(epsilon)
        self.grid = np.asarray(grid, dtype=float)
        self.data = (data_a, data_b)
        self.N = float(data_a.design.size_array.sum() + data_b.design.size_array.sum())
        if self.kind is Kind.BIVARIATE:
            self.nodes = [
                np.union1d(self.grid, dt.design.dose_array) for dt in self.data
            ]
        self.lo = np.tile(_UNIV_LO if self.p == 2 else _GUMBEL_LO, 2)
        self.hi = -self.lo

    def split(self, x):
        return x[: self.p], x[self.p :]

    def loglik(self, x):
        total = 0.0
        for xg, dt in zip(self.split(x), self.data):
            d = dt.design.dose_array
            if self.kind is Kind.UNIVARIATE:
                total += float(_loglik_univ_array(xg, d, dt.counts, dt.design.size_array, self.link)[0])
            else:
                total += float(_loglik_gumbel_array(xg, d, dt.counts)[0])
        return total

    def objective(self, x):
        """Negative mean log-likelihood and gradient."""
        val, grad = 0.0, []
        for xg, dt in zip(self.split(x), self.data):
            d = dt.design.dose_array
            if self.kind is Kind.UNIVARIATE:
                n = dt.design.size_array
                val += float(_loglik_univ_array(xg, d, dt.counts, n, self.link)[0])
                grad.append(_score_univ_array(xg, d, dt.counts, n, self.link)[0])
            else:
                v, gr = _gumbel_loglik_extended(xg, d, dt.counts)
                val += v
                grad.append(gr)
        return -val / self.N, -np.concatenate(grad) / self.N

    def deviation(self, x, lam):
        """Smooth maximum of ``|eta_A - eta_B|`` on the grid, its gradient and the hard max."""
        xa, xb = self.split(x)
        pa, da = _curve_density(xa[self.sl], self.grid, self.link)
        pb, db = _curve_density(xb[self.sl], self.grid, self.link)
        diff = pa - pb
        sm, w = smooth_max_weights(np.abs(diff), lam)
        ws = w * np.sign(diff)
        grad = np.zeros(2 * self.p)
        ia = np.arange(self.p)[self.sl]
        grad[ia] = [np.sum(ws * da), np.sum(ws * da * self.grid)]
        grad[ia + self.p] = [-np.sum(ws * db), -np.sum(ws * db * self.grid)]
        return float(sm), grad, float(np.max(np.abs(diff)))

    def inequalities(self, x):
        """Cell factors at every node less the margin (must be >= 0); empty for univariate data."""
        if self.kind is Kind.UNIVARIATE:
            return np.zeros(0)
        return np.concatenate(
            [cell_factors(xg, nd)[0].ravel() for xg, nd in zip(self.split(x), self.nodes)]
        ) - FRECHET_MARGIN

    def inequality_vjp(self, x, c):
        """``sum_j c_j * grad g_j(x)``."""
        if self.kind is Kind.UNIVARIATE:
            return np.zeros(2 * self.p)
        out, start = [], 0
        for xg, nd in zip(self.split(x), self.nodes):
            m = nd.size * 4
            J = cell_factors(xg, nd)[1].reshape(m, 5)
            out.append(c[start : start + m] @ J)
            start += m
        return np.concatenate(out)


def _stationarity(prob, x, gf, gh, lam_eq, sig):
    r = gf - lam_eq * gh - prob.inequality_vjp(x, sig)
    fixed = ((x <= prob.lo) & (r > 0)) | ((x >= prob.hi) & (r < 0))
    return float(np.max(np.abs(np.where(fixed, 0.0, r))))


def fit_constrained(
    data_a: CountTable,
    data_b: CountTable,
    endpoint: str = "efficacy",
    epsilon: float = 0.2,
    grid=None,
    lambdas: Sequence[float] = LAMBDA_SCHEDULE,
    link: Link = Link.LOGISTIC,
    start: tuple | None = None,
    max_outer: int = 25,
) -> ConstrainedFitResult:
    """Jointly maximize both groups' log-likelihoods on the deviation boundary.

    The constraint is ``smooth_max(|eta_A(d) - eta_B(d)|) == epsilon`` over
    ``grid`` for the selected endpoint; bivariate fits also keep every cell
    probability nonnegative at every grid node and design dose.  The smoothing
    parameter runs through ``lambdas``, each stage warm-started from the last.

    Raises
    ------
    ConstraintInfeasible
        If the final constraint residual exceeds ``CONSTRAINT_TOL``.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if data_a.kind is not data_b.kind:
        raise ValueError("both groups must have the same data kind")
    if grid is None:
        lo = min(data_a.design.range[0], data_b.design.range[0])
        hi = max(data_a.design.range[1], data_b.design.range[1])
        grid = dose_grid((lo, hi))
    prob = _ConstrainedProblem(data_a, data_b, endpoint, epsilon, grid, link)
    if start is None:
        start = (fit_mle(data_a, link).params, fit_mle(data_b, link).params)
    x = np.concatenate([np.asarray(s.as_array(), dtype=float) for s in start])
    x = np.clip(x, prob.lo, prob.hi)
    if prob.deviation(x, lambdas[0])[2] < 1e-6:
        # |.| has zero subgradient when the curves coincide; nudge them apart
        x[prob.p + prob.sl.start] += 1e-2

    lam_eq = 0.0
    sig = np.zeros(prob.inequalities(x).size)
    n_outer = 0
    bounds = list(zip(prob.lo, prob.hi))
    for lam in lambdas:
        # a large penalty carried into a new stage stalls the first quasi-Newton step
        mu = 10.0
        prev_viol = np.inf
        for _ in range(max_outer):
            n_outer += 1

            def phi(z, lam_eq=lam_eq, sig=sig, mu=mu, lam=lam):
                f, gf = prob.objective(z)
                h, gh, _ = prob.deviation(z, lam)
                h -= prob.eps
                val = f - lam_eq * h + 0.5 * mu * h * h
                grad = gf + (mu * h - lam_eq) * gh
                if sig.size:
                    g = prob.inequalities(z)
                    s = np.maximum(0.0, sig - mu * g)
                    val += (np.sum(s * s) - np.sum(sig * sig)) / (2.0 * mu)
                    grad = grad - prob.inequality_vjp(z, s)
                return val, grad

            res = minimize(
                phi, x, jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-10, "maxcor": 20},
            )
            x = np.clip(res.x, prob.lo, prob.hi)
            h, gh, _ = prob.deviation(x, lam)
            h -= prob.eps
            g = prob.inequalities(x)
            viol = max(abs(h), float(np.max(-g, initial=0.0)))
            lam_eq -= mu * h
            if sig.size:
                sig = np.maximum(0.0, sig - mu * g)
            _, gf = prob.objective(x)
            stat = _stationarity(prob, x, gf, gh, lam_eq, sig)
            if viol <= 1e-8 and stat <= STATIONARITY_TOL * 0.1:
                break
            if viol > 0.25 * prev_viol:
                mu = min(mu * 10.0, 1e12)
            prev_viol = viol

    lam = lambdas[-1]
    sm, gh, hard = prob.deviation(x, lam)
    g = prob.inequalities(x)
    feasible = bool(np.all(g >= -FRECHET_MARGIN))
    _, gf = prob.objective(x)
    stat = _stationarity(prob, x, gf, gh, lam_eq, sig)
    resid = abs(sm - prob.eps)
    if resid > CONSTRAINT_TOL or not feasible:
        raise ConstraintInfeasible(
            f"deviation constraint residual {resid:.3g}, feasible={feasible}"
        )
    xa, xb = prob.split(x)
    if prob.kind is Kind.UNIVARIATE:
        params = (LinkParams.from_array(xa, prob.link), LinkParams.from_array(xb, prob.link))
    else:
        params = (GumbelParams.from_array(xa), GumbelParams.from_array(xb))
    return ConstrainedFitResult(
        params=params,
        constraint_residual=resid,
        hard_max_gap=abs(hard - prob.eps),
        hard_max=hard,
        loglik=prob.loglik(x),
        feasible=feasible,
        stationarity=stat,
        converged=stat <= STATIONARITY_TOL,
        multiplier=lam_eq,
        n_outer=n_outer,
    )


def select_null_params(unconstrained, constrained, d_hat: float, epsilon: float):
    """Parameters for bootstrap generation: the fitted pair if it already lies in the null."""
    if d_hat >= epsilon:
        return tuple(getattr(u, "params", u) for u in unconstrained)
    if constrained is None:
        raise ValueError("a constrained fit is required when d_hat < epsilon")
    return tuple(constrained.params)
