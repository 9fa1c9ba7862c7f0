"""Dose-response models: Emax, quadratic B-spline and cell means.

All three families share the mean structure ``beta0 + delta(d, theta)`` with
``delta(0, theta) = 0``.  Because the mean depends on the observation only
through its dose, and doses take a handful of levels, every fit can be
computed from per-dose-level summaries (count, mean, within-level sum of
squares).  The split search in :mod:`mobdose.tree` exploits this to fit
hundreds of candidate child models in one vectorized call.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import BSpline, CubicSpline


class FitError(ValueError):
    """Raised when a dose-response model cannot be fitted to a subset."""


class DomainError(ValueError):
    """Raised when a dose lies outside ``[0, d_max]``."""


class Family(str, enum.Enum):
    EMAX = "emax"
    BSPLINE = "bspline"
    MEANS = "means"


# Emax ED50 bounds as fractions of the maximum dose.
EMAX_BOUNDS = (0.001, 1.5)
EMAX_GRID_SIZE = 50
GOLDEN_RTOL = 1e-8
MED_GRID_SIZE = 1001

_DOSE_ATOL = 1e-9
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# Model specs and data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoseResponseSpec:
    """A dose-response family together with the design's dose levels.

    Parameters
    ----------
    family : Family
        Functional form of the treatment effect.
    dose_levels : tuple of float
        Strictly increasing distinct doses, the first of which is placebo (0).
    degree : int
        B-spline degree (only 2 is supported).
    interior_knots : tuple of float
        B-spline interior knots.  Defaults to the median of the active
        (non-placebo) dose levels.
    """

    family: Family
    dose_levels: tuple[float, ...]
    degree: int = 2
    interior_knots: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        family = Family(self.family)
        levels = tuple(float(x) for x in self.dose_levels)
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "dose_levels", levels)
        if len(levels) < 2:
            raise ValueError("need placebo plus at least one active dose level")
        if levels[0] != 0.0:
            raise ValueError(f"first dose level must be 0 (placebo), got {levels[0]}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("dose levels must be strictly increasing")
        if family is Family.BSPLINE:
            knots = tuple(float(k) for k in self.interior_knots)
            if not knots:
                knots = (float(np.median(levels[1:])),)
            if self.degree != 2:
                raise ValueError("only quadratic B-splines are supported")
            if len(knots) != 1 or not 0.0 < knots[0] < levels[-1]:
                raise ValueError("B-spline needs exactly one interior knot inside (0, d_max)")
            object.__setattr__(self, "interior_knots", knots)
        else:
            object.__setattr__(self, "interior_knots", ())

    @classmethod
    def emax(cls, dose_levels) -> DoseResponseSpec:
        return cls(Family.EMAX, tuple(dose_levels))

    @classmethod
    def bspline(cls, dose_levels, knot: float | None = None) -> DoseResponseSpec:
        return cls(Family.BSPLINE, tuple(dose_levels),
                   interior_knots=() if knot is None else (knot,))

    @classmethod
    def means(cls, dose_levels) -> DoseResponseSpec:
        return cls(Family.MEANS, tuple(dose_levels))

    @property
    def d_max(self) -> float:
        return self.dose_levels[-1]

    @property
    def n_levels(self) -> int:
        return len(self.dose_levels)

    @property
    def n_theta(self) -> int:
        if self.family is Family.EMAX:
            return 2
        if self.family is Family.BSPLINE:
            return 3
        return self.n_levels - 1

    @property
    def n_params(self) -> int:
        """Number of mean parameters (intercept plus theta); sigma excluded."""
        return 1 + self.n_theta

    @property
    def param_names(self) -> tuple[str, ...]:
        return ("beta0",) + tuple(f"theta{j + 1}" for j in range(self.n_theta))

    @property
    def knot_vector(self) -> NDArray:
        k = self.degree
        return np.r_[np.zeros(k + 1), self.interior_knots, np.full(k + 1, self.d_max)]

    def level_index(self, d) -> NDArray[np.intp]:
        """Map doses to indices into ``dose_levels``; raise if a dose is not a level."""
        d = np.asarray(d, dtype=float)
        levels = np.asarray(self.dose_levels)
        idx = np.clip(np.searchsorted(levels, d), 0, len(levels) - 1)
        lower = np.clip(idx - 1, 0, len(levels) - 1)
        closer = np.abs(levels[lower] - d) < np.abs(levels[idx] - d)
        idx = np.where(closer, lower, idx)
        bad = np.abs(levels[idx] - d) > _DOSE_ATOL * max(1.0, self.d_max)
        if np.any(bad):
            raise ValueError(f"dose {d[bad][0]!r} is not one of the dose levels {self.dose_levels}")
        return idx


@dataclass(frozen=True)
class TrialData:
    """Responses, doses and partitioning covariates for one trial.

    Categorical covariates are stored as integer codes in ``Z``; the labels
    for code ``c`` of column ``j`` are ``levels[j][c]``.
    """

    y: NDArray
    d: NDArray
    Z: NDArray
    names: tuple[str, ...] = ()
    categorical: tuple[bool, ...] = ()
    levels: tuple[tuple[str, ...] | None, ...] = ()

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float)
        d = np.asarray(self.d, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if y.ndim != 1 or d.shape != y.shape or Z.shape[0] != y.shape[0]:
            raise ValueError("y, d and the rows of Z must share length n")
        J = Z.shape[1]
        names = tuple(self.names) or tuple(f"z{j + 1}" for j in range(J))
        categorical = tuple(bool(c) for c in self.categorical) or (False,) * J
        levels = tuple(self.levels) or (None,) * J
        if not len(names) == len(categorical) == len(levels) == J:
            raise ValueError("covariate metadata must have one entry per column of Z")
        for j in range(J):
            if categorical[j]:
                codes = Z[:, j]
                if np.any(codes != np.round(codes)) or np.any(codes < 0):
                    raise ValueError(f"categorical covariate {names[j]!r} must hold integer codes")
                if levels[j] is None:
                    n_codes = int(codes.max()) + 1 if len(codes) else 0
                    levels = levels[:j] + (tuple(str(c) for c in range(n_codes)),) + levels[j + 1:]
        for arr in (y, d, Z):
            arr.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "categorical", categorical)
        object.__setattr__(self, "levels", levels)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.Z.shape[1]

    def subset(self, rows) -> TrialData:
        return TrialData(self.y[rows], self.d[rows], self.Z[rows],
                         self.names, self.categorical, self.levels)


@dataclass(frozen=True, eq=False)
class FittedDoseModel:
    """A fitted dose-response model.

    ``score_matrix`` holds the per-observation partial derivatives of the
    Gaussian negative log-likelihood with respect to ``(beta0, theta)``
    evaluated at the estimate; it is ``None`` for models restored from a
    tree document.
    """

    spec: DoseResponseSpec
    beta0: float
    theta: NDArray
    sigma: float
    rss: float
    n: int
    score_matrix: NDArray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        theta = np.array(self.theta, dtype=float)
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        if self.score_matrix is not None:
            self.score_matrix.flags.writeable = False

    @property
    def params(self) -> NDArray:
        return np.r_[self.beta0, self.theta]

    @property
    def df(self) -> int:
        return self.n - self.spec.n_params

    @property
    def sigma_ml(self) -> float:
        return math.sqrt(self.rss / self.n)

    def effect(self, d) -> NDArray:
        """Treatment effect over placebo at doses ``d`` (vectorized)."""
        return effect_curve(self.spec, self.theta, d)

    def predict(self, d) -> NDArray:
        return self.beta0 + self.effect(d)


# ---------------------------------------------------------------------------
# Basis functions and effect curves
# ---------------------------------------------------------------------------

def _check_domain(d: NDArray, d_max: float) -> None:
    tol = _DOSE_ATOL * max(1.0, d_max)
    if np.any(~np.isfinite(d)) or np.any(d < -tol) or np.any(d > d_max + tol):
        raise DomainError(f"dose outside [0, {d_max}]")


def bspline_basis(d, spec: DoseResponseSpec) -> NDArray:
    """Quadratic B-spline basis with the placebo-anchored function dropped.

    Returns an array of shape ``d.shape + (3,)``; every row is zero at d = 0.
    """
    if spec.family is not Family.BSPLINE:
        raise ValueError("bspline_basis requires a B-spline DoseResponseSpec")
    d = np.asarray(d, dtype=float)
    _check_domain(d, spec.d_max)
    x = np.clip(d.ravel(), 0.0, spec.d_max)
    full = BSpline.design_matrix(x, spec.knot_vector, spec.degree).toarray()
    return full[:, 1:].reshape(d.shape + (full.shape[1] - 1,))


def emax_curve(d, theta1, theta2):
    return theta1 * d / (theta2 + d)


def _level_effects(spec: DoseResponseSpec, theta: NDArray) -> NDArray:
    return np.r_[0.0, theta]


def effect_curve(spec: DoseResponseSpec, theta, d) -> NDArray:
    d = np.asarray(d, dtype=float)
    _check_domain(d, spec.d_max)
    theta = np.asarray(theta, dtype=float)
    if spec.family is Family.EMAX:
        return emax_curve(d, theta[0], theta[1])
    if spec.family is Family.BSPLINE:
        return bspline_basis(d, spec) @ theta
    values = _level_effects(spec, theta)
    interp = CubicSpline(np.asarray(spec.dose_levels), values, bc_type="natural")
    out = interp(np.clip(d, 0.0, spec.d_max))
    # exact at the observed levels
    hit = np.isclose(d[..., None], np.asarray(spec.dose_levels), rtol=0.0,
                     atol=_DOSE_ATOL * max(1.0, spec.d_max))
    if np.any(hit):
        out = np.where(hit.any(-1), values[np.argmax(hit, axis=-1)], out)
    return out


def level_design(spec: DoseResponseSpec) -> NDArray:
    """Design matrix ``(L, P)`` of a linear family evaluated at each dose level."""
    L = spec.n_levels
    if spec.family is Family.BSPLINE:
        basis = bspline_basis(np.asarray(spec.dose_levels), spec)
    elif spec.family is Family.MEANS:
        basis = np.eye(L)[:, 1:]
    else:
        raise ValueError("Emax is not linear in its parameters")
    return np.column_stack([np.ones(L), basis])


def mean_gradient(spec: DoseResponseSpec, theta, d) -> NDArray:
    """Gradient of the mean ``beta0 + delta(d, theta)`` w.r.t. ``(beta0, theta)``."""
    d = np.asarray(d, dtype=float)
    if spec.family is Family.EMAX:
        t1, t2 = theta
        denom = t2 + d
        return np.column_stack([np.ones_like(d), d / denom, -t1 * d / denom**2])
    return level_design(spec)[spec.level_index(d)]


# ---------------------------------------------------------------------------
# Grouped (per-dose-level) fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupedFit:
    """Vectorized fit results for a batch of subsets.

    Arrays have leading dimension ``B``; entries where ``ok`` is False are
    undefined (rank deficient or too small subsets).
    """

    beta0: NDArray
    theta: NDArray
    rss: NDArray
    n: NDArray
    ok: NDArray


def level_summaries(spec: DoseResponseSpec, y, d, center: float = 0.0):
    """Per-level count, sum and sum of squares of ``y - center``."""
    idx = spec.level_index(d)
    yc = np.asarray(y, dtype=float) - center
    L = spec.n_levels
    counts = np.bincount(idx, minlength=L).astype(float)
    sums = np.bincount(idx, weights=yc, minlength=L)
    sumsq = np.bincount(idx, weights=yc * yc, minlength=L)
    return counts, sums, sumsq


def _from_summaries(counts, sums, sumsq):
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    sums = np.atleast_2d(np.asarray(sums, dtype=float))
    sumsq = np.atleast_2d(np.asarray(sumsq, dtype=float))
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.where(counts > 0, counts, 1.0), 0.0)
    within = np.maximum(sumsq - counts * means**2, 0.0).sum(axis=1)
    return counts, means, within


def _emax_profile(levels, w, m, theta2):
    """Closed-form (beta0, theta1) and between-level RSS for fixed ED50 values.

    ``w``, ``m`` are ``(B, L)``; ``theta2`` is ``(B, G)``.  Returns arrays of
    shape ``(B, G)``.
    """
    g = levels / (theta2[..., None] + levels)                    # (B, G, L)
    W = w.sum(axis=1)[:, None]                                   # (B, 1)
    wm = (w * m).sum(axis=1)[:, None] / W
    mc = (m - wm)[:, None, :]                                    # (B, 1, L)
    gbar = (w[:, None, :] * g).sum(axis=2) / W                   # (B, G)
    gc = g - gbar[..., None]
    sgg = (w[:, None, :] * gc * gc).sum(axis=2)
    sgm = (w[:, None, :] * gc * mc).sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta1 = sgm / sgg
    beta0 = wm - theta1 * gbar
    resid = mc - theta1[..., None] * gc
    between = (w[:, None, :] * resid * resid).sum(axis=2)
    return beta0, theta1, between


def fit_emax_grouped(spec: DoseResponseSpec, counts, sums, sumsq) -> GroupedFit:
    """Profile least-squares Emax fit for a batch of dose-level summaries.

    The two linear parameters are profiled out.  ED50 is located by a grid
    of log-spaced values inside the bounds followed by golden-section
    refinement between the neighbours of the best grid point.
    """
    counts, means, within = _from_summaries(counts, sums, sumsq)
    B = counts.shape[0]
    levels = np.asarray(spec.dose_levels)
    n = counts.sum(axis=1)
    present = counts > 0
    ok = (present.sum(axis=1) >= 2) & (n >= spec.n_params + 1)

    lo, hi = EMAX_BOUNDS[0] * spec.d_max, EMAX_BOUNDS[1] * spec.d_max
    grid = np.geomspace(lo, hi, EMAX_GRID_SIZE)
    w = np.where(ok[:, None], counts, 1.0)       # dummy weights keep failed rows finite
    m = np.where(ok[:, None], means, 0.0)
    _, _, between = _emax_profile(levels, w, m, np.broadcast_to(grid, (B, grid.size)))
    between = np.where(np.isfinite(between), between, np.inf)
    best = np.argmin(between, axis=1)
    a = grid[np.maximum(best - 1, 0)]
    b = grid[np.minimum(best + 1, grid.size - 1)]

    def objective(t2):
        return _emax_profile(levels, w, m, t2[:, None])[2][:, 0]

    c = b - _INVPHI * (b - a)
    e = a + _INVPHI * (b - a)
    fc, fe = objective(c), objective(e)
    while np.any(b - a > GOLDEN_RTOL * (a + b) / 2):
        left = fc <= fe                           # keep [a, e], else [c, b]
        a, b = np.where(left, a, c), np.where(left, e, b)
        c_new = np.where(left, b - _INVPHI * (b - a), e)
        e_new = np.where(left, c, a + _INVPHI * (b - a))
        fc, fe = (np.where(left, objective(c_new), fe),
                  np.where(left, fc, objective(e_new)))
        c, e = c_new, e_new
    theta2 = (a + b) / 2
    f_mid = objective(theta2)
    grid_best = grid[best]
    use_grid = between[np.arange(B), best] < f_mid
    theta2 = np.where(use_grid, grid_best, theta2)

    beta0, theta1, between_fin = (x[:, 0] for x in _emax_profile(levels, w, m, theta2[:, None]))
    ok &= np.isfinite(theta1)
    rss = within + between_fin
    return GroupedFit(beta0, np.column_stack([theta1, theta2]), rss, n, ok)


def fit_linear_grouped(spec: DoseResponseSpec, counts, sums, sumsq) -> GroupedFit:
    """Weighted least squares on level means via a batched SVD.

    Equivalent to ordinary least squares on the individual observations.
    """
    counts, means, within = _from_summaries(counts, sums, sumsq)
    X = level_design(spec)
    P = X.shape[1]
    n = counts.sum(axis=1)
    sw = np.sqrt(counts)
    A = sw[:, :, None] * X[None, :, :]                           # (B, L, P)
    rhs = sw * means
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    tol = s[:, :1] * max(A.shape[1:]) * np.finfo(float).eps * 1e3
    rank = (s > tol).sum(axis=1)
    ok = (rank == P) & (n >= P + 1)
    s_inv = np.where(s > tol, 1.0 / np.where(s > tol, s, 1.0), 0.0)
    coef = np.einsum("bpk,bk,blk,bl->bp", Vt.transpose(0, 2, 1), s_inv, U, rhs)
    resid = rhs - np.einsum("blp,bp->bl", A, coef)
    rss = within + (resid * resid).sum(axis=1)
    return GroupedFit(coef[:, 0], coef[:, 1:], rss, n, ok)


def fit_grouped(spec: DoseResponseSpec, counts, sums, sumsq) -> GroupedFit:
    if spec.family is Family.EMAX:
        return fit_emax_grouped(spec, counts, sums, sumsq)
    return fit_linear_grouped(spec, counts, sums, sumsq)


# ---------------------------------------------------------------------------
# Public fitting API
# ---------------------------------------------------------------------------

def _finish(spec: DoseResponseSpec, y, d, beta0: float, theta: NDArray) -> FittedDoseModel:
    n = y.shape[0]
    resid = y - (beta0 + effect_curve(spec, theta, d))
    rss = float(resid @ resid)
    df = n - spec.n_params
    sigma = math.sqrt(rss / df)
    grad = mean_gradient(spec, theta, d)
    if sigma > 0:
        scores = -(resid[:, None] * grad) / sigma**2
    else:
        scores = np.zeros_like(grad)
    return FittedDoseModel(spec, float(beta0), theta, sigma, rss, n, scores)


def _fit(spec: DoseResponseSpec, y, d) -> FittedDoseModel:
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    if y.shape != d.shape or y.ndim != 1:
        raise ValueError("y and d must be 1-d arrays of equal length")
    if np.unique(spec.level_index(d)).size < 2:
        raise FitError("need at least two distinct dose levels")
    if y.size < spec.n_params + 1:
        raise FitError(f"need at least {spec.n_params + 1} observations, got {y.size}")
    center = float(y.mean())
    res = fit_grouped(spec, *level_summaries(spec, y, d, center))
    if not res.ok[0]:
        raise FitError(f"{spec.family.value} design is rank deficient on this subset "
                       f"(dose levels present: {sorted(set(np.round(d, 6)))})")
    return _finish(spec, y, d, res.beta0[0] + center, res.theta[0])


def fit_emax(y, d, spec: DoseResponseSpec) -> FittedDoseModel:
    """Least-squares Emax fit ``y = beta0 + theta1 * d / (theta2 + d)``.

    ``theta2`` is restricted to ``[0.001, 1.5] * d_max``.
    """
    if spec.family is not Family.EMAX:
        raise ValueError("fit_emax requires an Emax DoseResponseSpec")
    return _fit(spec, y, d)


def fit_linear(y, d, spec: DoseResponseSpec) -> FittedDoseModel:
    """Ordinary least-squares fit of the B-spline or cell-means family."""
    if spec.family is Family.EMAX:
        raise ValueError("fit_linear handles the B-spline and means families only")
    return _fit(spec, y, d)


def fit_model(y, d, spec: DoseResponseSpec) -> FittedDoseModel:
    return _fit(spec, y, d)


def intercept_only(y, d, spec: DoseResponseSpec) -> FittedDoseModel:
    """A zero-effect model (placebo mean everywhere) used as a degenerate fallback."""
    y = np.asarray(y, dtype=float)
    theta = np.zeros(spec.n_theta)
    if spec.family is Family.EMAX:
        theta[1] = spec.d_max
    beta0 = float(y.mean())
    resid = y - beta0
    rss = float(resid @ resid)
    sigma = math.sqrt(rss / max(y.size - 1, 1))
    return FittedDoseModel(spec, beta0, theta, sigma, rss, y.size, None)


# ---------------------------------------------------------------------------
# Derived quantities
# ---------------------------------------------------------------------------

def treatment_effect(model: FittedDoseModel, d):
    """Estimated effect over placebo; scalar in, scalar out."""
    out = model.effect(d)
    return float(out) if np.ndim(out) == 0 else out


def estimate_med(model: FittedDoseModel, relevance: float) -> float | None:
    """Smallest dose in ``[0, d_max]`` whose estimated effect reaches ``relevance``.

    Returns ``None`` if no dose qualifies.
    """
    if relevance <= 0:
        raise ValueError("relevance must be positive")
    spec = model.spec
    if spec.family is Family.EMAX:
        t1, t2 = model.theta
        if t1 <= relevance or t2 <= 0:
            return None
        med = t2 * relevance / (t1 - relevance)
        return float(med) if med <= spec.d_max else None
    grid = np.linspace(0.0, spec.d_max, MED_GRID_SIZE)
    hit = np.nonzero(model.effect(grid) >= relevance)[0]
    return float(grid[hit[0]]) if hit.size else None


def log_likelihood(model: FittedDoseModel, y, d) -> float:
    """Gaussian log-likelihood of ``(y, d)`` with the ML residual SD of the fit."""
    y = np.asarray(y, dtype=float)
    var = model.rss / model.n
    if var <= 0:
        var = np.finfo(float).tiny
    resid = y - model.predict(d)
    return float(-0.5 * y.size * math.log(2 * math.pi * var) - 0.5 * (resid @ resid) / var)
