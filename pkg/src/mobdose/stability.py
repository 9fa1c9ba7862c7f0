"""Score-based parameter-instability tests.

Numeric covariates get a supLM (maximum Lagrange-multiplier) test over all
admissible breakpoints of the covariate ordering; categorical covariates get
a chi-square test on per-level score sums.

Two Monte Carlo null distributions are available for supLM, both with a
fixed seed so that p-values are reproducible:

``"asymptotic"`` (default)
    the supremum of the standardized squared Brownian-bridge norm over the
    continuous trimmed interval.  Under the time change
    ``s = log(t / (1 - t))`` this is the supremum of a stationary
    Ornstein-Uhlenbeck process over an interval of length
    ``log(b (1 - a) / (a (1 - b)))``, so one finely discretized simulation
    per dimension serves every interval.
``"grid"``
    the maximum over exactly the breakpoint fractions the statistic uses.

The grid null is exact for Gaussian score increments but the realistic
score increments are heavier tailed, which makes it anti-conservative in
the far tail; the asymptotic null is conservative for a finite grid.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import signal, stats

from .dose_models import FittedDoseModel, TrialData

log = logging.getLogger(__name__)

NULL_REPLICATES = 10_000
NULL_SEED = 16081624
_CHUNK = 2_000
OU_STEP = 0.002
OU_CHECKPOINT = 0.05
OU_BUCKET = 14.0


class SingularScoresError(ValueError):
    """The empirical score covariance is not invertible."""


class TestKind(str, enum.Enum):
    __test__ = False                 # not a pytest class despite the name

    SUPLM = "supLM"
    CHISQ = "chisq"


@dataclass(frozen=True)
class InstabilityResult:
    covariate_index: int
    statistic: float
    p_value: float
    adjusted_p: float
    test_kind: TestKind
    tested: bool = True


@dataclass(frozen=True)
class ParmRestriction:
    """Which mean parameters enter the instability tests.

    ``mode="unrestricted"`` tests the intercept and all effect parameters,
    ``mode="restricted"`` only the effect parameters (theta).  Explicit
    column indices may be given with ``mode="custom"``.
    """

    mode: Literal["unrestricted", "restricted", "custom"] = "unrestricted"
    indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.mode not in ("unrestricted", "restricted", "custom"):
            raise ValueError(f"unknown restriction mode {self.mode!r}")
        if self.mode == "custom" and not self.indices:
            raise ValueError("custom restriction needs at least one parameter index")

    @classmethod
    def unrestricted(cls) -> ParmRestriction:
        return cls("unrestricted")

    @classmethod
    def restricted(cls) -> ParmRestriction:
        return cls("restricted")

    def columns(self, n_params: int) -> tuple[int, ...]:
        if self.mode == "unrestricted":
            return tuple(range(n_params))
        if self.mode == "restricted":
            return tuple(range(1, n_params))
        if any(not 0 <= i < n_params for i in self.indices):
            raise ValueError(f"parameter indices {self.indices} out of range for {n_params} parameters")
        return tuple(sorted(set(self.indices)))


# ---------------------------------------------------------------------------
# Whitening
# ---------------------------------------------------------------------------

def _inverse_root(J: NDArray) -> NDArray:
    vals, vecs = np.linalg.eigh(J)
    if not np.all(np.isfinite(vals)) or vals.min() <= 1e-12 * max(vals.max(), 0.0) or vals.max() <= 0:
        raise SingularScoresError("score covariance is singular")
    return (vecs / np.sqrt(vals)) @ vecs.T


def decorrelate_scores(scores: NDArray) -> NDArray:
    """Multiply scores by the inverse symmetric root of their outer-product mean.

    The output has empirical second-moment matrix equal to the identity.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    J = scores.T @ scores / scores.shape[0]
    return scores @ _inverse_root(J)


def whitened_process(scores: NDArray, columns: Sequence[int], how: str = "full") -> NDArray:
    """Whitened score columns used by the tests.

    ``how="full"`` whitens with the covariance of all parameters and then
    keeps the tested columns; ``how="tested"`` drops the untested columns
    before whitening, so they never influence the result.
    """
    columns = list(columns)
    if how == "tested":
        return decorrelate_scores(scores[:, columns])
    if how == "full":
        return decorrelate_scores(scores)[:, columns]
    raise ValueError(f"unknown whitening mode {how!r}")


# ---------------------------------------------------------------------------
# supLM null distribution
# ---------------------------------------------------------------------------

class _SupLMNull:
    """Memoized simulated null distributions keyed by ``(k, n, breakpoints)``."""

    def __init__(self, replicates: int = NULL_REPLICATES, seed: int = NULL_SEED):
        self.replicates = replicates
        self.seed = seed
        self._memo: dict[tuple, NDArray] = {}
        self._lock = threading.Lock()

    def __call__(self, k: int, n: int, breaks: NDArray) -> NDArray:
        key = (k, n, breaks.tobytes())
        with self._lock:
            hit = self._memo.get(key)
        if hit is not None:
            return hit
        sims = self._simulate(k, n, breaks)
        with self._lock:
            return self._memo.setdefault(key, sims)

    def _simulate(self, k: int, n: int, breaks: NDArray) -> NDArray:
        # the random walk depends on (k, n) only, so every breakpoint set
        # for the same (k, n) is evaluated on the same paths
        rng = np.random.default_rng([self.seed, k, n])
        t = breaks / n
        weight = 1.0 / (t * (1.0 - t))
        out = np.empty(self.replicates)
        for start in range(0, self.replicates, _CHUNK):
            m = min(_CHUNK, self.replicates - start)
            walk = np.cumsum(rng.standard_normal((m, n, k)), axis=1) / math.sqrt(n)
            bridge = walk[:, breaks - 1, :] - t[None, :, None] * walk[:, -1:, :]
            out[start:start + m] = ((bridge**2).sum(axis=2) * weight).max(axis=1)
        out.sort()
        out.flags.writeable = False
        return out

    def clear(self) -> None:
        with self._lock:
            self._memo.clear()


class _AsymptoticSupLMNull:
    """Running maxima of simulated Ornstein-Uhlenbeck paths, memoized per dimension.

    Tables cover interval lengths in fixed buckets of ``OU_BUCKET`` so that a
    p-value never depends on which other lengths were requested before.  Row
    ``j`` of a table holds the sorted simulated suprema over an interval of
    length ``j * checkpoint``.  Tables are also cached on disk (directory from
    ``MOBDOSE_CACHE_DIR``, default ``~/.cache/mobdose``) because each one
    takes seconds to simulate and worker processes would otherwise repeat it.
    """

    def __init__(self, replicates: int = NULL_REPLICATES, seed: int = NULL_SEED,
                 step: float = OU_STEP, checkpoint: float = OU_CHECKPOINT,
                 disk_cache: bool = True):
        self.replicates = replicates
        self.seed = seed
        self.step = step
        self.every = int(round(checkpoint / step))
        self.disk_cache = disk_cache
        self._memo: dict[tuple[int, int], NDArray] = {}
        self._lock = threading.Lock()

    @property
    def checkpoint(self) -> float:
        return self.every * self.step

    def _cache_file(self, k: int, bucket: int) -> Path:
        root = Path(os.environ.get("MOBDOSE_CACHE_DIR", Path.home() / ".cache" / "mobdose"))
        return root / (f"ou-sup-s{self.seed}-k{k}-b{bucket}-r{self.replicates}"
                       f"-h{self.step:g}-c{self.every}.npy")

    def table(self, k: int, length: float) -> NDArray:
        bucket = max(1, math.ceil(length / OU_BUCKET))
        key = (k, bucket)
        with self._lock:
            hit = self._memo.get(key)
        if hit is not None:
            return hit
        tab = self._load(k, bucket)
        if tab is None:
            tab = self._simulate(k, bucket)
            self._store(k, bucket, tab)
        tab.flags.writeable = False
        with self._lock:
            return self._memo.setdefault(key, tab)

    def _load(self, k: int, bucket: int) -> NDArray | None:
        if not self.disk_cache:
            return None
        path = self._cache_file(k, bucket)
        try:
            tab = np.load(path)
        except (OSError, ValueError):
            return None
        expected = (int(round(bucket * OU_BUCKET / self.checkpoint)) + 1, self.replicates)
        return tab if tab.shape == expected else None

    def _store(self, k: int, bucket: int, tab: NDArray) -> None:
        if not self.disk_cache:
            return
        path = self._cache_file(k, bucket)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with tempfile.NamedTemporaryFile(dir=path.parent, suffix=".npy", delete=False) as fh:
                np.save(fh, tab)
            os.replace(fh.name, path)
        except OSError as exc:
            log.debug("could not cache supLM null table: %s", exc)

    def _simulate(self, k: int, bucket: int) -> NDArray:
        n_check = int(round(bucket * OU_BUCKET / self.checkpoint)) + 1
        rng = np.random.default_rng([self.seed, k, bucket])
        m = (n_check - 1) * self.every
        rho = math.exp(-self.step / 2)
        scale = math.sqrt(1 - rho * rho)
        out = np.empty((n_check, self.replicates))
        chunk = 250
        for start in range(0, self.replicates, chunk):
            b = min(chunk, self.replicates - start)
            eps = rng.standard_normal((b, k, m + 1))
            eps[:, :, 0] /= scale                  # stationary start
            path = signal.lfilter([scale], [1.0, -rho], eps, axis=2)
            running = np.maximum.accumulate((path * path).sum(axis=1), axis=1)
            out[:, start:start + b] = running[:, ::self.every].T
        out.sort(axis=1)
        return out

    def pvalue(self, stat: float, k: int, lo: float, hi: float) -> float:
        length = math.log(hi * (1 - lo) / (lo * (1 - hi)))
        tab = self.table(k, length)
        pos = length / self.checkpoint
        j = min(int(pos), tab.shape[0] - 2)
        frac = pos - j

        def exceed(row: NDArray) -> float:
            return (row.size - np.searchsorted(row, stat, side="left")) / row.size

        p = (1 - frac) * exceed(tab[j]) + frac * exceed(tab[j + 1])
        if p <= 0:
            p = min(1.0 / self.replicates, suplm_tail_approx(stat, k, lo, hi))
        return float(p)

    def clear(self) -> None:
        with self._lock:
            self._memo.clear()


suplm_null = _SupLMNull()
suplm_asymptotic_null = _AsymptoticSupLMNull()


def suplm_tail_approx(stat: float, k: int, lo: float, hi: float) -> float:
    """Asymptotic tail probability of the supremum of a standardized
    ``k``-dimensional squared Bessel bridge over ``[lo, hi]``.

    Only used beyond the simulated range, to keep p-values strictly ordered.
    """
    if stat <= k:
        return 1.0
    T = math.log(hi * (1 - lo) / (lo * (1 - hi)))
    dens = stats.chi2.pdf(stat, k)
    return float(min(1.0, dens * (T * (stat - k) + 2.0)))


# ---------------------------------------------------------------------------
# Tests
# ---------------------------------------------------------------------------

def suplm_test(wscores: NDArray, z: NDArray, minsize: int, index: int = 0,
               null: str = "asymptotic") -> InstabilityResult:
    """supLM test of the whitened score process ordered by a numeric covariate.

    The cumulative process is evaluated only where the ordered covariate
    changes value, and only at breakpoints leaving at least ``minsize``
    observations on either side.  ``null`` selects the reference
    distribution (see the module docstring).
    """
    wscores = np.asarray(wscores, dtype=float)
    if wscores.ndim == 1:
        wscores = wscores[:, None]
    z = np.asarray(z, dtype=float)
    n, k = wscores.shape
    order = np.argsort(z, kind="stable")
    zs = z[order]
    breaks = np.nonzero(zs[1:] > zs[:-1])[0] + 1       # sizes of the left part
    breaks = breaks[(breaks >= minsize) & (breaks <= n - minsize)]
    if breaks.size == 0:
        return InstabilityResult(index, 0.0, 1.0, 1.0, TestKind.SUPLM, tested=False)
    proc = np.cumsum(wscores[order], axis=0) / math.sqrt(n)
    t = breaks / n
    stat = float(((proc[breaks - 1] ** 2).sum(axis=1) / (t * (1 - t))).max())
    if null == "asymptotic":
        p = suplm_asymptotic_null.pvalue(stat, k, t[0], t[-1])
    elif null == "grid":
        sims = suplm_null(k, n, breaks)
        exceed = sims.size - np.searchsorted(sims, stat, side="left")
        if exceed > 0:
            p = exceed / sims.size
        else:
            p = min(1.0 / sims.size, suplm_tail_approx(stat, k, t[0], t[-1]))
    else:
        raise ValueError(f"unknown supLM null {null!r}")
    return InstabilityResult(index, stat, float(p), float(p), TestKind.SUPLM)


def chisq_test(wscores: NDArray, codes: NDArray, index: int = 0) -> InstabilityResult:
    """Chi-square test of per-level sums of the whitened scores.

    Each level's squared score sum is scaled by its share of the sample so
    that the statistic is chi-square with ``(C - 1) * k`` degrees of freedom
    under the null.  Empty levels are ignored.
    """
    wscores = np.asarray(wscores, dtype=float)
    if wscores.ndim == 1:
        wscores = wscores[:, None]
    n, k = wscores.shape
    present, inverse, counts = np.unique(np.asarray(codes), return_inverse=True, return_counts=True)
    C = present.size
    if C < 2:
        return InstabilityResult(index, 0.0, 1.0, 1.0, TestKind.CHISQ, tested=False)
    sums = np.zeros((C, k))
    np.add.at(sums, inverse, wscores)
    stat = float(((sums**2).sum(axis=1) / counts).sum())
    p = float(stats.chi2.sf(stat, (C - 1) * k))
    return InstabilityResult(index, stat, p, p, TestKind.CHISQ)


def instability_tests(model: FittedDoseModel, data: TrialData, restriction: ParmRestriction,
                      minsize: int, bonferroni: bool = True,
                      whitening: str = "full", null: str = "asymptotic"
                      ) -> list[InstabilityResult]:
    """Run one instability test per partitioning covariate.

    Returns one result per covariate; covariates that could not be tested
    (constant in this node, no admissible breakpoint) carry ``tested=False``
    and p = 1, and do not count towards the Bonferroni multiplier.
    """
    if model.score_matrix is None:
        raise ValueError("model carries no score matrix")
    columns = restriction.columns(model.spec.n_params)
    try:
        ws = whitened_process(model.score_matrix, columns, whitening)
    except SingularScoresError:
        log.warning("singular score covariance in node of size %d; skipping tests", model.n)
        return [InstabilityResult(j, 0.0, 1.0, 1.0,
                                  TestKind.CHISQ if data.categorical[j] else TestKind.SUPLM,
                                  tested=False)
                for j in range(data.n_covariates)]
    results = []
    for j in range(data.n_covariates):
        if data.categorical[j]:
            results.append(chisq_test(ws, data.Z[:, j], j))
        else:
            results.append(suplm_test(ws, data.Z[:, j], minsize, j, null))
    n_tested = sum(r.tested for r in results)
    if bonferroni and n_tested > 1:
        results = [
            InstabilityResult(r.covariate_index, r.statistic, r.p_value,
                              min(1.0, n_tested * r.p_value), r.test_kind, r.tested)
            if r.tested else r
            for r in results
        ]
    return results


def select_split_variable(model: FittedDoseModel, data: TrialData, restriction: ParmRestriction,
                          alpha: float, bonferroni: bool = True, minsize: int = 20,
                          whitening: str = "full", null: str = "asymptotic",
                          results: list[InstabilityResult] | None = None,
                          ) -> tuple[int, float] | None:
    """Covariate with the smallest adjusted p-value, or None if none is <= alpha.

    Ties are broken towards the smaller covariate index.
    """
    if results is None:
        results = instability_tests(model, data, restriction, minsize, bonferroni,
                                    whitening, null)
    tested = [r for r in results if r.tested]
    if not tested:
        return None
    best = min(tested, key=lambda r: (r.adjusted_p, r.p_value, r.covariate_index))
    if best.adjusted_p > alpha:
        return None
    return best.covariate_index, best.adjusted_p
