"""Simulation scenarios and replicated experiments.

Trials follow the five benchmark cases: 250 patients in blocks of 50 on
doses 0, 12.5, 25, 50 and 100, ten standard normal covariates, and an Emax
truth whose parameters depend on the indicators ``I_j = 1{z_j > 0}``.

Seed scheme: replicate ``r`` of an experiment with base seed ``s`` draws its
training trial from ``default_rng([s + r, case, round(1e6 * sigma), 0])`` and
its test trial from the same key with a final stream id of 1.  Results are
therefore independent of job scheduling and of which other cases or noise
levels are in the same run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from .dose_models import (DoseResponseSpec, FitError, FittedDoseModel, TrialData, emax_curve,
                          estimate_med, fit_emax, intercept_only, log_likelihood)
from .stability import ParmRestriction
from .tree import MobControl, MobTree, grow

log = logging.getLogger(__name__)

DOSE_LEVELS = (0.0, 12.5, 25.0, 50.0, 100.0)
CASES = (1, 2, 3, 4, 5)
MOB_METHODS = ("mobEmax", "mobSpline", "mobMeans")
METHODS = MOB_METHODS + ("globalEmax", "truePartitionEmax")
RESTRICTIONS = ("unrestricted", "restricted")
TE_DOSES = np.arange(1.0, 101.0)
# noise levels for the test-set log-likelihood comparison
TEST_LL_SIGMAS = (0.05, 0.1, 0.125, 0.25)

# covariates (0-based) defining the truth groups of each case
_GROUP_COVARIATES = {1: (), 2: (0, 2), 3: (0, 1), 4: (0, 1), 5: (0, 1, 2)}


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    case: int = 1
    per_level_n: int = 50
    dose_levels: tuple[float, ...] = DOSE_LEVELS
    n_covariates: int = 10
    sigma: float = 0.12
    seed: int = 0

    def __post_init__(self) -> None:
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}, got {self.case}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n_covariates < 3:
            raise ValueError("the benchmark cases need at least three covariates")

    @property
    def n(self) -> int:
        return self.per_level_n * len(self.dose_levels)


def truth(case: int, Z: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    """Per-patient ``(beta0, theta1, theta2)`` of the benchmark case."""
    Z = np.asarray(Z, dtype=float)
    I1, I2, I3 = ((Z[:, j] > 0).astype(float) for j in range(3))
    ones = np.ones(Z.shape[0])
    beta0, theta1, theta2 = 1.2 * ones, 0.17 * ones, 18.0 * ones
    if case == 2:
        beta0 = 1.2 + 0.1 * I1 + 0.1 * I3
    elif case == 3:
        theta1 = 0.17 - 0.17 * I1 + 0.17 * I2
    elif case == 4:
        theta2 = 18.0 * 0.2**I1 * 5.0**I2
    elif case == 5:
        beta0 = 1.2 + 0.1 * I1 + 0.1 * I3
        theta1 = 0.17 + 0.17 * I1 * I2 - 0.17 * (1 - I1) * (1 - I2)
        theta2 = 18.0 * 0.2**I1
    elif case != 1:
        raise ValueError(f"unknown case {case}")
    return beta0, theta1, theta2


def truth_groups(case: int, Z: NDArray) -> NDArray:
    """Label of the homogeneous truth group each patient belongs to."""
    Z = np.asarray(Z, dtype=float)
    g = np.zeros(Z.shape[0], dtype=int)
    for bit, j in enumerate(_GROUP_COVARIATES[case]):
        g += (Z[:, j] > 0).astype(int) << bit
    return g


def n_truth_groups(case: int) -> int:
    return 2 ** len(_GROUP_COVARIATES[case])


@dataclass(frozen=True, eq=False)
class SimulatedTrial:
    data: TrialData
    case: int
    beta0: NDArray
    theta1: NDArray
    theta2: NDArray
    group: NDArray

    def true_effect(self, d) -> NDArray:
        """``(n, len(d))`` matrix of true treatment effects."""
        d = np.asarray(d, dtype=float)
        return emax_curve(d[None, :], self.theta1[:, None], self.theta2[:, None])


def generate_trial(spec: ScenarioSpec, rng: np.random.Generator | None = None,
                   per_level_n: int | None = None) -> SimulatedTrial:
    """Simulate one trial; deterministic given ``spec.seed`` (or ``rng``)."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    m = spec.per_level_n if per_level_n is None else per_level_n
    d = np.repeat(np.asarray(spec.dose_levels, dtype=float), m)
    n = d.size
    Z = rng.standard_normal((n, spec.n_covariates))
    beta0, theta1, theta2 = truth(spec.case, Z)
    mu = beta0 + emax_curve(d, theta1, theta2)
    y = mu + spec.sigma * rng.standard_normal(n)
    data = TrialData(y, d, Z)
    return SimulatedTrial(data, spec.case, beta0, theta1, theta2, truth_groups(spec.case, Z))


def replicate_rng(base_seed: int, replicate: int, case: int, sigma: float,
                  stream: int) -> np.random.Generator:
    return np.random.default_rng([base_seed + replicate, case, int(round(sigma * 1e6)), stream])


# ---------------------------------------------------------------------------
# Fitted methods
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Estimate:
    """A fitted method: patients are mapped to keys, keys to dose-response models."""

    method: str
    restriction: str
    models: dict[int, FittedDoseModel]
    assign: Callable[[SimulatedTrial], NDArray]
    tree: MobTree | None = None

    def covariates_used(self) -> tuple[int, ...]:
        return tuple(sorted(self.tree.covariates_used())) if self.tree is not None else ()

    @property
    def n_groups(self) -> int:
        return len(self.models)


def _family_spec(method: str, dose_levels) -> DoseResponseSpec:
    if method in ("mobEmax", "globalEmax", "truePartitionEmax"):
        return DoseResponseSpec.emax(dose_levels)
    if method == "mobSpline":
        return DoseResponseSpec.bspline(dose_levels)
    if method == "mobMeans":
        return DoseResponseSpec.means(dose_levels)
    raise ValueError(f"unknown method {method!r}")


def fit_method(method: str, trial: SimulatedTrial, control: MobControl | None = None,
               dose_levels=DOSE_LEVELS) -> Estimate:
    """Fit one of the compared methods to a simulated trial.

    ``control.restriction`` selects restricted or unrestricted splitting for
    the partitioning methods and is ignored otherwise.
    """
    spec = _family_spec(method, dose_levels)
    data = trial.data
    if method in MOB_METHODS:
        control = control or MobControl()
        tree = grow(data, spec, control)
        return Estimate(method, control.restriction.mode, tree.leaf_models(),
                        lambda t: tree.route_many(t.data.Z), tree)
    if method == "globalEmax":
        model = fit_emax(data.y, data.d, spec)
        return Estimate(method, "na", {0: model}, lambda t: np.zeros(t.data.n, dtype=int))
    if method == "truePartitionEmax":
        models = {}
        global_model = None
        for g in range(n_truth_groups(trial.case)):
            rows = trial.group == g
            try:
                if not rows.any():
                    raise FitError("empty truth group")
                models[g] = fit_emax(data.y[rows], data.d[rows], spec)
            except FitError as exc:
                log.info("true-partition group %d: %s; using fallback", g, exc)
                if rows.sum() >= 2:
                    models[g] = intercept_only(data.y[rows], data.d[rows], spec)
                else:
                    global_model = global_model or fit_emax(data.y, data.d, spec)
                    models[g] = global_model
        return Estimate(method, "na", models, lambda t: t.group)
    raise ValueError(f"unknown method {method!r}")


def truth_estimate(trial: SimulatedTrial, dose_levels=DOSE_LEVELS) -> Estimate:
    """The data-generating model expressed as an estimate (one model per patient)."""
    spec = DoseResponseSpec.emax(dose_levels)
    models = {i: FittedDoseModel(spec, float(trial.beta0[i]),
                                 np.array([trial.theta1[i], trial.theta2[i]]), 1.0, 1.0, 1)
              for i in range(trial.data.n)}
    return Estimate("truth", "na", models, lambda t: np.arange(t.data.n))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _groups(keys: NDArray) -> Iterable[tuple[int, NDArray]]:
    for k in np.unique(keys):
        yield int(k), keys == k


def metric_test_ll(est: Estimate, test: SimulatedTrial) -> float:
    """Summed Gaussian log-likelihood of the test patients under their routed models."""
    keys = est.assign(test)
    total = 0.0
    for k, rows in _groups(keys):
        total += log_likelihood(est.models[k], test.data.y[rows], test.data.d[rows])
    return total


def metric_tei_mse(est: Estimate, trial: SimulatedTrial, doses=TE_DOSES) -> float:
    """Mean over patients of the mean squared treatment-effect error on ``doses``."""
    doses = np.asarray(doses, dtype=float)
    keys = est.assign(trial)
    truth_te = trial.true_effect(doses)
    sq = np.empty(trial.data.n)
    for k, rows in _groups(keys):
        err = est.models[k].effect(doses)[None, :] - truth_te[rows]
        sq[rows] = (err**2).mean(axis=1)
    return float(sq.mean())


def metric_med_accuracy(est: Estimate, trial: SimulatedTrial, relevance: float = 0.1,
                        band: tuple[float, float] = (0.08, 0.12)) -> float:
    """Fraction of patients whose estimated MED has a true effect inside ``band``."""
    keys = est.assign(trial)
    hit = np.zeros(trial.data.n)
    for k, rows in _groups(keys):
        med = estimate_med(est.models[k], relevance)
        if med is None:
            continue
        te = emax_curve(med, trial.theta1[rows], trial.theta2[rows])
        hit[rows] = (te >= band[0]) & (te <= band[1])
    return float(hit.mean())


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    cases: tuple[int, ...] = CASES
    methods: tuple[str, ...] = ("mobEmax", "globalEmax")
    restrictions: tuple[str, ...] = RESTRICTIONS
    sigmas: tuple[float, ...] = (0.12,)
    replicates: int = 500
    base_seed: int = 1
    per_level_n: int = 50
    n_covariates: int = 10
    test_ll: bool = False
    test_per_level_n: int = 2000
    alpha: float = 0.1
    minsize: int = 20
    maxdepth: int = 4
    bonferroni: bool = True
    whitening: str = "full"
    suplm_null: str = "asymptotic"
    relevance: float = 0.1
    med_band: tuple[float, float] = (0.08, 0.12)
    jobs: int = 1

    def __post_init__(self) -> None:
        for name in ("cases", "methods", "restrictions", "sigmas", "med_band"):
            value = getattr(self, name)
            if isinstance(value, (str, int, float)):
                value = (value,)
            object.__setattr__(self, name, tuple(value))
        bad = [c for c in self.cases if c not in CASES]
        if bad:
            raise ConfigError(f"unknown cases {bad}; allowed: {list(CASES)}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; allowed: {list(METHODS)}")
        bad = [r for r in self.restrictions if r not in RESTRICTIONS]
        if bad:
            raise ConfigError(f"unknown restrictions {bad}; allowed: {list(RESTRICTIONS)}")
        if not self.sigmas or any(s <= 0 for s in self.sigmas):
            raise ConfigError("sigmas must be a non-empty list of positive numbers")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if len(self.med_band) != 2 or self.med_band[0] > self.med_band[1]:
            raise ConfigError("med_band must be [low, high]")
        try:
            self.control(ParmRestriction.unrestricted())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def allowed_keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict) -> ExperimentConfig:
        unknown = sorted(set(mapping) - set(cls.allowed_keys()))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; allowed keys: {cls.allowed_keys()}")
        try:
            return cls(**mapping)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_mapping(self) -> dict:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def control(self, restriction: ParmRestriction) -> MobControl:
        return MobControl(self.alpha, self.minsize, self.maxdepth, self.bonferroni,
                          restriction, self.whitening, self.suplm_null)


@dataclass
class MetricReport:
    case: int
    sigma: float
    replicate: int
    method: str
    restriction: str
    n_groups: int = 0
    covariates_used: str = ""
    test_ll: float = math.nan
    tei_mse: float = math.nan
    tei_mse_global: float = math.nan
    med_correct_fraction: float = math.nan
    error: str = ""


TIDY_COLUMNS = [f.name for f in fields(MetricReport)]


def _method_runs(config: ExperimentConfig) -> list[tuple[str, str]]:
    runs = []
    for m in config.methods:
        if m in MOB_METHODS:
            runs.extend((m, r) for r in config.restrictions)
        else:
            runs.append((m, "na"))
    return runs


def run_replicate(config: ExperimentConfig, case: int, sigma: float,
                  replicate: int) -> list[MetricReport]:
    """All requested methods on one simulated trial (common random numbers)."""
    spec = ScenarioSpec(case, config.per_level_n, DOSE_LEVELS, config.n_covariates, sigma)
    train = generate_trial(spec, replicate_rng(config.base_seed, replicate, case, sigma, 0))
    test = None
    if config.test_ll:
        test = generate_trial(spec, replicate_rng(config.base_seed, replicate, case, sigma, 1),
                              per_level_n=config.test_per_level_n)
    names = train.data.names
    reports = []
    try:
        global_mse = metric_tei_mse(fit_method("globalEmax", train), train)
    except FitError:
        global_mse = math.nan
    for method, restriction in _method_runs(config):
        rep = MetricReport(case, sigma, replicate, method, restriction, tei_mse_global=global_mse)
        try:
            parm = ParmRestriction(restriction if restriction != "na" else "unrestricted")
            est = fit_method(method, train, config.control(parm))
            rep.n_groups = est.n_groups
            rep.covariates_used = ";".join(names[j] for j in est.covariates_used())
            rep.tei_mse = metric_tei_mse(est, train)
            rep.med_correct_fraction = metric_med_accuracy(est, train, config.relevance,
                                                           config.med_band)
            if test is not None:
                rep.test_ll = metric_test_ll(est, test)
        except (FitError, ValueError, np.linalg.LinAlgError) as exc:
            rep.error = f"{type(exc).__name__}: {exc}"
        reports.append(rep)
    return reports


def run_experiment(config: ExperimentConfig, progress: Callable[[int, int], None] | None = None
                   ) -> pd.DataFrame:
    """Run every (case, sigma, replicate) task; returns the tidy results table."""
    tasks = [(c, s, r) for c in config.cases for s in config.sigmas
             for r in range(config.replicates)]
    if config.jobs != 1:
        from joblib import Parallel, delayed
        chunks = Parallel(n_jobs=config.jobs)(delayed(run_replicate)(config, *t) for t in tasks)
    else:
        chunks = []
        for i, t in enumerate(tasks):
            chunks.append(run_replicate(config, *t))
            if progress is not None:
                progress(i + 1, len(tasks))
    rows = [asdict(rep) for chunk in chunks for rep in chunk]
    df = pd.DataFrame(rows, columns=TIDY_COLUMNS)
    return df.sort_values(["case", "sigma", "replicate", "method", "restriction"],
                          kind="stable").reset_index(drop=True)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

_KEYS = ["case", "sigma", "method", "restriction"]


def selection_frequencies(results: pd.DataFrame, n_covariates: int = 10) -> pd.DataFrame:
    """Relative frequency of each covariate appearing in the trees.

    ``none`` is the fraction of single-leaf trees; ``z4_z10`` the fraction of
    trees using any covariate beyond the third.
    """
    mob = results[results.method.isin(MOB_METHODS) & (results.error == "")]
    names = [f"z{j + 1}" for j in range(n_covariates)]
    used = mob.covariates_used.fillna("").str.split(";")
    flags = pd.DataFrame({nm: used.apply(lambda u, nm=nm: nm in u) for nm in names},
                         index=mob.index)
    frame = pd.concat([mob[_KEYS], flags], axis=1)
    frame["none"] = mob.n_groups == 1
    frame["z4_z10"] = flags[names[3:]].any(axis=1)
    agg = frame.groupby(_KEYS, sort=True)[["none"] + names + ["z4_z10"]].mean()
    agg.insert(0, "replicates", frame.groupby(_KEYS, sort=True).size())
    return agg.reset_index()


def tei_mse_summary(results: pd.DataFrame) -> pd.DataFrame:
    """Distribution of log2(MSE_method / MSE_globalEmax) per configuration."""
    ok = results[(results.error == "") & results.tei_mse.notna()].copy()
    ok["log2_ratio"] = np.log2(ok.tei_mse / ok.tei_mse_global)
    g = ok.groupby(_KEYS, sort=True).log2_ratio
    out = pd.DataFrame({
        "replicates": g.size(),
        "median": g.median(),
        "q25": g.quantile(0.25),
        "q75": g.quantile(0.75),
        "mean": g.mean(),
        "mean_mse": ok.groupby(_KEYS, sort=True).tei_mse.mean(),
    })
    return out.reset_index()


def med_accuracy_summary(results: pd.DataFrame) -> pd.DataFrame:
    ok = results[results.error == ""]
    g = ok.groupby(_KEYS, sort=True).med_correct_fraction
    return pd.DataFrame({"replicates": g.size(), "mean": g.mean(), "median": g.median()}
                        ).reset_index()


def test_ll_summary(results: pd.DataFrame) -> pd.DataFrame:
    ok = results[(results.error == "") & results.test_ll.notna()]
    g = ok.groupby(_KEYS, sort=True).test_ll
    return pd.DataFrame({"replicates": g.size(), "median": g.median(), "mean": g.mean()}
                        ).reset_index()


def failure_summary(results: pd.DataFrame) -> pd.DataFrame:
    g = results.groupby(_KEYS, sort=True).error
    return pd.DataFrame({"runs": g.size(),
                         "failures": g.apply(lambda e: int((e != "").sum()))}).reset_index()


def aggregate(results: pd.DataFrame, n_covariates: int = 10) -> dict[str, pd.DataFrame]:
    out = {
        "selection_frequencies": selection_frequencies(results, n_covariates),
        "tei_mse": tei_mse_summary(results),
        "med_accuracy": med_accuracy_summary(results),
        "failures": failure_summary(results),
    }
    if results.test_ll.notna().any():
        out["test_loglik"] = test_ll_summary(results)
    return out


# ---------------------------------------------------------------------------
# Example dataset for the analysis workflow
# ---------------------------------------------------------------------------

def make_analysis_dataset(sigma: float = 0.05, seed: int = 7, per_level_n: int = 50,
                          planted: int = 6) -> pd.DataFrame:
    """Wide-format synthetic trial with a planted binary effect modifier.

    Ten covariates ``z1..z10``; ``z{planted+1}`` is binary with levels 1 and 2
    and patients at level 1 have no treatment effect (the other covariates
    are standard normal noise).  Columns: ``resp``, ``dose``, ``z1..z10``.
    """
    rng = np.random.default_rng(seed)
    d = np.repeat(np.asarray(DOSE_LEVELS), per_level_n)
    n = d.size
    Z = rng.standard_normal((n, 10))
    binary = rng.integers(1, 3, size=n)
    theta1 = np.where(binary == 1, 0.0, 0.17)
    y = 1.2 + emax_curve(d, theta1, 18.0) + sigma * rng.standard_normal(n)
    frame = pd.DataFrame({"resp": y, "dose": d})
    for j in range(10):
        frame[f"z{j + 1}"] = binary if j == planted else Z[:, j]
    return frame
