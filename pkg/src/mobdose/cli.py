"""Command-line interface: ``mobdose analyze``, ``mobdose simulate`` and helpers.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
import yaml

from . import plotting
from .dose_models import DoseResponseSpec, FitError, TrialData, estimate_med, fit_model
from .simulation import (TEST_LL_SIGMAS, ConfigError, ExperimentConfig, aggregate,
                         make_analysis_dataset, run_experiment)
from .stability import ParmRestriction
from .tree import MobControl, MobTree, dumps, grow, leaf_rules, loads, render_text

log = logging.getLogger("mobdose")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FIT = 0, 2, 3, 4


class DataError(ValueError):
    pass


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Configuration files
# ---------------------------------------------------------------------------

def read_yaml(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping of keys to values")
    return doc


_CONTROL_KEYS = ("alpha", "minsize", "maxdepth", "restriction", "bonferroni",
                 "whitening", "suplm_null")


@dataclass(frozen=True)
class AnalysisConfig:
    """Everything ``analyze`` needs besides the data file.

    ``covariates`` maps column names to ``"numeric"`` or ``"categorical"``;
    a plain list of names declares them all numeric.
    """

    family: str = "emax"
    response: str = "resp"
    dose: str = "dose"
    covariates: dict[str, str] = field(default_factory=dict)
    control: dict[str, Any] = field(default_factory=dict)
    relevance: float = 0.1
    dose_levels: tuple[float, ...] | None = None
    knot: float | None = None
    delimiter: str | None = None
    tree_file: str = "tree.json"
    parameters_file: str = "parameters.csv"
    plot_file: str = "curves.svg"
    summary_file: str = "summary.txt"

    @classmethod
    def allowed_keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict[str, Any]) -> AnalysisConfig:
        unknown = sorted(set(mapping) - set(cls.allowed_keys()))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; allowed keys: {cls.allowed_keys()}")
        m = dict(mapping)
        covs = m.get("covariates", {})
        if isinstance(covs, list):
            covs = {str(c): "numeric" for c in covs}
        if not isinstance(covs, dict) or not covs:
            raise ConfigError("covariates must be a non-empty list or a mapping name -> type")
        for name, kind in covs.items():
            if kind not in ("numeric", "categorical"):
                raise ConfigError(f"covariate {name!r}: type must be 'numeric' or "
                                  f"'categorical', got {kind!r}")
        m["covariates"] = {str(k): v for k, v in covs.items()}
        ctrl = m.get("control", {}) or {}
        if not isinstance(ctrl, dict):
            raise ConfigError("control must be a mapping")
        bad = sorted(set(ctrl) - set(_CONTROL_KEYS))
        if bad:
            raise ConfigError(f"unknown control keys {bad}; allowed keys: {list(_CONTROL_KEYS)}")
        m["control"] = ctrl
        if m.get("family", "emax") not in ("emax", "bspline", "means"):
            raise ConfigError(f"family must be emax, bspline or means, got {m['family']!r}")
        if m.get("dose_levels") is not None:
            m["dose_levels"] = tuple(float(x) for x in m["dose_levels"])
        cfg = cls(**m)
        cfg.mob_control()
        return cfg

    def mob_control(self) -> MobControl:
        c = dict(self.control)
        restriction = c.pop("restriction", "unrestricted")
        try:
            if isinstance(restriction, list):
                parm = ParmRestriction("custom", tuple(int(i) for i in restriction))
            else:
                parm = ParmRestriction(str(restriction))
            return MobControl(restriction=parm, **c)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"control: {exc}") from None


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------

def _delimiter(path: Path, explicit: str | None) -> str:
    if explicit:
        return explicit
    return "\t" if path.suffix.lower() in (".tsv", ".tab") else ","


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column]
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna().to_numpy()
    if bad.any():
        i = int(np.argmax(bad))
        text = raw.iloc[i]
        what = "missing value" if text.strip() == "" else f"cannot parse {text!r} as a number"
        # file line: one header line, 1-based numbering
        raise DataError(f"line {i + 2} (data row {i + 1}), column {column!r}: {what}")
    return values.to_numpy(dtype=float)


def _level_order(labels: Sequence[str]) -> list[str]:
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def load_trial(path: str | Path, cfg: AnalysisConfig) -> TrialData:
    path = Path(path)
    try:
        frame = pd.read_csv(path, sep=_delimiter(path, cfg.delimiter), dtype=str,
                            keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise DataError(f"data file {path} does not exist") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse: {exc}") from None
    frame.columns = [c.strip() for c in frame.columns]
    needed = [cfg.response, cfg.dose, *cfg.covariates]
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: unknown column(s) {missing}; available: {list(frame.columns)}")
    y = _numeric_column(frame, cfg.response)
    d = _numeric_column(frame, cfg.dose)
    cols, categorical, levels = [], [], []
    for name, kind in cfg.covariates.items():
        if kind == "numeric":
            cols.append(_numeric_column(frame, name))
            categorical.append(False)
            levels.append(None)
        else:
            raw = frame[name].str.strip()
            empty = (raw == "").to_numpy()
            if empty.any():
                i = int(np.argmax(empty))
                raise DataError(f"line {i + 2} (data row {i + 1}), column {name!r}: missing value")
            order = _level_order(sorted(set(raw)))
            lookup = {lab: i for i, lab in enumerate(order)}
            cols.append(raw.map(lookup).to_numpy(dtype=float))
            categorical.append(True)
            levels.append(tuple(order))
    Z = np.column_stack(cols) if cols else np.empty((len(y), 0))
    return TrialData(y, d, Z, tuple(cfg.covariates), tuple(categorical), tuple(levels))


def dose_spec(cfg: AnalysisConfig, data: TrialData) -> DoseResponseSpec:
    levels = cfg.dose_levels or tuple(np.unique(data.d))
    try:
        if cfg.family == "emax":
            spec = DoseResponseSpec.emax(levels)
        elif cfg.family == "bspline":
            spec = DoseResponseSpec.bspline(levels, cfg.knot)
        else:
            spec = DoseResponseSpec.means(levels)
        spec.level_index(data.d)
    except ValueError as exc:
        raise DataError(f"column {cfg.dose!r}: {exc}") from None
    return spec


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def parameter_table(tree: MobTree, global_model, relevance: float) -> pd.DataFrame:
    """One row for the global fit, then one per subgroup (leaf)."""
    names = tree.spec.param_names
    rules = leaf_rules(tree)

    def row(group: str, node: int | None, model) -> dict[str, Any]:
        out: dict[str, Any] = {"group": group, "node": node, "size": model.n}
        out.update(dict(zip(names, (float(v) for v in model.params))))
        med = estimate_med(model, relevance)
        out["med"] = float("nan") if med is None else med
        return out

    rows = [row("global", None, global_model)]
    for i, leaf in enumerate(tree.leaves(), start=1):
        label = rules.get(leaf.node_id) or "all"
        rows.append(row(f"subgroup {i} ({label})", leaf.node_id, leaf.model))
    table = pd.DataFrame(rows)
    table["node"] = table["node"].astype("Int64")
    return table


def split_summary(tree: MobTree) -> list[str]:
    lines = []
    for node in tree.nodes():
        if node.split is not None:
            s = node.split
            lines.append(f"node {node.node_id}: split on {tree.names[s.covariate]} "
                         f"(p = {s.p_value:.4g}, adjusted p = {s.adjusted_p:.4g})")
    return lines or ["no split: a single model fits all patients"]


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = AnalysisConfig.from_mapping(read_yaml(args.config))
    data = load_trial(args.data, cfg)
    spec = dose_spec(cfg, data)
    control = cfg.mob_control()
    try:
        control.check(spec)
        global_model = fit_model(data.y, data.d, spec)
        tree = grow(data, spec, control)
    except FitError as exc:
        raise CliError(f"model fit failed: {exc}", EXIT_FIT) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / cfg.tree_file).write_text(dumps(tree))
    table = parameter_table(tree, global_model, cfg.relevance)
    table.to_csv(out / cfg.parameters_file, index=False)
    curves = {"global": global_model}
    curves.update({row.group: tree.node(int(row.node)).model
                   for row in table.iloc[1:].itertuples(index=False)})
    fig = plotting.dose_response_figure(curves, spec.d_max, title=f"{spec.family.value} fits")
    plotting.save_svg(fig, out / cfg.plot_file)

    summary = "\n".join([
        render_text(tree),
        "Splits:",
        *("  " + line for line in split_summary(tree)),
        "",
        "Parameters:",
        table.to_string(index=False, float_format=lambda v: f"{v:.4g}"),
        "",
    ])
    (out / cfg.summary_file).write_text(summary)
    print(summary, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _csv_list(text: str, cast) -> list:
    return [cast(x) for x in text.split(",") if x.strip()]


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    mapping = read_yaml(args.config) if args.config else {}
    overrides = {"base_seed": args.seed, "replicates": args.replicates, "jobs": args.jobs,
                 "cases": args.cases, "methods": args.methods, "sigmas": args.sigmas}
    mapping.update({k: v for k, v in overrides.items() if v is not None})
    if args.test_ll:
        mapping["test_ll"] = True
        mapping.setdefault("sigmas", list(TEST_LL_SIGMAS))
    return ExperimentConfig.from_mapping(mapping)


def write_experiment(results: pd.DataFrame, config: ExperimentConfig, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "results.csv"]
    results.to_csv(written[0], index=False)
    tables = aggregate(results, config.n_covariates)
    for name, table in tables.items():
        path = out / f"{name}.csv"
        table.to_csv(path, index=False)
        written.append(path)
    figures = {
        "tei_mse.svg": lambda: plotting.mse_ratio_figure(results),
        "med_accuracy.svg": lambda: plotting.med_figure(tables["med_accuracy"]),
    }
    if len(tables["selection_frequencies"]):
        figures["selection_frequencies.svg"] = (
            lambda: plotting.selection_figure(tables["selection_frequencies"]))
    if "test_loglik" in tables:
        figures["test_loglik.svg"] = lambda: plotting.test_ll_figure(tables["test_loglik"])
    for name, build in figures.items():
        written.append(plotting.save_svg(build(), out / name))
    config_path = out / "config.yaml"
    config_path.write_text(yaml.safe_dump(config.to_mapping(), sort_keys=True))
    written.append(config_path)
    return written


def cmd_simulate(args: argparse.Namespace) -> int:
    config = experiment_config(args)
    start = time.perf_counter()

    def progress(done: int, total: int) -> None:
        if done == total or done % max(1, total // 20) == 0:
            log.info("%d/%d replicates", done, total)

    results = run_experiment(config, progress)
    written = write_experiment(results, config, Path(args.out))
    failures = int((results.error != "").sum())
    print(f"{len(results)} method runs, {failures} failed, "
          f"{time.perf_counter() - start:.1f} s")
    sel = aggregate(results, config.n_covariates)["selection_frequencies"]
    if len(sel):
        print(sel[["case", "sigma", "method", "restriction", "none", "z1", "z2", "z3", "z4_z10"]]
              .to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def cmd_show(args: argparse.Namespace) -> int:
    try:
        tree = loads(Path(args.tree).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {args.tree}: {exc.strerror}") from None
    except ValueError as exc:
        raise DataError(f"{args.tree}: {exc}") from None
    print(render_text(tree), end="")
    return EXIT_OK


def cmd_example_data(args: argparse.Namespace) -> int:
    frame = make_analysis_dataset(sigma=args.sigma, seed=args.seed)
    frame.to_csv(args.out, index=False)
    print(f"wrote {args.out} ({len(frame)} patients; planted effect modifier z7)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobdose", description=(
        "Subgroup identification in dose-finding trials by model-based recursive partitioning."))
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="fit a global model and a partitioning tree to a dataset")
    p.add_argument("--data", required=True, help="delimiter-separated file with a header row")
    p.add_argument("--config", required=True, help="YAML analysis config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="run a simulation experiment")
    p.add_argument("--config", help="YAML experiment config (defaults apply to omitted keys)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--replicates", type=int)
    p.add_argument("--jobs", type=int, help="parallel worker processes (-1: all cores)")
    p.add_argument("--cases", type=lambda s: _csv_list(s, int), help="comma-separated, e.g. 1,3")
    p.add_argument("--methods", type=lambda s: _csv_list(s, str), help="comma-separated")
    p.add_argument("--sigmas", type=lambda s: _csv_list(s, float), help="comma-separated")
    p.add_argument("--test-ll", action="store_true",
                   help="also score each fit on an independent test set (sigma grid "
                        f"{','.join(map(str, TEST_LL_SIGMAS))} unless --sigmas is given)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("show", help="print a saved tree document")
    p.add_argument("tree")
    p.set_defaults(func=cmd_show)

    p = sub.add_parser("example-data", help="write a synthetic trial with a planted subgroup")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_example_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
