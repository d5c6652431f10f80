"""
Robust private linear regression - command line entry point.

Subcommands: preprocess, tune, release, fit, predict, experiment.
Every artifact embeds the resolved configuration and the tool version; run
timestamps go only to the ledger's run log.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from config import DB_FILE, DEFAULTS, OMEGA_GRID, TOOL_NAME, TOOL_VERSION, load_config_file, resolve_config
from data import (
    build_drug_datasets,
    center_targets,
    load_gene_order,
    load_responses,
    load_table,
    SplitSpec,
    preprocess_features,
    read_dataset,
    select_genes,
    write_dataset,
)
from database import dump_json, load_json, log_run, record_release, write_csv_artifact
from errors import ConfigError, FileAccessError, RobustDPError
from evaluation import (
    MethodVariant,
    PriorConfig,
    SweepConfig,
    convergence_experiment,
    gaussian_mean_pair,
    input_perturbation_pair,
    linear_regression_pair,
    monte_carlo_cv,
    sweep,
    synthetic_source,
)
from mechanism import PrivacyBudget, budget_receipt, release_stats
from projection import Bounds, ThresholdMultipliers, thresholds_from_std
from regression import (
    FixedPrecisionPrior,
    GammaHyperPrior,
    gibbs_posterior,
    posterior_fixed,
    posterior_from_dict,
    posterior_to_dict,
    predict_averaged_many,
    predict_points,
    samples_from_frame,
    samples_to_frame,
)
from rng import root_stream
from suffstats import stats_from_dict, stats_to_dict
from tuning import TuningConfig, tune

logger = logging.getLogger(__name__)

VERSION_STRING = f"{TOOL_NAME} {TOOL_VERSION}"


class UsageError(RobustDPError):
    code = "usage_error"


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of printing usage and exiting."""

    def __init__(self, *args, **kwargs):
        # prefixes of real flags count as unknown flags
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message, prog=self.prog)


# =============================================================================
# ARGUMENT HELPERS
# =============================================================================

def _floats(value: Any, count: Optional[int] = None, name: str = "value") -> Optional[List[float]]:
    if value is None:
        return None
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
    elif isinstance(value, (int, float)):
        parts = [value]
    else:
        parts = list(value)
    try:
        out = [float(p) for p in parts]
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be comma-separated numbers", value=str(value))
    if count is not None and len(out) != count:
        raise ConfigError(f"{name} needs exactly {count} numbers", value=str(value))
    return out


def _ints(value: Any, name: str = "value") -> Optional[List[int]]:
    floats = _floats(value, name=name)
    return None if floats is None else [int(v) for v in floats]


def _budget(cfg: Dict) -> PrivacyBudget:
    return PrivacyBudget.from_split(float(cfg["epsilon"]), _floats(cfg["split"], 3, "--split"))


def _bounds_source(cfg: Dict):
    bounds = _floats(cfg.get("bounds"), 2, "--bounds")
    multipliers = _floats(cfg.get("multipliers"), 2, "--multipliers")
    if bounds and multipliers:
        raise ConfigError("give either --bounds or --multipliers, not both")
    if bounds:
        return Bounds(*bounds)
    return ThresholdMultipliers(*(multipliers or (1.0, 1.0)))


def _precision(cfg: Dict, key: str) -> float:
    value = cfg.get(key)
    if value is None:
        return 1.0
    value = float(value)
    if not (math.isfinite(value) and value > 0):
        raise ConfigError(f"--{key.replace('_', '-')} must be a positive number", key=key, value=value)
    return value


def _prior_config(cfg: Dict) -> PriorConfig:
    return PriorConfig(
        fit=cfg["fit"],
        fixed=FixedPrecisionPrior(_precision(cfg, "lam"), _precision(cfg, "lam0")),
        hyper=GammaHyperPrior(),
        m=int(cfg["m"]),
        burn_in=int(cfg["burn_in"]),
    )


def _meta(command: str, cfg: Dict) -> Dict[str, Any]:
    return {"tool": VERSION_STRING, "command": command, "config": cfg}


def _require(cfg: Dict, *keys: str):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required options", options=["--" + k.replace("_", "-") for k in missing])


def _csv_path(out: str) -> str:
    return str(Path(out).with_suffix(".csv"))


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_preprocess(cfg: Dict) -> List[str]:
    """Clean per-drug datasets: gene selection, missing drops, normalisation."""
    _require(cfg, "expression", "responses", "out")
    expr = load_table(cfg["expression"], cfg["delimiter"])
    if cfg.get("gene_order"):
        expr = select_genes(expr, load_gene_order(cfg["gene_order"]), int(cfg["genes"]))
    responses = load_responses(cfg["responses"], cfg["delimiter"])
    datasets = build_drug_datasets(expr, responses)

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, sizes = [], {}
    for drug, dataset in datasets.items():
        if not cfg.get("raw") and dataset.n >= 2:
            dataset = dataset.replace(preprocess_features(dataset.inputs), center_targets(dataset.targets))
        path = out_dir / f"{drug}.csv"
        write_dataset(str(path), dataset)
        outputs.append(str(path))
        sizes[drug] = dataset.n
        print(f"{drug}\t{dataset.n}")

    manifest = out_dir / "manifest.json"
    dump_json(str(manifest), {**_meta("preprocess", cfg), "datasets": sizes})
    outputs.append(str(manifest))
    return outputs


def cmd_tune(cfg: Dict) -> List[str]:
    _require(cfg, "out")
    tcfg = TuningConfig(
        n_aux=int(cfg["n_aux"]),
        d=int(cfg["dims"]),
        epsilon=float(cfg["epsilon"]),
        n_datasets=int(cfg.get("datasets") or 5),
        n_noise=int(cfg.get("noise") or 5),
        scorer=cfg.get("scorer") or "gibbs",
        omega_grid=tuple(_floats(cfg.get("omega_grid"), name="--omega-grid") or OMEGA_GRID),
        progress=not cfg.get("quiet"),
    )
    report = tune(tcfg, root_stream(int(cfg["seed"])).child("tune"))
    out = cfg["out"]
    dump_json(out, {**_meta("tune", cfg), "report": report.to_dict()})
    outputs = [out]
    if cfg["format"] == "csv":
        split_csv = str(Path(out).with_suffix(".splits.csv"))
        threshold_csv = str(Path(out).with_suffix(".thresholds.csv"))
        write_csv_artifact(split_csv, report.split_search.to_frame(), _meta("tune", cfg))
        write_csv_artifact(threshold_csv, report.thresholds.to_frame(), _meta("tune", cfg))
        outputs += [split_csv, threshold_csv]
    return outputs


def cmd_release(cfg: Dict) -> List[str]:
    """Project, summarise and perturb a private dataset; write the wire format."""
    _require(cfg, "data", "out")
    dataset = read_dataset(cfg["data"])
    budget = _budget(cfg)
    source = _bounds_source(cfg)
    bounds = source if isinstance(source, Bounds) else thresholds_from_std(dataset, source)
    seed = int(cfg["seed"])

    released = release_stats(dataset, bounds, budget, root_stream(seed).child("release"))
    receipt = budget_receipt(released, bounds, budget, seed)
    payload = {**_meta("release", cfg), "stats": stats_to_dict(released), "receipt": receipt}
    record_release(cfg["out"], receipt, cfg["ledger"], write=lambda path: dump_json(path, payload))
    return [cfg["out"]]


def _load_stats(path: str):
    payload = load_json(path)
    return stats_from_dict(payload.get("stats", payload))


def cmd_fit(cfg: Dict) -> List[str]:
    _require(cfg, "stats", "out")
    stats = _load_stats(cfg["stats"])
    prior = _prior_config(cfg)
    if prior.fit == "gibbs":
        rng = root_stream(int(cfg["seed"])).child("fit")
        samples = gibbs_posterior(stats, prior.hyper, prior.m, prior.burn_in, rng)
        write_csv_artifact(cfg["out"], samples_to_frame(samples), _meta("fit", cfg))
    else:
        posterior = posterior_fixed(stats, prior.fixed)
        dump_json(cfg["out"], {**_meta("fit", cfg), "posterior": posterior_to_dict(posterior)})
    return [cfg["out"]]


def cmd_predict(cfg: Dict) -> List[str]:
    _require(cfg, "model", "data", "out")
    dataset = read_dataset(cfg["data"])
    model = Path(cfg["model"])
    if model.suffix.lower() == ".csv":
        samples = samples_from_frame(pd.read_csv(model, comment="#", float_precision="round_trip"))
        predictions = predict_averaged_many(dataset.inputs, samples)
    else:
        payload = load_json(str(model))
        predictions = predict_points(dataset.inputs, posterior_from_dict(payload.get("posterior", payload)))
    frame = pd.DataFrame({"id": dataset.row_labels, "prediction": predictions})
    write_csv_artifact(cfg["out"], frame, _meta("predict", cfg))
    return [cfg["out"]]


def _estimator_pair(cfg: Dict):
    name = cfg.get("estimator") or "gaussian_mean"
    d = int(cfg["dims"])
    eps = float(cfg["epsilon"])
    if name == "gaussian_mean":
        return gaussian_mean_pair(d, 1.0, eps)
    if name == "input_perturbation":
        return input_perturbation_pair(d, 1.0, eps)
    if name == "linear_regression":
        bounds = _floats(cfg.get("bounds"), 2, "--bounds") or [1.0, 1.0]
        return linear_regression_pair(d, Bounds(*bounds), eps, _floats(cfg["split"], 3, "--split"))
    raise ConfigError("unknown estimator", estimator=name)


def _variants(cfg: Dict) -> List[str]:
    names = cfg.get("variants") or "nonprivate_lr,private_lr_noproj,robust_private_lr"
    if isinstance(names, str):
        names = [v.strip() for v in names.split(",") if v.strip()]
    try:
        return [MethodVariant(v).value for v in names]
    except ValueError:
        raise ConfigError("unknown method variant", variants=list(names))


def cmd_experiment(cfg: Dict) -> List[str]:
    _require(cfg, "mode", "out")
    mode = cfg["mode"]
    rng = root_stream(int(cfg["seed"])).child("experiment")
    out = cfg["out"]
    meta = _meta("experiment", cfg)
    progress = not cfg.get("quiet")

    if mode == "convergence":
        n_grid = _ints(cfg.get("n_grid") or "1000,10000,100000,1000000", "--n-grid")
        table = convergence_experiment(_estimator_pair(cfg), n_grid, int(cfg.get("seeds") or 200), rng, progress=progress)
        dump_json(out, {**meta, "result": table.to_dict()})
        frame = table.rows.assign(slope=table.slope)
        write_csv_artifact(_csv_path(out), frame, meta)
        return [out, _csv_path(out)]

    base = SweepConfig(
        repeats=int(cfg["repeats"]),
        n_test=int(cfg["n_test"]),
        split_seed=int(cfg["seed"]),
        variants=tuple(_variants(cfg)),
        budget_split=tuple(_floats(cfg["split"], 3, "--split")),
        bounds=_bounds_source(cfg),
        prior=_prior_config(cfg),
        workers=int(cfg["workers"]),
    )

    if mode == "sweep":
        axes = {
            "d": _ints(cfg.get("axis_d") or cfg["dims"], "--axis-d"),
            "n_private": _ints(cfg.get("axis_n_private") or cfg["n_private"], "--axis-n-private"),
            "n_nonprivate": _ints(cfg.get("axis_n_nonprivate") or cfg["n_nonprivate"], "--axis-n-nonprivate"),
            "epsilon": _floats(cfg.get("axis_epsilon") or cfg["epsilon"], name="--axis-epsilon"),
        }
        result = sweep(axes, base, rng, progress=progress)
        dump_json(out, {**meta, "result": result.to_dict()})
        write_csv_artifact(_csv_path(out), result.to_frame(), meta)
        improvement_csv = str(Path(out).with_suffix(".improvement.csv"))
        write_csv_artifact(improvement_csv, result.improvement_frame(), meta)
        return [out, _csv_path(out), improvement_csv]

    if mode == "curves":
        budget = _budget(cfg)
        split = SplitSpec(base.n_test, int(cfg["n_nonprivate"]), base.split_seed)
        if cfg.get("data"):
            source = read_dataset(cfg["data"])
        else:
            source = synthetic_source(int(cfg["dims"]))
        curves, frames = [], []
        for n_private in _ints(cfg["n_private"], "--n-private"):
            result = monte_carlo_cv(
                source,
                base.repeats,
                split,
                base.variants,
                budget,
                base.bounds,
                rng,
                prior=base.prior,
                n_private=n_private,
                workers=base.workers,
                progress=progress,
            )
            curves.append({"n_private": n_private, **result.to_dict()})
            frames.append(result.to_frame(n_private=n_private))
        dump_json(out, {**meta, "result": curves})
        write_csv_artifact(_csv_path(out), pd.concat(frames, ignore_index=True), meta)
        return [out, _csv_path(out)]

    raise ConfigError("unknown experiment mode", mode=mode)


COMMANDS = {
    "preprocess": cmd_preprocess,
    "tune": cmd_tune,
    "release": cmd_release,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "experiment": cmd_experiment,
}


# =============================================================================
# PARSER
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", help="JSON file with option values")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--epsilon", type=float)
    shared.add_argument("--split", help="p1,p2,p3")
    bounds = shared.add_mutually_exclusive_group()
    bounds.add_argument("--bounds", help="bx,by")
    bounds.add_argument("--multipliers", help="wx,wy")
    shared.add_argument("--dims", type=int)
    shared.add_argument("--out")
    shared.add_argument("--format", choices=["json", "csv"])
    shared.add_argument("--ledger", help=f"ledger file (default {DB_FILE})")
    shared.add_argument("--verbose", action="store_true", default=None)
    shared.add_argument("--quiet", action="store_true", default=None)

    parser = _Parser(prog=TOOL_NAME, description="Robust differentially private Bayesian linear regression")
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[shared], help="clean per-drug datasets")
    p.add_argument("--expression")
    p.add_argument("--responses")
    p.add_argument("--gene-order", dest="gene_order")
    p.add_argument("--genes", type=int)
    p.add_argument("--delimiter")
    p.add_argument("--raw", action="store_true", default=None, help="skip centering and normalisation")

    p = sub.add_parser("tune", parents=[shared], help="tune budget split and thresholds")
    p.add_argument("--n-aux", dest="n_aux", type=int)
    p.add_argument("--datasets", type=int)
    p.add_argument("--noise", type=int)
    p.add_argument("--scorer", choices=["gibbs", "fixed"])
    p.add_argument("--omega-grid", dest="omega_grid")

    p = sub.add_parser("release", parents=[shared], help="release noisy sufficient statistics")
    p.add_argument("--data")

    p = sub.add_parser("fit", parents=[shared], help="fit a posterior from statistics")
    p.add_argument("--stats")
    p.add_argument("--fit", choices=["fixed", "gibbs"])
    p.add_argument("--lam", type=float)
    p.add_argument("--lam0", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)

    p = sub.add_parser("predict", parents=[shared], help="predict with a fitted model")
    p.add_argument("--model")
    p.add_argument("--data")

    p = sub.add_parser("experiment", parents=[shared], help="run experiments")
    p.add_argument("mode", choices=["curves", "sweep", "convergence"])
    p.add_argument("--data")
    p.add_argument("--repeats", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--n-nonprivate", dest="n_nonprivate", type=int)
    p.add_argument("--n-private", dest="n_private")
    p.add_argument("--variants")
    p.add_argument("--fit", choices=["fixed", "gibbs"])
    p.add_argument("--m", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--axis-d", dest="axis_d")
    p.add_argument("--axis-n-private", dest="axis_n_private")
    p.add_argument("--axis-n-nonprivate", dest="axis_n_nonprivate")
    p.add_argument("--axis-epsilon", dest="axis_epsilon")
    p.add_argument("--estimator", choices=["gaussian_mean", "input_perturbation", "linear_regression"])
    p.add_argument("--n-grid", dest="n_grid")
    p.add_argument("--seeds", type=int)
    return parser


def resolve_args(argv: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    args = vars(build_parser().parse_args(argv))
    file_values = load_config_file(args.pop("config", None))
    defaults = {**DEFAULTS, "ledger": DB_FILE}
    cfg = resolve_config(args, file_values, defaults)
    # single --n-private for curves/sweep may be a list
    if isinstance(cfg.get("n_private"), (int, float)):
        cfg["n_private"] = str(int(cfg["n_private"]))
    return cfg


def _setup_logging(cfg: Dict):
    level = logging.DEBUG if cfg.get("verbose") else logging.WARNING if cfg.get("quiet") else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = resolve_args(argv)
        _setup_logging(cfg)
        command = cfg["command"]
        outputs = COMMANDS[command](cfg)
        log_run(command, cfg, outputs, cfg["ledger"])
        return 0
    except RobustDPError as e:
        _report(e)
        return 2 if isinstance(e, UsageError) else 1
    except OSError as e:
        _report(FileAccessError(e.strerror or str(e), path=e.filename))
        return 1


def _report(error: RobustDPError):
    sys.stderr.write(json.dumps(error.to_dict(), default=str, sort_keys=True) + "\n")


if __name__ == "__main__":
    sys.exit(main())
