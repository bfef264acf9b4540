"""
Command-line surface: ``trajlearn <command> --config run.json --out DIR``.

Every command prints one JSON summary on stdout; logs go to stderr. Errors
print ``{"status": "error", ...}`` and exit with 1 (2 for configuration errors).
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .characterize import (
    bin_fit,
    coarse_study,
    ce_metric,
    mse_vs_truth,
    self_consistency,
    true_parameters,
)
from .config import ConfigError, RunConfig, load_config
from .dataio import (
    load_dataset,
    load_gru,
    read_report,
    save_dataset,
    save_gru,
    write_json,
    write_report_csv,
)
from .dataset import Dataset, DatasetMeta
from .qcore import SIGMA_X, SIGMA_Z
from .rnn import rnn_ce, rnn_trajectories, train_rnn
from .sdelearn import (
    SpamModel,
    dataset_predictions,
    distill,
    evaluate_ce,
    fit_spam,
    model_select,
    sde_trajectories,
    train_sde,
)
from .sme import PhysicalModel, generate_dataset

logger = logging.getLogger(__name__)

COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], Dict[str, Any]]] = {}


def command(name: str):
    def register(fn):
        COMMANDS[name] = fn
        return fn

    return register


def generator_model(cfg: RunConfig) -> PhysicalModel:
    """H_R = (Omega_R/2) sigma_x, L = sqrt(Gamma_d/2) (sigma_z + tilt sigma_x)."""
    gen = cfg.generate
    return PhysicalModel(
        h_r=0.5 * gen.omega_r * SIGMA_X,
        lindblad=np.sqrt(gen.gamma_d / 2.0) * (SIGMA_Z + gen.tilt * SIGMA_X),
        eta=gen.eta,
        gamma_up=gen.gamma_up,
        gamma_down=gen.gamma_down,
    )


def _dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.path is None:
        raise ConfigError("data.path is required for this command")
    return load_dataset(cfg.data.path)


def _gru_path(cfg: RunConfig) -> str:
    if cfg.data.gru_path is None:
        raise ConfigError("data.gru_path is required for this command")
    return cfg.data.gru_path


@command("generate")
def run_generate(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    gen = cfg.generate
    meta = DatasetMeta(
        dt=gen.dt,
        dt_fine=gen.dt_fine,
        t_grid=gen.t_grid,
        shots_per_setting=gen.shots_per_setting,
        seed=gen.seed,
        generator=generator_model(cfg).to_spec(),
        stepper=gen.stepper,
        kappa=gen.kappa,
        split_fractions=cfg.data.split_fractions,
    )
    data = generate_dataset(meta, workers=args.threads)
    save_dataset(data, args.out)
    splits = {name: len(data.subset(name)) for name in ("train", "validation", "test")}
    return {"out": str(args.out), "n_shots": len(data), "splits": splits}


@command("train-sde")
def run_train_sde(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    report = train_sde(_dataset(cfg), cfg.model, cfg.train, workers=args.threads)
    path = write_json(report, Path(args.out) / "train_sde.json")
    logger.info(f"Training took {report.wall_clock:.1f} s")
    return {
        "report": str(path),
        "variant": report.variant,
        "params": report.params,
        "best_val": report.best_val,
        "initial_val": report.initial_val,
        "epochs": report.epochs,
        "skipped_shots": report.skipped_shots,
    }


@command("train-rnn")
def run_train_rnn(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    model, report = train_rnn(_dataset(cfg), cfg.loss, cfg.train, workers=args.threads)
    out = Path(args.out)
    save_gru(model, out / "gru.json")
    path = write_json(report, out / "train_rnn.json")
    return {
        "report": str(path),
        "weights": str(out / "gru.json"),
        "best_val": report.best_val,
        "epochs": report.epochs,
    }


@command("distill")
def run_distill(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    data = _dataset(cfg)
    targets = rnn_trajectories(load_gru(_gru_path(cfg)), data, workers=args.threads)
    report = distill(data, targets, cfg.model, cfg.train, workers=args.threads)
    path = write_json(report, Path(args.out) / "distill.json")
    return {"report": str(path), "params": report.params, "final_mse": report.final_mse}


@command("bin-fit")
def run_bin_fit(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    data = _dataset(cfg)
    if cfg.data.gru_path is not None:
        series = rnn_trajectories(load_gru(cfg.data.gru_path), data, workers=args.threads)
        source = "rnn"
    elif data.has_truth:
        series = {shot.index: shot.truth for shot in data}
        source = "truth"
    else:
        raise ConfigError("bin-fit needs data.gru_path or a dataset with true trajectories")
    preps = {shot.index: shot.prep for shot in data}
    keys = sorted(series)
    report = bin_fit([series[k] for k in keys], [preps[k] for k in keys], data.meta.dt, cfg.study.delta)
    path = write_json(report, Path(args.out) / "bin_fit.json")
    return {"report": str(path), "source": source, "params": report.params, "errors": report.errors}


@command("spam-tomo")
def run_spam_tomo(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    spam = fit_spam(_dataset(cfg), fit_readout=args.fit_readout)
    path = write_json(spam.to_spec(), Path(args.out) / "spam.json")
    return {"spam": str(path), "preps": spam.preps.tolist(), "visibility": spam.visibility.tolist()}


@command("evaluate")
def run_evaluate(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    data = _dataset(cfg)
    test = data.subset("test")
    workers = args.threads
    result: Dict[str, Any] = {"n_test": len(test)}
    truth = None if data.meta.generator is None else PhysicalModel.from_spec(data.meta.generator)
    spam = SpamModel.ideal()
    model: Optional[PhysicalModel] = None
    if cfg.data.report_path is not None:
        report = read_report(cfg.data.report_path)
        model = report.physical_model()
        spam = report.spam_model()
        _, pi, y = dataset_predictions(model, spam, test, cfg.train.stepper, workers=workers)
        result["sde_ce"] = ce_metric(pi, y)
        result["sde_params"] = report.params
        calibration = self_consistency(pi, y, cfg.study.delta)
        result["self_consistency"] = {
            "epsilon": calibration.epsilon,
            "slope": calibration.slope,
            "intercept": calibration.intercept,
        }
        write_json(calibration, Path(args.out) / "self_consistency.json")
        if test.has_truth:
            series = sde_trajectories(model, spam, test, cfg.train.stepper, workers)
            result["sde_mse"] = mse_vs_truth(series, {s.index: s.truth for s in test if s.index in series}).total
    baseline = truth if truth is not None else model
    if baseline is not None:
        result["me_baseline_ce"] = evaluate_ce(baseline, test, spam, baseline=True, workers=workers)
    if truth is not None:
        result["true_ce"] = evaluate_ce(truth, test, spam, cfg.train.stepper, workers=workers)
        result["true_params"] = true_parameters(truth)
    if cfg.data.gru_path is not None:
        gru = load_gru(cfg.data.gru_path)
        result["rnn_ce"] = rnn_ce(gru, test, workers)
        if test.has_truth:
            series = rnn_trajectories(gru, test, workers)
            result["rnn_mse"] = mse_vs_truth(series, {s.index: s.truth for s in test}).total
    if args.input and len(args.input) > 1:
        reports = [read_report(source) for source in args.input]
        selection = model_select(reports, test, cfg.train.stepper, workers)
        write_json(selection, Path(args.out) / "selection.json")
        result["selection"] = [c.model_dump() for c in selection.comparisons]
    path = Path(args.out) / "evaluation.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return {"evaluation": str(path), **result}


@command("coarse-study")
def run_coarse_study(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    report = coarse_study(_dataset(cfg), cfg.study.k_list, cfg.model, cfg.train, workers=args.threads)
    out = Path(args.out)
    write_json(report, out / "coarse_study.json")
    write_report_csv(report, out / "coarse_study.csv")
    return {"report": str(out / "coarse_study.json"), "rows": [row.model_dump() for row in report.rows]}


@command("report")
def run_report(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    if not args.input:
        raise ConfigError("report needs --input")
    out = Path(args.out)
    if len(args.input) > 1 and out.suffix == ".csv":
        raise ConfigError("--out must be a directory when converting several reports")
    written = []
    for source in args.input:
        report = read_report(source)
        target = out if out.suffix == ".csv" else out / (Path(source).stem + ".csv")
        written.append(str(write_report_csv(report, target)))
    return {"csv": written}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajlearn",
        description="Learn qubit dynamics from continuous weak-measurement records",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="RunConfig JSON file (defaults when omitted)")
    parser.add_argument("--out", default="trajlearn-out", help="Output directory (or CSV file for report)")
    parser.add_argument("--seed", type=int, help="Override the training and generation seeds")
    parser.add_argument("--threads", type=int, default=1, help="Worker processes; results do not depend on it")
    parser.add_argument(
        "--input", nargs="+", help="Report JSON(s): converted by report, compared by evaluate"
    )
    parser.add_argument("--fit-readout", action="store_true", help="Fit readout visibilities (spam-tomo)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def _emit(payload: Dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, default=str) + "\n")
    sys.stdout.flush()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    started = time.perf_counter()
    try:
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        cfg = load_config(args.config).with_seed(args.seed)
        summary = COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        logger.error(str(e))
        _emit({"status": "error", "error": type(e).__name__, "message": str(e)})
        return 2
    except Exception as e:
        logger.exception(f"{args.command} failed")
        _emit({"status": "error", "error": type(e).__name__, "message": str(e)})
        return 1
    logger.info(f"{args.command} finished in {time.perf_counter() - started:.1f} s")
    _emit({"status": "ok", "command": args.command, **summary})
    return 0


if __name__ == "__main__":
    sys.exit(main())
