"""Command line entry points for the full pipeline.

Subcommands mirror the workflow: gen-synth, pretrain, adapt, forecast, eval,
perturb, export-embeddings. Exit codes: 0 success, 1 usage or config error,
2 data error, 3 numeric failure; every failure prints one diagnostic line to
stderr. Delimited outputs get a rendered figure next to them unless
--no-figures is passed.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import logging
import sys
from pathlib import Path

from .adapt import adapt_run
from .config import SEED_ENV_VAR, load_run_config, resolve_seed
from .data import (
    SynthParams,
    chronological_split,
    load_checkpoint,
    load_dataset_dir,
    save_checkpoint,
    synth_generate,
    write_dataset_dir,
)
from .errors import DataError, InputError, NumericError
from .evaluate import (
    NoiseSpec,
    evaluate_point_forecasts,
    export_embeddings,
    perturbation_sweep,
    write_embeddings_csv,
    write_report,
    write_sweep_csv,
)
from .forecast import MODES, rollout, write_forecast_csv
from .model import ModelConfig
from .training import pretrain

logger = logging.getLogger("strada")


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit 1, not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise InputError(f"{flag} expects comma-separated integers, got {text!r}") from None


def _float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise InputError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def _sibling(out, suffix: str) -> str:
    """Path next to `out` with the given suffix, never `out` itself."""
    p = Path(out)
    if p.suffix == suffix:
        return str(p) + suffix
    return str(p.with_suffix(suffix))


def _persistence_path(out) -> str:
    p = Path(out)
    return str(p.with_name(p.stem + ".persistence" + p.suffix))


def _origin_index(bundle, text: str) -> int:
    try:
        ts = _dt.datetime.fromisoformat(text)
    except ValueError:
        raise InputError(f"--origin must be an ISO timestamp, got {text!r}") from None
    lookup = {t: i for i, t in enumerate(bundle.timestamps)}
    if ts in lookup:
        return lookup[ts]
    if ts == bundle.timestamps[-1] + bundle.frequency:
        return bundle.n_steps
    raise InputError(
        f"origin {text} not in the data; timestamps run "
        f"{bundle.timestamps[0].isoformat()} .. {bundle.timestamps[-1].isoformat()}"
    )


def _log_config(cfg) -> None:
    logger.info("resolved config: %s", cfg.canonical())


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_gen_synth(args) -> int:
    seed = resolve_seed(args.seed, 0)
    bundle = synth_generate(seed, args.nodes, args.steps, SynthParams(), name=args.name)
    write_dataset_dir(args.out, bundle)
    logger.info("seed %d resolved (%s overrides --seed when set)", seed, SEED_ENV_VAR)
    print(
        f"wrote {args.out}: {bundle.n_steps} steps x {bundle.graph.num_nodes} nodes "
        f"({bundle.name})"
    )
    return 0


def _cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    _log_config(cfg)
    datasets = [load_dataset_dir(p) for p in args.data]
    token_dim = cfg.featurize.token_dim(datasets[0].series.shape[2])
    model_cfg = ModelConfig(token_dim=token_dim, **cfg.model)

    ckpt, report = pretrain(datasets, model_cfg, cfg.featurize, cfg.train, log=logger.info)
    save_checkpoint(ckpt, args.out)
    log_path = _sibling(args.out, ".log")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.log_lines()) + "\n")
    if args.figures:
        from .figures import training_curves

        logger.info("figure: %s", training_curves(report, _sibling(args.out, ".png")))
    best = report.records[report.best_epoch]
    print(
        f"checkpoint {args.out} (best epoch {report.best_epoch}: "
        f"train NLL {best.train_nll:.4f}, val NLL {best.val_nll:.4f}); log {log_path}"
    )
    return 0


def _cmd_adapt(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    plan = cfg.adapt
    overrides = {
        k: v
        for k, v in (
            ("method", args.method),
            ("rank", args.rank),
            ("k_layers", args.k_layers),
            ("fraction", args.fraction),
        )
        if v is not None
    }
    if overrides:
        plan = dataclasses.replace(plan, **overrides)
    cfg = dataclasses.replace(cfg, adapt=plan)
    _log_config(cfg)

    ckpt = load_checkpoint(args.ckpt)
    bundle = load_dataset_dir(args.data)
    out_ckpt, report = adapt_run(ckpt, bundle, plan, cfg.train, log=logger.info)
    save_checkpoint(out_ckpt, args.out)
    log_path = _sibling(args.out, ".log")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.train_report.log_lines()) + "\n")
    if args.figures:
        from .figures import training_curves

        logger.info(
            "figure: %s", training_curves(report.train_report, _sibling(args.out, ".png"))
        )
    print(
        f"adapted with {report.method}: target val NLL "
        f"{report.val_nll_before:.4f} -> {report.val_nll_after:.4f} "
        f"({report.trainable_parameters} trainable parameters); checkpoint {args.out}"
    )
    return 0


def _cmd_forecast(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    overrides = {
        k: v
        for k, v in (
            ("horizon", args.horizon),
            ("n_samples", args.samples),
            ("mode", args.mode),
        )
        if v is not None
    }
    roll = dataclasses.replace(cfg.rollout, **overrides)
    cfg = dataclasses.replace(cfg, rollout=roll)
    _log_config(cfg)

    ckpt = load_checkpoint(args.ckpt)
    bundle = load_dataset_dir(args.data)
    t0 = _origin_index(bundle, args.origin)
    levels = _float_list(args.quantiles, "--quantiles")
    fan = rollout(
        ckpt,
        bundle.series[:t0],
        bundle.graph,
        roll,
        bundle.timestamps,
        bundle.frequency,
        jobs=args.jobs,
    )
    write_forecast_csv(args.out, fan, levels=levels)
    if args.figures:
        from .figures import fan_chart

        logger.info(
            "figure: %s",
            fan_chart(fan, bundle.series[:t0], _sibling(args.out, ".png")),
        )
    print(
        f"forecast from {args.origin}: {roll.horizon} steps x "
        f"{fan.n_nodes} nodes x {roll.n_samples} samples -> {args.out}"
    )
    return 0


def _cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    _log_config(cfg)
    ckpt = load_checkpoint(args.ckpt)
    bundle = load_dataset_dir(args.data)
    splits = chronological_split(bundle)
    if args.horizons is not None:
        horizons = _int_list(args.horizons, "--horizons")
    else:
        horizons = list(cfg.eval.horizons)
    roll = cfg.rollout
    if args.samples is not None:
        roll = dataclasses.replace(roll, n_samples=args.samples)
    max_origins = args.max_origins if args.max_origins is not None else cfg.eval.max_origins

    model_rep, persist_rep = evaluate_point_forecasts(
        ckpt,
        bundle,
        splits,
        horizons=horizons,
        roll_cfg=roll,
        split=args.split if args.split is not None else cfg.eval.split,
        max_origins=max_origins,
        jobs=args.jobs,
    )
    write_report(args.out, model_rep)
    persist_path = _persistence_path(args.out)
    write_report(persist_path, persist_rep)
    if args.figures:
        from .figures import metric_chart

        logger.info(
            "figure: %s",
            metric_chart(model_rep, _sibling(args.out, ".png"), baseline=persist_rep),
        )
    for h in model_rep.horizons:
        base = persist_rep.by_horizon(h.horizon)
        print(
            f"H={h.horizon}: MAE {h.mae:.4f} RMSE {h.rmse:.4f} MAPE {h.mape:.2f}% "
            f"(persistence MAE {base.mae:.4f}; {h.n_pairs} pairs, {h.n_masked} masked)"
        )
    print(f"reports: {args.out} and {persist_path}")
    return 0


def _cmd_perturb(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    _log_config(cfg)
    ckpt = load_checkpoint(args.ckpt)
    bundle = load_dataset_dir(args.data)
    splits = chronological_split(bundle)
    if args.sigmas is not None:
        sigmas = _float_list(args.sigmas, "--sigmas")
    else:
        sigmas = list(cfg.eval.sigmas)
    spec = NoiseSpec(sigmas=tuple(sigmas), seed=cfg.seed)
    max_origins = args.max_origins if args.max_origins is not None else cfg.eval.max_origins

    sweep = perturbation_sweep(
        ckpt,
        bundle,
        splits,
        spec,
        horizons=cfg.eval.horizons,
        roll_cfg=cfg.rollout,
        split=args.split,
        max_origins=max_origins,
        jobs=args.jobs,
    )
    write_sweep_csv(args.out, sweep)
    if args.figures:
        from .figures import sweep_chart

        logger.info("figure: %s", sweep_chart(sweep, _sibling(args.out, ".png")))
    for sigma, rep in sweep:
        worst = rep.horizons[-1]
        print(f"sigma={sigma:g}: H={worst.horizon} MAE {worst.mae:.4f}")
    print(f"sweep written to {args.out}")
    return 0


def _cmd_export_embeddings(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    _log_config(cfg)
    ckpt = load_checkpoint(args.ckpt)
    bundle = load_dataset_dir(args.data)
    lines = export_embeddings(ckpt, bundle, args.limit, seed=cfg.seed)
    write_embeddings_csv(args.out, lines)
    print(f"exported {len(lines) - 1} embedding rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def _add_common(p: argparse.ArgumentParser, jobs: bool = True, figures: bool = True) -> None:
    p.add_argument("--config", default=None, help="run config JSON file (default: built-ins)")
    p.add_argument(
        "--seed",
        type=int,
        default=None,
        help=f"seed override (default: config value; {SEED_ENV_VAR} beats both)",
    )
    if jobs:
        p.add_argument(
            "--jobs",
            type=int,
            default=1,
            help="worker threads; results identical for any value (default: 1)",
        )
    if figures:
        p.add_argument(
            "--figures",
            action=argparse.BooleanOptionalAction,
            default=True,
            help="render a PNG next to the output file (default: on)",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="strada", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset directory")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default: 0)")
    p.add_argument("--nodes", type=int, default=12, help="number of graph nodes (default: 12)")
    p.add_argument("--steps", type=int, default=4000, help="number of time steps (default: 4000)")
    p.add_argument("--name", default=None, help="dataset name (default: synth-<seed>)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("pretrain", help="train a fresh model on one or more datasets")
    p.add_argument("--data", nargs="+", required=True, help="dataset directories")
    p.add_argument("--out", required=True, help="checkpoint output path")
    _add_common(p, jobs=False)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("adapt", help="fine-tune a checkpoint on a target dataset")
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True, help="target dataset directory")
    p.add_argument(
        "--method", choices=["lora", "topk", "full"], default=None,
        help="adaptation plan (default: config value, lora)",
    )
    p.add_argument("--rank", type=int, default=None, help="adapter rank (default: 4)")
    p.add_argument(
        "--k-layers", type=int, default=None, help="layers to unfreeze for topk (default: 1)"
    )
    p.add_argument(
        "--fraction", type=float, default=None,
        help="chronological fraction of target train windows to use (default: 1.0)",
    )
    p.add_argument("--out", required=True, help="adapted checkpoint output path")
    _add_common(p, jobs=False)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("forecast", help="roll out a probabilistic forecast from an origin")
    p.add_argument("--ckpt", required=True, help="checkpoint to forecast with")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--origin", required=True, help="ISO timestamp of the first forecast step")
    p.add_argument("--horizon", type=int, default=None, help="steps to forecast (default: 12)")
    p.add_argument("--samples", type=int, default=None, help="trajectories (default: 100)")
    p.add_argument(
        "--mode", choices=list(MODES), default=None,
        help="draw from the head or follow its mean (default: sample)",
    )
    p.add_argument(
        "--quantiles", default="0.1,0.9",
        help="comma-separated quantile levels for the CSV (default: 0.1,0.9)",
    )
    p.add_argument("--out", required=True, help="forecast CSV path")
    _add_common(p)
    p.set_defaults(func=_cmd_forecast)

    p = sub.add_parser("eval", help="walk-forward point-forecast metrics vs persistence")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument(
        "--horizons", default=None,
        help="comma-separated horizons (default: config eval.horizons, 3,6,12)",
    )
    p.add_argument("--samples", type=int, default=None, help="trajectories per fan (default: 100)")
    p.add_argument(
        "--split", choices=["train", "val", "test"], default=None,
        help="split to evaluate (default: config eval.split, test)",
    )
    p.add_argument(
        "--max-origins", type=int, default=None,
        help="cap on forecast origins (default: config value, none)",
    )
    p.add_argument("--out", required=True, help="metric report path (one JSON object per horizon)")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("perturb", help="input-noise robustness sweep")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument(
        "--sigmas", default=None,
        help="comma-separated noise sigmas, ascending (default: config eval.sigmas)",
    )
    p.add_argument(
        "--split", choices=["train", "val", "test"], default="val",
        help="split to evaluate (default: val)",
    )
    p.add_argument(
        "--max-origins", type=int, default=None,
        help="cap on forecast origins (default: config value, none)",
    )
    p.add_argument("--out", required=True, help="sweep CSV path")
    _add_common(p)
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser(
        "export-embeddings", help="dump final-layer embeddings of sampled windows"
    )
    p.add_argument("--ckpt", required=True, help="checkpoint to read")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--limit", type=int, default=1000, help="rows to export (default: 1000)")
    p.add_argument("--out", required=True, help="embeddings CSV path")
    _add_common(p, jobs=False, figures=False)
    p.set_defaults(func=_cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
