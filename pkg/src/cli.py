import argparse
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence
import numpy as np
import pandas as pd
from src.config import (
    DEFAULT_M, DEFAULT_K, DEFAULT_BAGS, HPD_ALPHA, OUTPUT_DIR, SELECTORS, FITTERS, ENGINES, NULL_METHODS,
    Z_COLUMN, get_output_path,
)
from src.custom_inference import (
    conditional_quantile_curves, customized_fdr, fdr_factorization, macro_inference, relevant_null,
    reproducibility_report,
)
from src.dataset import CsvSchema, Dataset, FunnelConfig, load_csv, replicate_pair, simulate_funnel
from src.engines import fit_empirical_null, locfdr_curve, locfdr_threshold
from src.errors import ConfigError, LaserError
from src.laser import generate_lasers
from src.reb import finite_bayes_ci, global_eb_inference, reb_inference
from src.relevance import bootstrap_relevance, fit_relevance, relevance_table
from src.utils import write_frame, write_summary
from src.logger import LEVELS, get_logger, set_level

# Configure logging
logger = get_logger(__name__)

EXIT_CODES = {"ok": 0, "usage": 1, "data": 2, "numerical": 3}


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors raised as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def _parse_target(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError as e:
        raise ConfigError(f"Invalid target '{text}': use comma-separated numbers") from e


def _run_config(args: argparse.Namespace) -> Dict:
    return {key: value for key, value in sorted(vars(args).items()) if key not in ("handler", "log_level")}


def _base_funnel_config(args: argparse.Namespace) -> FunnelConfig:
    if getattr(args, "funnel_config", None):
        with open(args.funnel_config, encoding="utf-8") as handle:
            config = FunnelConfig.from_json(handle.read())
    else:
        config = FunnelConfig()
    return config


def _funnel_config(args: argparse.Namespace) -> FunnelConfig:
    return replace(_base_funnel_config(args), seed=_require_seed(args))


def _load_input(args: argparse.Namespace) -> Dataset:
    if args.input:
        schema = CsvSchema(z_column=args.z_column, covariates=args.covariates)
        return load_csv(args.input, schema)
    return simulate_funnel(_funnel_config(args))


def _targets(args: argparse.Namespace, data: Dataset) -> np.ndarray:
    if getattr(args, "all_targets", False):
        return np.unique(data.x, axis=0)
    if not args.target:
        raise ConfigError("At least one --target is required")
    targets = np.asarray([_parse_target(t) for t in args.target], dtype=float)
    if targets.shape[1] != data.p:
        raise ConfigError(f"Targets have {targets.shape[1]} values, the data has {data.p} covariates")
    return targets


def _require_seed(args: argparse.Namespace) -> int:
    if args.seed is None:
        raise ConfigError(f"--seed is required for '{args.command}'")
    return args.seed


def _model_options(args: argparse.Namespace) -> Dict:
    return {"m": args.m, "selector": args.selector, "k": args.k, "fitter": args.fitter}


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    funnel = _base_funnel_config(args)
    if args.pair:
        if not args.seeds or len(args.seeds) != 2:
            raise ConfigError("--pair needs --seeds S1 S2")
        datasets = replicate_pair(funnel, args.seeds[0], args.seeds[1])
        names = [f"funnel_seed{seed}.csv" for seed in args.seeds]
    else:
        datasets = [simulate_funnel(replace(funnel, seed=_require_seed(args)))]
        names = ["funnel.csv"]
    for dataset, name in zip(datasets, names):
        path = write_frame(dataset.to_frame(), get_output_path(args.output_dir, name), config)
        print(f"{path}: {dataset.n} rows")
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    config = _run_config(args)
    data = _load_input(args)
    targets = _targets(args, data)
    model = fit_relevance(data, **_model_options(args))
    table = relevance_table(model, targets)
    write_frame(table, get_output_path(args.output_dir, "relevance_table.csv"), config)
    write_frame(conditional_quantile_curves(model, data, targets),
                get_output_path(args.output_dir, "conditional_quantiles.csv"), config)

    u = np.linspace(0.005, 0.995, 199)
    curves = []
    for i, target in enumerate(targets):
        if args.bootstrap:
            bands = bootstrap_relevance(data, target, B=args.bootstrap, seed=_require_seed(args), u_grid=u,
                                        **_model_options(args))
            frame = bands.to_frame()
            if args.plots:
                from src.plotting import plot_relevance
                plot_relevance(bands, get_output_path(args.output_dir, f"relevance_{i}.svg"), config)
        else:
            frame = pd.DataFrame({"u": u, "d": model.density(target, u)})
        frame.insert(0, "target", i)
        curves.append(frame)
    write_frame(pd.concat(curves, ignore_index=True), get_output_path(args.output_dir, "relevance_curves.csv"), config)

    for _, row in table.iterrows():
        profile = ",".join(f"{row[name]:g}" for name in data.covariate_names)
        print(f"x={profile}: {row['status']} CUST={row['cust']:.6g} rel={row['rel']:.6g} N_rel={row['n_rel']:.6g}")
    write_summary({"targets": table.to_dict(orient="records"), "selected": model.selected_terms()},
                  get_output_path(args.output_dir, "diagnose.json"), config)
    return 0


def cmd_laser(args: argparse.Namespace) -> int:
    config = _run_config(args)
    seed = _require_seed(args)
    data = _load_input(args)
    targets = _targets(args, data)
    model = fit_relevance(data, **_model_options(args))
    samples = generate_lasers(data, model, targets, n=args.n, seed=seed)
    for i, sample in enumerate(samples):
        write_frame(sample.to_frame(), get_output_path(args.output_dir, f"laser_{i}.csv"), config)
        write_summary(sample.summary(), get_output_path(args.output_dir, f"laser_{i}.json"), config)
        if args.plots:
            from src.plotting import plot_laser
            plot_laser(sample, data.z, get_output_path(args.output_dir, f"laser_{i}.svg"), config)
        print(f"x={sample.x0.tolist()}: n={sample.n} flat={sample.flat} acceptance={sample.acceptance_rate:.4g}")
    return 0


def cmd_micro(args: argparse.Namespace) -> int:
    config = _run_config(args)
    seed = _require_seed(args)
    data = _load_input(args)
    target = _targets(args, data)[0]
    z0 = args.z
    grid = np.linspace(min(np.min(data.z), z0), max(np.max(data.z), z0), 500)
    model = fit_relevance(data, **_model_options(args))
    custom = customized_fdr(data, target, args.engine, seed=seed, bags=args.bags, adjust=args.adjust, grid=grid,
                            model=None if args.adjust else model, **_model_options(args))
    global_null = fit_empirical_null(data.z)
    global_curve = locfdr_curve(data.z, grid, null=global_null)
    relevant = relevant_null(data, target, args.null_method, seed, model=model)
    factors = fdr_factorization(global_curve, relevant, global_null, model, target, z0)

    frame = pd.DataFrame({"z": grid, "fdr_global": global_curve.fdr, "fdr_customized": custom.fdr,
                          "f": custom.f, "f0_component": custom.pi0 * custom.f0})
    write_frame(frame, get_output_path(args.output_dir, "fdr_curves.csv"), config)
    value = float(custom.evaluate(z0))
    summary = {
        "x0": target.tolist(), "z0": z0, "fdr_customized": value, "fdr_global": float(global_curve.evaluate(z0)),
        "flat": model.is_flat(target), "threshold": locfdr_threshold(args.alpha), "relevant_null": relevant.as_dict(),
        "global_null": global_null.as_dict(), "customized_null": custom.null.as_dict(), "factorization": factors.as_dict(),
    }
    write_summary(summary, get_output_path(args.output_dir, "micro.json"), config)
    if args.plots:
        from src.plotting import plot_fdr_curves
        plot_fdr_curves({"global": global_curve, "customized": custom}, get_output_path(args.output_dir, "fdr.svg"),
                        config, threshold=locfdr_threshold(args.alpha))
    print(f"fdr(z={z0:g} | x={','.join(f'{v:g}' for v in target)}) = {value:.6g} (global {summary['fdr_global']:.6g})")
    return 0


def cmd_macro(args: argparse.Namespace) -> int:
    config = _run_config(args)
    seed = _require_seed(args)
    data = _load_input(args)
    report = macro_inference(data, args.engine, args.alpha, seed, threshold_rule=args.threshold,
                             customized=not args.global_only, adjust=args.adjust, **_model_options(args))
    write_frame(report.frame, get_output_path(args.output_dir, "report.csv"), config)
    write_frame(report.ranked(top=100), get_output_path(args.output_dir, "top_dps.csv"), config)
    write_summary(report.summary(), get_output_path(args.output_dir, "macro.json"), config)
    if args.plots:
        from src.plotting import plot_dps
        threshold = report.threshold if report.engine == "locfdr" else None
        plot_dps(report.frame["dps"].to_numpy(), get_output_path(args.output_dir, "dps.svg"), config, threshold)
    summary = report.summary()
    print(f"R={summary['R']} fr={summary['fr']} miss={summary['miss']} threshold={summary['threshold']:g}")
    return 0


def cmd_reb(args: argparse.Namespace) -> int:
    config = _run_config(args)
    seed = _require_seed(args)
    data = _load_input(args)
    target = _targets(args, data)[0]
    result = reb_inference(data, target, args.z, seed, bags=args.bags, alpha=args.hpd_alpha,
                           adjust=not args.no_adjust, **_model_options(args))
    baseline = global_eb_inference(data, args.z, target, alpha=args.hpd_alpha, adjust=not args.no_adjust)
    summary = {"reb": result.summary(), "global_eb": baseline.summary()}
    if args.finite_bayes:
        interval = finite_bayes_ci(data, target, result.y0, B=args.finite_bayes, alpha=args.hpd_alpha, seed=seed,
                                   adjust=not args.no_adjust, **_model_options(args))
        summary["finite_bayes"] = interval.summary()
    write_frame(result.prior.to_frame(), get_output_path(args.output_dir, "prior.csv"), config)
    write_frame(result.posterior_z.to_frame(), get_output_path(args.output_dir, "posterior.csv"), config)
    write_summary(summary, get_output_path(args.output_dir, "reb.json"), config)
    if args.plots:
        from src.plotting import plot_posterior
        plot_posterior(result.posterior_y, get_output_path(args.output_dir, "posterior.svg"), config,
                       result.prior.weights)
    print(f"posterior mean {result.posterior_y.mean:.6g} (y), {result.posterior_z.mean:.6g} (z); "
          f"HPD ({result.posterior_z.lower:.4g}, {result.posterior_z.upper:.4g})")
    return 0


def cmd_replicate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    seed = _require_seed(args)
    if args.inputs:
        schema = CsvSchema(z_column=args.z_column, covariates=args.covariates)
        first, second = (load_csv(path, schema) for path in args.inputs)
    else:
        if not args.seeds or len(args.seeds) != 2:
            raise ConfigError("replicate needs --seeds S1 S2 or --inputs A B")
        first, second = replicate_pair(_base_funnel_config(args), args.seeds[0], args.seeds[1])
    report = reproducibility_report(first, second, args.engine, args.alpha, seed, customized=not args.global_only,
                                    **_model_options(args))
    common = first.to_frame().iloc[report.intersection]
    write_frame(common, get_output_path(args.output_dir, "common_discoveries.csv"), config)
    write_summary(report.summary(), get_output_path(args.output_dir, "replicate.json"), config)
    summary = report.summary()
    print(f"R1={summary['R1']} R2={summary['R2']} common={summary['common']} true={summary['common_true']}")
    return 0


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--m", type=int, default=DEFAULT_M, help="Number of LP basis functions for z")
    parser.add_argument("--k", type=int, default=DEFAULT_K, help="LP degree per continuous covariate")
    parser.add_argument("--selector", choices=SELECTORS, default="bic")
    parser.add_argument("--fitter", choices=FITTERS, default="ols")


def _add_input_flags(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="CSV with a score column and covariates")
    source.add_argument("--funnel", action="store_true", help="Simulate the funnel data set from --seed")
    parser.add_argument("--funnel-config", help="Funnel configuration JSON")
    parser.add_argument("--z-column", default=Z_COLUMN)
    parser.add_argument("--covariates", nargs="+", help="Covariate columns (default: every other numeric column)")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="laser", description="Relevance-integrated large-scale inference")
    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Master seed for every stochastic step")
    common.add_argument("--output-dir", default=OUTPUT_DIR)
    common.add_argument("--plots", action="store_true", help="Also write SVG plots")
    common.add_argument("--log-level", type=str.upper, choices=LEVELS, help="Override LASER_LOG_LEVEL for this run")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    simulate = subparsers.add_parser("simulate", parents=[common], help="Simulate data sets")
    simulate.add_argument("model", choices=["funnel"])
    simulate.add_argument("--funnel-config", help="Funnel configuration JSON")
    simulate.add_argument("--pair", action="store_true", help="Write two independent replications")
    simulate.add_argument("--seeds", type=int, nargs=2)
    simulate.set_defaults(handler=cmd_simulate)

    diagnose = subparsers.add_parser("diagnose", parents=[common], help="Relevance diagnostics")
    _add_input_flags(diagnose)
    _add_model_flags(diagnose)
    diagnose.add_argument("--target", action="append", help="Covariate profile, comma-separated")
    diagnose.add_argument("--all-targets", action="store_true", help="Every unique covariate profile")
    diagnose.add_argument("--bootstrap", type=int, default=0, help="Bootstrap replicates for d_x bands")
    diagnose.set_defaults(handler=cmd_diagnose)

    laser = subparsers.add_parser("laser", parents=[common], help="Generate artificial relevant samples")
    _add_input_flags(laser)
    _add_model_flags(laser)
    laser.add_argument("--target", action="append")
    laser.add_argument("--n", type=int, help="LASER size (default N)")
    laser.set_defaults(handler=cmd_laser)

    micro = subparsers.add_parser("micro", parents=[common], help="Customized fdr for one case")
    _add_input_flags(micro)
    _add_model_flags(micro)
    micro.add_argument("--target", action="append")
    micro.add_argument("--z", type=float, required=True)
    micro.add_argument("--engine", choices=ENGINES, default="locfdr")
    micro.add_argument("--null-method", choices=NULL_METHODS, default="laser")
    micro.add_argument("--alpha", type=float, default=0.05)
    micro.add_argument("--bags", type=int, default=1)
    micro.add_argument("--adjust", action="store_true", help="Regression-adjust before relevance analysis")
    micro.set_defaults(handler=cmd_micro)

    macro = subparsers.add_parser("macro", parents=[common], help="Customized inference for every case")
    _add_input_flags(macro)
    _add_model_flags(macro)
    macro.add_argument("--engine", choices=ENGINES, default="locfdr")
    macro.add_argument("--alpha", type=float, default=0.05)
    macro.add_argument("--threshold", type=float, help="Override the locfdr cutoff min(0.2, 2 alpha)")
    macro.add_argument("--global", dest="global_only", action="store_true", help="Run the global engine only")
    macro.add_argument("--adjust", action="store_true")
    macro.set_defaults(handler=cmd_macro)

    reb = subparsers.add_parser("reb", parents=[common], help="Relevance-integrated empirical Bayes")
    _add_input_flags(reb)
    _add_model_flags(reb)
    reb.add_argument("--target", action="append")
    reb.add_argument("--z", type=float, required=True)
    reb.add_argument("--bags", type=int, default=DEFAULT_BAGS)
    reb.add_argument("--hpd-alpha", type=float, default=HPD_ALPHA)
    reb.add_argument("--no-adjust", action="store_true", help="Skip the regression adjustment")
    reb.add_argument("--finite-bayes", type=int, default=0, help="Finite-Bayes bootstrap cycles")
    reb.set_defaults(handler=cmd_reb)

    replicate = subparsers.add_parser("replicate", parents=[common], help="Reproducibility of discoveries")
    replicate.add_argument("--inputs", nargs=2, help="Two replication CSVs")
    replicate.add_argument("--seeds", type=int, nargs=2, help="Simulate a funnel pair with these seeds")
    replicate.add_argument("--funnel-config", help="Funnel configuration JSON")
    replicate.add_argument("--z-column", default=Z_COLUMN)
    replicate.add_argument("--covariates", nargs="+")
    _add_model_flags(replicate)
    replicate.add_argument("--engine", choices=ENGINES, default="locfdr")
    replicate.add_argument("--alpha", type=float, default=0.05)
    replicate.add_argument("--global", dest="global_only", action="store_true")
    replicate.set_defaults(handler=cmd_replicate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        if args.log_level:
            set_level(args.log_level)
        logger.debug(f"Running command {args.command}")
        code = args.handler(args)
        logger.info({"command": args.command, "message": "Command finished"})
        return code
    except LaserError as e:
        logger.error({"error": str(e), "exit_code": e.exit_code, "message": "Command failed"})
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error({"error": str(e), "message": "I/O failure"})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES["data"]


if __name__ == "__main__":
    sys.exit(main())
