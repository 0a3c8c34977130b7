"""Command-line entry point.

Subcommands cover the full workflow: synthetic data generation, closed-loop
simulation, estimator training, metric evaluation, the scenario-by-estimator
experiment matrix, and long-format series export for external plotting.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from hemsim.estimators import (
    GbtHyperParams,
    fit_gbt_bundle,
    fit_linear_bundle,
    train_test_split,
)
from hemsim.harness import (
    MatrixConfig,
    MetricsReport,
    ScenarioConfig,
    load_training_csv,
    run_experiment_matrix,
    run_sil,
    weighted_mae,
)
from hemsim.mpc import PriceModel
from hemsim.plant import PlantConfig, generate_disturbances, save_disturbances_csv
from hemsim.thermal_model import OFFENBACH_2021


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> _Parser:
    parser = _Parser(prog="hemsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command",
                               parser_class=_Parser)

    p = sub.add_parser("gen-data",
                       help="generate a synthetic disturbance CSV")
    p.add_argument("--seed", type=int, required=True, help="RNG seed")
    p.add_argument("--days", type=int, required=True, help="number of days")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--year", default="2021",
                   help="dataset label selecting climate/demand modifiers")
    p.add_argument("--ts", type=float, default=0.5, help="sample time in hours")

    p = sub.add_parser("simulate",
                       help="run one closed-loop scenario")
    p.add_argument("--config", required=True, help="scenario YAML file")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--log-solver", action="store_true",
                   help="also write per-step solver telemetry as JSON lines")

    p = sub.add_parser("train",
                       help="fit a residual estimator from a training CSV")
    p.add_argument("--data", required=True, help="training CSV path")
    p.add_argument("--model", required=True, choices=("linear", "gbt"))
    p.add_argument("--out", required=True, help="output bundle path")
    p.add_argument("--split-ratio", type=float, default=0.7,
                   help="chronological train fraction")
    p.add_argument("--trees", type=int, default=GbtHyperParams().n_trees,
                   help="boosting rounds (gbt only)")

    p = sub.add_parser("evaluate",
                       help="recompute metrics from recorded residuals")
    p.add_argument("--records", required=True,
                   help="residuals CSV from a finished run")
    p.add_argument("--out", required=True, help="output metrics.json path")
    p.add_argument("--trajectory", default=None,
                   help="trajectory CSV for comfort/monetary aggregates "
                        "(default: sibling trajectory.csv when present)")

    p = sub.add_parser("matrix",
                       help="run the full scenario-by-estimator grid")
    p.add_argument("--config", required=True, help="matrix YAML file")
    p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("plot-data",
                       help="emit long-format series for external plotting")
    p.add_argument("--records", required=True,
                   help="trajectory or residuals CSV")
    p.add_argument("--series", required=True,
                   help="comma-separated column names (residual_zN selects "
                        "the zone-N model error)")
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


# -- subcommand bodies -------------------------------------------------------


def _cmd_gen_data(args) -> int:
    series = generate_disturbances(args.year, args.days, args.seed, ts=args.ts)
    save_disturbances_csv(series, args.out)
    print(f"wrote {len(series)} steps to {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    scenario = ScenarioConfig.load(args.config)
    out = Path(args.out)
    records, metrics = run_sil(scenario, out_dir=out)
    if args.log_solver:
        with open(out / "solver_log.jsonl", "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps({"step": r.step,
                                     "aggregator": r.agg_telemetry,
                                     "distributor": r.dis_telemetry}) + "\n")
    print(f"{scenario.name}: weighted_mae {metrics.weighted_mae:.3e} K, "
          f"comfort dev {metrics.mean_abs_comfort_dev:.3f} K, "
          f"cost {metrics.monetary_cost_total:.0f} EUR")
    return 0


def _cmd_train(args) -> int:
    x, targets = load_training_csv(args.data)
    (x_tr, y_tr), (x_te, y_te) = train_test_split(x, targets,
                                                  ratio=args.split_ratio)
    if args.model == "linear":
        bundle = fit_linear_bundle(x_tr, y_tr)
    else:
        hyper = GbtHyperParams(n_trees=args.trees)
        bundle = fit_gbt_bundle(x_tr, y_tr, hyper=hyper)
    bundle.save(args.out)
    wth = OFFENBACH_2021.zone_weights()
    train_mae = weighted_mae(bundle.predict_matrix(x_tr), y_tr, wth)
    test_mae = weighted_mae(bundle.predict_matrix(x_te), y_te, wth)
    print(f"{args.model}: train MAE {train_mae:.6e} K, "
          f"test MAE {test_mae:.6e} K -> {args.out}")
    return 0


def _read_csv_columns(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty CSV")
        rows = [row for row in reader if row]
    data = np.asarray(rows, dtype=float)
    return {name.strip(): data[:, i] for i, name in enumerate(header)}


def _cmd_evaluate(args) -> int:
    cols = _read_csv_columns(args.records)
    try:
        eps = np.column_stack([cols[f"eps_{z}"] for z in range(1, 10)])
        eps_tilde = np.column_stack(
            [cols[f"eps_tilde_{z}"] for z in range(1, 10)])
    except KeyError as exc:
        raise ValueError(f"{args.records}: missing column {exc}") from None
    wth = OFFENBACH_2021.zone_weights()
    per_zone = np.mean(np.abs(eps_tilde - eps), axis=0)

    traj_path = args.trajectory
    if traj_path is None:
        sibling = Path(args.records).parent / "trajectory.csv"
        traj_path = sibling if sibling.exists() else None
    comfort = 0.0
    money = 0.0
    if traj_path is not None:
        traj = _read_csv_columns(traj_path)
        price = PriceModel()
        g_chp, g_rad = price.gas_cost_coefficients(0.5)
        p_grid = traj["P_grid"]
        comfort = float(np.mean(np.abs(traj["theta_b"] - 22.0)))
        elec = np.maximum(price.p_buy * 0.5 * p_grid,
                          price.p_sell * 0.5 * p_grid)
        money = float(elec.sum() + g_chp * traj["P_chp"].sum()
                      + g_rad * traj["Q_rad"].sum()
                      + price.p_peak * max(float(p_grid.max()), 0.0))
    report = MetricsReport(
        scenario=Path(args.records).stem,
        weighted_mae=float(wth @ per_zone),
        per_zone_mae=tuple(float(v) for v in per_zone),
        mean_abs_comfort_dev=comfort,
        monetary_cost_total=money)
    report.save(args.out)
    print(f"weighted_mae {report.weighted_mae:.6e} K -> {args.out}")
    return 0


def _cmd_matrix(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{args.config}: matrix config must be a mapping")
    kwargs = dict(raw)
    if "plant" in kwargs:
        kwargs["plant"] = PlantConfig.from_dict(kwargs["plant"])
    if "price" in kwargs:
        kwargs["price"] = PriceModel.from_dict(kwargs["price"])
    if "gbt_hyper" in kwargs:
        kwargs["gbt_hyper"] = GbtHyperParams(**kwargs["gbt_hyper"])
    cfg = MatrixConfig(**kwargs)
    if args.out is not None:
        cfg.out_dir = args.out
    result = run_experiment_matrix(cfg)
    print(result.format_summary())
    return 0


_SERIES_ALIASES = {f"residual_z{z}": f"eps_{z}" for z in range(1, 10)}


def _cmd_plot_data(args) -> int:
    cols = _read_csv_columns(args.records)
    names = [s.strip() for s in args.series.split(",") if s.strip()]
    if not names:
        raise UsageError("plot-data: --series must name at least one column")
    steps = cols.get("step")
    if steps is None:
        raise ValueError(f"{args.records}: no step column")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "series", "value"])
        for name in names:
            column = cols.get(_SERIES_ALIASES.get(name, name))
            if column is None:
                raise ValueError(f"{args.records}: unknown series '{name}'")
            for k, v in zip(steps, column):
                writer.writerow([int(k), name, f"{v:.12g}"])
    print(f"wrote {len(names)} series to {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "matrix": _cmd_matrix,
    "plot-data": _cmd_plot_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
