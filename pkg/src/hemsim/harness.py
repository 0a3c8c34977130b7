"""Closed-loop co-simulation harness.

Wires the surrogate plant to the two-layer controller, measures per-step
model errors, collects estimator training data, runs the capacity-mismatch
scenarios and produces the summary experiment matrix.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from joblib import Parallel, delayed

from hemsim.estimators import (
    N_HIST,
    EstimatorBundle,
    GbtHyperParams,
    fit_gbt_bundle,
    fit_linear_bundle,
    train_test_split,
)
from hemsim.mpc import (
    COMFORT_SETPOINT_C,
    HORIZON_STEPS,
    TS_HOURS,
    AggregatorController,
    CompensationPlan,
    DistributorController,
    OcpInfeasibleError,
    PriceModel,
    default_ocp_settings,
    make_default_specs,
)
from hemsim.plant import (
    DisturbanceSeries,
    Plant,
    PlantConfig,
    generate_disturbances,
    load_disturbances_csv,
    measure_error,
)
from hemsim.qp import QpSettings
from hemsim.thermal_model import (
    COUPLING_PAIRS,
    OFFENBACH_2021,
    BuildingParameters,
    step as model_step,
)

log = logging.getLogger(__name__)

SCENARIO_SCHEMA_VERSION = 1

TRAINING_CSV_COLUMNS = (
    "step", "tod", "doy", "theta_air", "theta_air_lag1", "theta_air_lag2",
    "p_dem",
) + tuple(f"eps_{z}" for z in range(1, 10))


# -- scenario configuration --------------------------------------------------


@dataclass(frozen=True)
class DataSource:
    """Where the exogenous series come from."""

    kind: str = "generated"        # "generated" | "csv"
    seed: int = 0
    year: str = "2021"
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("generated", "csv"):
            raise ValueError("data source kind must be 'generated' or 'csv'")
        if self.kind == "csv" and not self.path:
            raise ValueError("csv data source needs a path")


@dataclass(frozen=True)
class CapacityMode:
    """How the controller's thermal capacities deviate from the plant's."""

    kind: str = "exact"            # "exact" | "scale" | "shifted"
    factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "scale", "shifted"):
            raise ValueError("capacity mode must be exact, scale or shifted")
        if self.kind == "scale" and not self.factor > 0:
            raise ValueError("capacity scale factor must be positive")


@dataclass(frozen=True)
class EstimatorChoice:
    """Which residual estimator compensates the controller models."""

    kind: str = "none"             # "none" | "linear" | "gbt" | "oracle"
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("none", "linear", "gbt", "oracle"):
            raise ValueError("estimator kind must be none, linear, gbt or oracle")


@dataclass(frozen=True)
class ScenarioConfig:
    """One self-contained closed-loop run."""

    name: str
    duration_days: int
    data_source: DataSource = DataSource()
    capacity_mode: CapacityMode = CapacityMode()
    estimator: EstimatorChoice = EstimatorChoice()
    plant: PlantConfig = PlantConfig()
    price: PriceModel = PriceModel()
    horizon_np: int = HORIZON_STEPS
    ts: float = TS_HOURS

    def __post_init__(self):
        if self.duration_days < 2:
            # two days minimum so lag features have a warm-up period
            raise ValueError("scenario duration must be at least 2 days")
        if self.horizon_np < 1 or not self.ts > 0:
            raise ValueError("invalid horizon or sample time")

    @property
    def n_steps(self) -> int:
        return self.duration_days * int(round(24.0 / self.ts))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCENARIO_SCHEMA_VERSION,
            "name": self.name,
            "duration_days": self.duration_days,
            "data_source": {
                "kind": self.data_source.kind,
                "seed": self.data_source.seed,
                "year": self.data_source.year,
                "path": self.data_source.path,
            },
            "capacity_mode": {
                "kind": self.capacity_mode.kind,
                "factor": self.capacity_mode.factor,
                "seed": self.capacity_mode.seed,
            },
            "estimator": {
                "kind": self.estimator.kind,
                "path": self.estimator.path,
            },
            "plant": self.plant.to_dict(),
            "price": self.price.to_dict(),
            "horizon_np": self.horizon_np,
            "ts": self.ts,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        version = data.get("schema_version")
        if version != SCENARIO_SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema version: {version}")
        ds = data.get("data_source", {})
        cm = data.get("capacity_mode", {})
        es = data.get("estimator", {})
        return cls(
            name=str(data["name"]),
            duration_days=int(data["duration_days"]),
            data_source=DataSource(
                kind=ds.get("kind", "generated"),
                seed=int(ds.get("seed", 0)),
                year=str(ds.get("year", "2021")),
                path=ds.get("path"),
            ),
            capacity_mode=CapacityMode(
                kind=cm.get("kind", "exact"),
                factor=float(cm.get("factor", 1.0)),
                seed=int(cm.get("seed", 0)),
            ),
            estimator=EstimatorChoice(
                kind=es.get("kind", "none"),
                path=es.get("path"),
            ),
            plant=PlantConfig.from_dict(data.get("plant", {})),
            price=PriceModel.from_dict(data.get("price", {})),
            horizon_np=int(data.get("horizon_np", HORIZON_STEPS)),
            ts=float(data.get("ts", TS_HOURS)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: scenario file must be a mapping")
        return cls.from_dict(data)


# -- capacity perturbation ---------------------------------------------------


def shift_capacities(params: BuildingParameters, seed: int) -> BuildingParameters:
    """Randomly shift thermal capacity between coupled zones.

    Pairs are visited in the fixed listing order of ``COUPLING_PAIRS`` and
    updates are applied sequentially, so each draw sees the running values.
    The total capacity is conserved exactly and every capacity stays
    positive because each shift moves at most half of the smaller partner.
    """
    rng = np.random.default_rng(seed)
    cth = list(params.cth)
    for i, j in COUPLING_PAIRS:
        p_shift = rng.uniform(0.0, 0.5)
        d_shift = 1.0 if rng.random() < 0.5 else -1.0
        c_shift = min(cth[i - 1], cth[j - 1]) * p_shift * d_shift
        cth[i - 1] += c_shift
        cth[j - 1] -= c_shift
    return params.with_capacities(cth)


def controller_parameters(plant_params: BuildingParameters,
                          mode: CapacityMode) -> BuildingParameters:
    """The (possibly mismatched) parameters the controller believes in."""
    if mode.kind == "exact":
        return plant_params
    if mode.kind == "scale":
        return plant_params.with_capacities(
            [c * mode.factor for c in plant_params.cth])
    return shift_capacities(plant_params, mode.seed)


# -- per-step records and metrics --------------------------------------------


@dataclass
class SilRecord:
    """Everything measured and decided during one control step."""

    step: int
    tod: float
    doy: int
    zone_temps: np.ndarray         # measured x(k), 9 zones
    theta_b: float                 # capacity-weighted building average
    theta_s: float                 # capacity-weighted server average
    battery_energy: float
    u_agg: np.ndarray              # applied aggregate inputs (5)
    u_dis: np.ndarray              # applied zone powers (18)
    d_row: tuple                   # measured (theta_air, p_dem, p_pv)
    eps: np.ndarray                # realized one-step model error (9)
    eps_tilde: np.ndarray          # estimator's prediction of eps (9)
    theta_b_pred_err: float        # |one-step building-average closure error|
    agg_telemetry: dict = field(default_factory=dict)
    dis_telemetry: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eps = np.asarray(self.eps, dtype=float)
        self.eps_tilde = np.asarray(self.eps_tilde, dtype=float)
        if not np.all(np.isfinite(self.eps)):
            raise ValueError(f"step {self.step}: non-finite model error")


@dataclass(frozen=True)
class MetricsReport:
    """Headline numbers for one closed-loop run."""

    scenario: str
    weighted_mae: float            # K, capacity-weighted residual MAE
    per_zone_mae: tuple            # K, 9 entries
    mean_abs_comfort_dev: float    # K, mean |theta_b - 22|
    monetary_cost_total: float     # EUR over the run

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "weighted_mae": self.weighted_mae,
            "per_zone_mae": list(self.per_zone_mae),
            "mean_abs_comfort_dev": self.mean_abs_comfort_dev,
            "monetary_cost_total": self.monetary_cost_total,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(scenario=d["scenario"],
                   weighted_mae=float(d["weighted_mae"]),
                   per_zone_mae=tuple(float(v) for v in d["per_zone_mae"]),
                   mean_abs_comfort_dev=float(d["mean_abs_comfort_dev"]),
                   monetary_cost_total=float(d["monetary_cost_total"]))


def evaluate(records, wth, price: Optional[PriceModel] = None,
             scenario: str = "", ts_h: float = TS_HOURS) -> MetricsReport:
    """Residual, comfort and monetary aggregates over a finished run."""
    if not records:
        raise ValueError("cannot evaluate an empty run")
    price = price or PriceModel()
    wth = np.asarray(wth, dtype=float)
    resid = np.abs(np.array([r.eps_tilde - r.eps for r in records]))
    per_zone = resid.mean(axis=0)
    theta_b = np.array([r.theta_b for r in records])
    u_agg = np.array([r.u_agg for r in records])

    p_grid, p_chp, q_rad = u_agg[:, 0], u_agg[:, 1], u_agg[:, 2]
    g_chp, g_rad = price.gas_cost_coefficients(ts_h)
    # buy and sell tariffs form the two pieces of the electricity cost
    elec = np.maximum(price.p_buy * ts_h * p_grid, price.p_sell * ts_h * p_grid)
    money = float(elec.sum() + g_chp * p_chp.sum() + g_rad * q_rad.sum()
                  + price.p_peak * max(float(p_grid.max()), 0.0))

    return MetricsReport(
        scenario=scenario,
        weighted_mae=float(wth @ per_zone),
        per_zone_mae=tuple(float(v) for v in per_zone),
        mean_abs_comfort_dev=float(np.mean(np.abs(theta_b - COMFORT_SETPOINT_C))),
        monetary_cost_total=money,
    )


# -- the closed loop ---------------------------------------------------------


class SilRunError(RuntimeError):
    pass


def _load_series(scenario: ScenarioConfig) -> DisturbanceSeries:
    steps_per_day = int(round(24.0 / scenario.ts))
    need = scenario.n_steps + scenario.horizon_np
    src = scenario.data_source
    if src.kind == "csv":
        series = load_disturbances_csv(src.path, ts=scenario.ts)
    else:
        days = scenario.duration_days + int(np.ceil(scenario.horizon_np / steps_per_day))
        series = generate_disturbances(src.year, days, src.seed, ts=scenario.ts)
    if len(series) < need:
        raise SilRunError(
            f"disturbance data exhausted: need {need} steps "
            f"(duration plus lookahead), have {len(series)}")
    return series


def _resolve_bundle(choice: EstimatorChoice,
                    bundle: Optional[EstimatorBundle]) -> Optional[EstimatorBundle]:
    if choice.kind in ("none", "oracle"):
        return None
    if bundle is None:
        if not choice.path:
            raise SilRunError(f"estimator '{choice.kind}' needs a bundle path")
        bundle = EstimatorBundle.load(choice.path)
    if bundle.kind != choice.kind:
        raise SilRunError(
            f"bundle kind '{bundle.kind}' does not match scenario "
            f"estimator '{choice.kind}'")
    return bundle


def run_sil(scenario: ScenarioConfig,
            bundle: Optional[EstimatorBundle] = None,
            settings: Optional[QpSettings] = None,
            out_dir=None) -> tuple[list, MetricsReport]:
    """Run one closed-loop scenario and return (records, metrics).

    ``bundle`` overrides loading the estimator from ``scenario.estimator.path``
    (handy when the bundle was just trained in the same process).  One-step
    predictions are recomputed from the controller's zone model with the
    measured disturbances and applied inputs, so forecast quality and solver
    accuracy never leak into the recorded model error.
    """
    series = _load_series(scenario)
    bundle = _resolve_bundle(scenario.estimator, bundle)
    oracle = scenario.estimator.kind == "oracle"

    plant_params = OFFENBACH_2021
    ctrl_params = controller_parameters(plant_params, scenario.capacity_mode)
    agg_spec, dis_spec = make_default_specs(
        ctrl_params, scenario.price, scenario.horizon_np, scenario.ts)
    solver_settings = settings or default_ocp_settings()
    agg_ctrl = AggregatorController(agg_spec, settings=solver_settings)
    dis_ctrl = DistributorController(dis_spec, settings=solver_settings)
    plant = Plant(plant_params, scenario.plant, ts=scenario.ts)

    n_steps = scenario.n_steps
    npn = scenario.horizon_np
    horizon_total = n_steps + npn
    k_all = np.arange(horizon_total)
    tod_all = (k_all * scenario.ts) % 24.0
    doy_all = np.minimum((k_all * scenario.ts // 24).astype(int) + 1, 365)

    # forecasts are perfect: controller disturbances come straight from the
    # same series the plant sees, in model sign convention
    q_other = np.asarray(ctrl_params.q_other)
    d_agg_all = np.column_stack([
        series.p_pv[:horizon_total],
        -series.p_dem[:horizon_total],
        series.theta_air[:horizon_total],
        np.full(horizon_total, q_other[:7].sum()),
        np.full(horizon_total, q_other[7:].sum()),
    ])
    d_dis_all = np.column_stack([
        series.theta_air[:horizon_total],
        np.tile(q_other, (horizon_total, 1)),
    ])

    # estimator features are exogenous, so all horizon predictions for the
    # entire run can be computed in one batch up front
    eps_tilde_all = None
    if bundle is not None:
        theta = series.theta_air[:horizon_total]
        lag1 = np.concatenate([[0.0], theta[:-1]])
        lag2 = np.concatenate([[0.0, 0.0], theta[:-2]])
        features = np.column_stack([
            theta, lag1, lag2, series.p_dem[:horizon_total], tod_all, doy_all])
        eps_tilde_all = bundle.predict_matrix(features)

    wb = np.asarray(ctrl_params.cth[:7]) / ctrl_params.cth_building
    ws = np.asarray(ctrl_params.cth[7:]) / ctrl_params.cth_server
    zeros9 = np.zeros(9)
    last_eps = zeros9

    records: list[SilRecord] = []
    state = plant.initial_state()
    for k in range(n_steps):
        x_zones = np.asarray(state.zone_temps, dtype=float)
        theta_b = float(wb @ x_zones[:7])
        theta_s = float(ws @ x_zones[7:])
        x_agg = np.array([state.battery_energy, theta_b, theta_s])

        if bundle is not None:
            comp = CompensationPlan.from_zone_errors(
                eps_tilde_all[k:k + npn], ctrl_params, flagged=k < N_HIST)
        elif oracle:
            # online stand-in for the perfect estimator: hold the last
            # realized error over the horizon while solving
            comp = CompensationPlan.from_zone_errors(
                np.tile(last_eps, (npn, 1)), ctrl_params)
        else:
            comp = None

        try:
            agg_sol = agg_ctrl.solve(x_agg, d_agg_all[k:k + npn], comp)
            dis_sol = dis_ctrl.solve(x_zones, d_dis_all[k:k + npn], agg_sol, comp)
        except OcpInfeasibleError as exc:
            raise SilRunError(f"solver failed at step {k}: {exc}") from exc

        u_agg = agg_sol.first_input
        # snap residual-level sign violations of the splitting solver before
        # they reach the plant; the error bookkeeping uses the same inputs
        u_dis = np.concatenate([
            np.clip(dis_sol.first_input[:9], 0.0, None),
            np.clip(dis_sol.first_input[9:], None, 0.0)])
        d_row = (series.theta_air[k], series.p_dem[k], series.p_pv[k])
        next_state = plant.step(state, u_dis, u_agg, d_row,
                                tod=float(tod_all[k]), doy=int(doy_all[k]))

        x_pred = model_step(dis_spec.model, x_zones, u_dis, d_dis_all[k])
        eps = measure_error(next_state.zone_temps, x_pred)
        if oracle:
            eps_tilde = eps.copy()
        elif bundle is not None:
            eps_tilde = eps_tilde_all[k]
        else:
            eps_tilde = zeros9
        last_eps = eps

        records.append(SilRecord(
            step=k, tod=float(tod_all[k]), doy=int(doy_all[k]),
            zone_temps=x_zones, theta_b=theta_b, theta_s=theta_s,
            battery_energy=state.battery_energy,
            u_agg=u_agg, u_dis=u_dis, d_row=d_row,
            eps=eps, eps_tilde=eps_tilde,
            theta_b_pred_err=float(abs(wb @ (eps[:7] - eps_tilde[:7]))),
            agg_telemetry=agg_sol.telemetry(),
            dis_telemetry=dis_sol.telemetry(),
        ))
        state = next_state

    metrics = evaluate(records, ctrl_params.zone_weights(),
                       price=scenario.price, scenario=scenario.name,
                       ts_h=scenario.ts)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_trajectory_csv(records, out_dir / "trajectory.csv")
        write_residuals_csv(records, out_dir / "residuals.csv")
        metrics.save(out_dir / "metrics.json")
        if scenario.estimator.kind == "none":
            collect_training_data(records, out_dir / "training.csv")
    return records, metrics


# -- training data -----------------------------------------------------------


def collect_training_data(records, path=None) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix and eps targets from a baseline run.

    Returns ``(x, targets)`` with feature columns in the estimators' schema
    order; the first ``N_HIST`` steps are dropped because their ambient-
    temperature lags fall before the start of the run.  When ``path`` is
    given the same rows are also written as CSV.
    """
    if len(records) <= N_HIST:
        raise ValueError("run too short to collect training data")
    theta_air = np.array([r.d_row[0] for r in records])
    p_dem = np.array([r.d_row[1] for r in records])
    tod = np.array([r.tod for r in records])
    doy = np.array([r.doy for r in records], dtype=float)
    eps = np.array([r.eps for r in records])

    rows = np.arange(N_HIST, len(records))
    x = np.column_stack([
        theta_air[rows], theta_air[rows - 1], theta_air[rows - 2],
        p_dem[rows], tod[rows], doy[rows]])
    targets = eps[rows]

    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRAINING_CSV_COLUMNS)
            for i, k in enumerate(rows):
                writer.writerow(
                    [k, f"{tod[k]:.10g}", int(doy[k]),
                     f"{theta_air[k]:.12g}", f"{theta_air[k - 1]:.12g}",
                     f"{theta_air[k - 2]:.12g}", f"{p_dem[k]:.12g}"]
                    + [f"{v:.15g}" for v in targets[i]])
    return x, targets


def load_training_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back a training CSV into (features, eps targets)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(TRAINING_CSV_COLUMNS):
            raise ValueError(f"{path}: unexpected training CSV header")
        data = [[float(v) for v in row] for row in reader if row]
    if not data:
        raise ValueError(f"{path}: no training rows")
    arr = np.asarray(data)
    x = arr[:, [3, 4, 5, 6, 1, 2]]   # schema order: theta, lags, p_dem, tod, doy
    return x, arr[:, 7:]


# -- artifact writers --------------------------------------------------------

TRAJECTORY_CSV_COLUMNS = (
    ("step", "theta_b", "theta_s")
    + tuple(f"theta_{z}" for z in range(1, 10))
    + ("E", "P_grid", "P_chp", "Q_rad", "Q_cool_b", "Q_cool_s")
)


def write_trajectory_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [r.step, f"{r.theta_b:.9g}", f"{r.theta_s:.9g}"]
                + [f"{t:.9g}" for t in r.zone_temps]
                + [f"{r.battery_energy:.9g}"]
                + [f"{v:.9g}" for v in r.u_agg])


def write_residuals_csv(records, path) -> None:
    header = (("step",) + tuple(f"eps_{z}" for z in range(1, 10))
              + tuple(f"eps_tilde_{z}" for z in range(1, 10))
              + ("theta_b_pred_err",))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            writer.writerow([r.step]
                            + [f"{v:.15g}" for v in r.eps]
                            + [f"{v:.15g}" for v in r.eps_tilde]
                            + [f"{r.theta_b_pred_err:.15g}"])


# -- experiment matrix -------------------------------------------------------


def matrix_threads() -> int:
    """Worker cap for fan-out runs, from the HEMSIM_THREADS environment."""
    try:
        return max(1, int(os.environ.get("HEMSIM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class MatrixConfig:
    """Knobs for the full scenario-by-estimator experiment grid."""

    duration_days: int = 30
    seed_2021: int = 11
    seed_2022: int = 23
    shift_seed: int = 7
    plant: PlantConfig = field(default_factory=PlantConfig.default)
    price: PriceModel = field(default_factory=PriceModel)
    gbt_hyper: GbtHyperParams = field(default_factory=GbtHyperParams)
    split_ratio: float = 0.7
    n_jobs: int = 0                # 0 -> use HEMSIM_THREADS
    out_dir: Optional[str] = None


@dataclass(frozen=True)
class MatrixRow:
    estimator: str                 # "linear" | "gbt"
    scenario: str                  # "2021" | "2022" | "capacity-50" | ...
    baseline_mae: float            # K
    train_mae: float               # K
    test_mae: float                # K
    sil_mae: float                 # K


@dataclass
class MatrixResult:
    rows: list
    metrics: dict                  # scenario name -> MetricsReport

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["estimator", "scenario", "baseline_mae_mK",
                             "train_mae_mK", "test_mae_mK", "sil_mae_mK"])
            for r in self.rows:
                writer.writerow([
                    r.estimator, r.scenario,
                    f"{1e3 * r.baseline_mae:.3f}", f"{1e3 * r.train_mae:.3f}",
                    f"{1e3 * r.test_mae:.3f}", f"{1e3 * r.sil_mae:.3f}"])

    def format_summary(self) -> str:
        lines = [f"{'estimator':<10} {'scenario':<16} {'baseline':>9} "
                 f"{'train':>8} {'test':>8} {'sil':>8}   [10^-3 K]"]
        for r in self.rows:
            lines.append(
                f"{r.estimator:<10} {r.scenario:<16} "
                f"{1e3 * r.baseline_mae:>9.3f} {1e3 * r.train_mae:>8.3f} "
                f"{1e3 * r.test_mae:>8.3f} {1e3 * r.sil_mae:>8.3f}")
        return "\n".join(lines)


def weighted_mae(pred: np.ndarray, targets: np.ndarray, wth) -> float:
    """Capacity-weighted mean absolute error across the 9 zones."""
    per_zone = np.mean(np.abs(np.asarray(pred) - np.asarray(targets)), axis=0)
    return float(np.asarray(wth) @ per_zone)


def _matrix_metrics(scenario: ScenarioConfig,
                    bundle: Optional[EstimatorBundle],
                    out_dir: Optional[str]) -> MetricsReport:
    run_dir = None if out_dir is None else Path(out_dir) / scenario.name
    _, metrics = run_sil(scenario, bundle=bundle, out_dir=run_dir)
    return metrics


def run_experiment_matrix(cfg: MatrixConfig) -> MatrixResult:
    """Train estimators per scenario and grade the full grid.

    Pipeline: run the exact-capacity baseline year, fit the linear and
    boosted-tree estimators on its residuals (chronological 70/30 split),
    and fan the compensated year-one and year-two runs out across workers.
    Each capacity-mismatch scenario then gets its own baseline run, its own
    boosted-tree fit on that run's residuals (the controller model differs,
    so the error distribution does), and a compensated run — which is why
    the capacity rows report their own train/test columns.
    """
    common = dict(duration_days=cfg.duration_days, plant=cfg.plant,
                  price=cfg.price)
    src_2021 = DataSource(kind="generated", seed=cfg.seed_2021, year="2021")
    src_2022 = DataSource(kind="generated", seed=cfg.seed_2022, year="2022")
    scale_50 = CapacityMode(kind="scale", factor=0.5)
    scale_150 = CapacityMode(kind="scale", factor=1.5)
    shifted = CapacityMode(kind="shifted", seed=cfg.shift_seed)

    out_dir = cfg.out_dir
    base_dir = None if out_dir is None else Path(out_dir) / "baseline-2021"
    base_records, base_2021 = run_sil(
        ScenarioConfig(name="baseline-2021", data_source=src_2021, **common),
        out_dir=base_dir)
    x, targets = collect_training_data(base_records)
    (x_tr, y_tr), (x_te, y_te) = train_test_split(x, targets,
                                                  ratio=cfg.split_ratio)

    n_jobs = cfg.n_jobs or matrix_threads()
    wth = OFFENBACH_2021.zone_weights()
    meta = {"source": "baseline-2021", "rows": int(len(x_tr))}
    linear = fit_linear_bundle(x_tr, y_tr, metadata=meta)
    gbt = fit_gbt_bundle(x_tr, y_tr, hyper=cfg.gbt_hyper, metadata=meta,
                         n_jobs=n_jobs)
    fits = {
        "linear": (linear,
                   weighted_mae(linear.predict_matrix(x_tr), y_tr, wth),
                   weighted_mae(linear.predict_matrix(x_te), y_te, wth)),
        "gbt": (gbt,
                weighted_mae(gbt.predict_matrix(x_tr), y_tr, wth),
                weighted_mae(gbt.predict_matrix(x_te), y_te, wth)),
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        linear.save(Path(out_dir) / "linear.json")
        gbt.save(Path(out_dir) / "gbt.json")

    def scn(name, src, cap, est):
        return ScenarioConfig(name=name, data_source=src, capacity_mode=cap,
                              estimator=EstimatorChoice(kind=est), **common)

    exact = CapacityMode()
    jobs = [
        scn("linear-2021", src_2021, exact, "linear"),
        scn("gbt-2021", src_2021, exact, "gbt"),
        scn("baseline-2022", src_2022, exact, "none"),
        scn("linear-2022", src_2022, exact, "linear"),
        scn("gbt-2022", src_2022, exact, "gbt"),
    ]
    bundles = {"none": None, "linear": linear, "gbt": gbt}
    results = Parallel(n_jobs=min(n_jobs, len(jobs)))(
        delayed(_matrix_metrics)(s, bundles[s.estimator.kind], out_dir)
        for s in jobs)
    metrics = {"baseline-2021": base_2021}
    metrics.update({s.name: m for s, m in zip(jobs, results)})

    # each capacity scenario trains its own boosted-tree model on the
    # residuals its own (perturbed) controller model actually produces
    cap_fits = {}
    for label, cap in (("cap50", scale_50), ("cap150", scale_150),
                       ("shifted", shifted)):
        base_name = f"baseline-{label}"
        run_dir = None if out_dir is None else Path(out_dir) / base_name
        cap_records, cap_base = run_sil(scn(base_name, src_2021, cap, "none"),
                                        out_dir=run_dir)
        cx, ct = collect_training_data(cap_records)
        (cx_tr, cy_tr), (cx_te, cy_te) = train_test_split(
            cx, ct, ratio=cfg.split_ratio)
        cap_bundle = fit_gbt_bundle(
            cx_tr, cy_tr, hyper=cfg.gbt_hyper, n_jobs=n_jobs,
            metadata={"source": base_name, "rows": int(len(cx_tr))})
        if out_dir is not None:
            cap_bundle.save(Path(out_dir) / f"gbt-{label}.json")
        cap_fits[label] = (
            weighted_mae(cap_bundle.predict_matrix(cx_tr), cy_tr, wth),
            weighted_mae(cap_bundle.predict_matrix(cx_te), cy_te, wth))
        metrics[base_name] = cap_base
        metrics[f"gbt-{label}"] = _matrix_metrics(
            scn(f"gbt-{label}", src_2021, cap, "gbt"), cap_bundle, out_dir)

    def row(est, scenario_label, baseline_key, sil_key, fit=None):
        _, train, test = fits[est] if fit is None else (None, *fit)
        return MatrixRow(estimator=est, scenario=scenario_label,
                         baseline_mae=metrics[baseline_key].weighted_mae,
                         train_mae=train, test_mae=test,
                         sil_mae=metrics[sil_key].weighted_mae)

    rows = [
        row("linear", "2021", "baseline-2021", "linear-2021"),
        row("linear", "2022", "baseline-2022", "linear-2022"),
        row("gbt", "2021", "baseline-2021", "gbt-2021"),
        row("gbt", "2022", "baseline-2022", "gbt-2022"),
        row("gbt", "capacity-50", "baseline-cap50", "gbt-cap50",
            fit=cap_fits["cap50"]),
        row("gbt", "capacity-150", "baseline-cap150", "gbt-cap150",
            fit=cap_fits["cap150"]),
        row("gbt", "capacity-shifted", "baseline-shifted", "gbt-shifted",
            fit=cap_fits["shifted"]),
    ]
    result = MatrixResult(rows=rows, metrics=metrics)
    if out_dir is not None:
        result.save_csv(Path(out_dir) / "summary_table.csv")
    return result
