"""Closed-loop harness tests: capacity shifting, config round-trips, metrics
arithmetic, training-data collection, and short end-to-end runs."""

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st

from hemsim.harness import (
    CapacityMode,
    DataSource,
    EstimatorChoice,
    MetricsReport,
    ScenarioConfig,
    SilRecord,
    collect_training_data,
    controller_parameters,
    evaluate,
    load_training_csv,
    run_sil,
    shift_capacities,
    weighted_mae,
)
from hemsim.mpc import PriceModel
from hemsim.plant import PlantConfig
from hemsim.qp import QpSettings
from hemsim.thermal_model import OFFENBACH_2021

# loose in-loop accuracy keeps the end-to-end tests fast; the error
# bookkeeping is recomputed outside the solver so it stays exact
FAST = QpSettings(eps_abs=1e-3, eps_rel=1e-3, max_iter=20000, polish=False)


# -- capacity shifting -------------------------------------------------------


class TestShiftCapacities:
    def test_total_capacity_conserved_many_seeds(self):
        total = sum(OFFENBACH_2021.cth)
        for seed in range(1000):
            shifted = shift_capacities(OFFENBACH_2021, seed)
            assert sum(shifted.cth) == pytest.approx(total, abs=1e-12)
            assert all(c > 0 for c in shifted.cth)

    def test_deterministic_per_seed(self):
        a = shift_capacities(OFFENBACH_2021, 42)
        b = shift_capacities(OFFENBACH_2021, 42)
        assert a.cth == b.cth
        c = shift_capacities(OFFENBACH_2021, 43)
        assert a.cth != c.cth

    def test_single_pair_full_shift(self):
        # one coupled pair, maximal draw toward the first partner:
        # min(214.27, 103.68) * 0.5 moves between zones 3 and 4
        params = OFFENBACH_2021
        cth = list(params.cth)
        c_shift = min(cth[2], cth[3]) * 0.5
        assert cth[2] + c_shift == pytest.approx(266.11, abs=1e-10)
        assert cth[3] - c_shift == pytest.approx(51.84, abs=1e-10)

    def test_other_parameters_untouched(self):
        shifted = shift_capacities(OFFENBACH_2021, 5)
        assert shifted.hair == OFFENBACH_2021.hair
        assert shifted.couplings == OFFENBACH_2021.couplings
        assert shifted.q_other == OFFENBACH_2021.q_other

    def test_sequential_updates_make_order_matter(self):
        # shifts are applied running-value style, so later pairs see the
        # outcome of earlier ones; zone 8 participates in three pairs
        shifted = shift_capacities(OFFENBACH_2021, 12)
        assert shifted.cth[7] != OFFENBACH_2021.cth[7]


class TestControllerParameters:
    def test_exact_mode_is_identity(self):
        assert controller_parameters(OFFENBACH_2021, CapacityMode()) is OFFENBACH_2021

    def test_scale_mode(self):
        p = controller_parameters(OFFENBACH_2021,
                                  CapacityMode(kind="scale", factor=0.5))
        assert p.cth == tuple(0.5 * c for c in OFFENBACH_2021.cth)

    def test_shifted_mode_conserves_total(self):
        p = controller_parameters(OFFENBACH_2021,
                                  CapacityMode(kind="shifted", seed=9))
        assert sum(p.cth) == pytest.approx(sum(OFFENBACH_2021.cth), abs=1e-12)


# -- scenario configuration --------------------------------------------------


class TestScenarioConfig:
    def make(self):
        return ScenarioConfig(
            name="roundtrip", duration_days=7,
            data_source=DataSource(kind="generated", seed=3, year="2022"),
            capacity_mode=CapacityMode(kind="scale", factor=1.5),
            estimator=EstimatorChoice(kind="gbt", path="bundle.json"),
            plant=PlantConfig.default(),
            price=PriceModel(p_buy=0.25))

    def test_yaml_roundtrip(self, tmp_path):
        cfg = self.make()
        path = tmp_path / "scenario.yaml"
        cfg.save(path)
        assert ScenarioConfig.load(path) == cfg

    def test_schema_version_checked(self, tmp_path):
        cfg = self.make()
        d = cfg.to_dict()
        d["schema_version"] = 99
        path = tmp_path / "bad.yaml"
        import yaml
        path.write_text(yaml.safe_dump(d))
        with pytest.raises(ValueError, match="schema version"):
            ScenarioConfig.load(path)

    def test_duration_floor(self):
        with pytest.raises(ValueError, match="duration"):
            ScenarioConfig(name="x", duration_days=1)

    def test_csv_source_needs_path(self):
        with pytest.raises(ValueError, match="path"):
            DataSource(kind="csv")

    def test_unknown_kinds_rejected(self):
        with pytest.raises(ValueError):
            CapacityMode(kind="double")
        with pytest.raises(ValueError):
            EstimatorChoice(kind="xgboost")


# -- metrics -----------------------------------------------------------------


def fake_record(step, eps, eps_tilde=None, theta_b=22.0, u_agg=None):
    eps = np.asarray(eps, dtype=float)
    return SilRecord(
        step=step, tod=(step * 0.5) % 24.0, doy=step // 48 + 1,
        zone_temps=np.full(9, 22.0), theta_b=theta_b, theta_s=20.0,
        battery_energy=49.0,
        u_agg=np.zeros(5) if u_agg is None else np.asarray(u_agg, float),
        u_dis=np.zeros(18), d_row=(10.0, 250.0, 0.0),
        eps=eps, eps_tilde=np.zeros(9) if eps_tilde is None else eps_tilde,
        theta_b_pred_err=0.0)


class TestEvaluate:
    wth = OFFENBACH_2021.zone_weights()

    def test_zero_residuals_zero_mae(self):
        records = [fake_record(k, np.zeros(9)) for k in range(4)]
        m = evaluate(records, self.wth)
        assert m.weighted_mae == 0.0

    def test_single_zone_constant_residual(self):
        eps = np.zeros(9)
        eps[2] = 0.25
        records = [fake_record(k, eps) for k in range(4)]
        m = evaluate(records, self.wth)
        assert m.weighted_mae == pytest.approx(self.wth[2] * 0.25, rel=1e-12)

    def test_uniform_residual_weights_normalized(self):
        records = [fake_record(k, np.full(9, 1e-3)) for k in range(4)]
        m = evaluate(records, self.wth)
        assert m.weighted_mae == pytest.approx(1e-3, rel=1e-12)

    def test_weighted_identity(self):
        rng = np.random.default_rng(0)
        records = [fake_record(k, rng.normal(0, 0.1, 9)) for k in range(20)]
        m = evaluate(records, self.wth)
        assert m.weighted_mae == pytest.approx(
            float(np.dot(self.wth, m.per_zone_mae)), abs=1e-12)

    def test_comfort_deviation(self):
        records = [fake_record(k, np.zeros(9), theta_b=22.0 + (-1) ** k * 0.4)
                   for k in range(10)]
        m = evaluate(records, self.wth)
        assert m.mean_abs_comfort_dev == pytest.approx(0.4, rel=1e-12)

    def test_monetary_includes_peak_and_gas(self):
        price = PriceModel()
        u = np.array([100.0, 199.0, 50.0, 0.0, 0.0])
        records = [fake_record(k, np.zeros(9), u_agg=u) for k in range(4)]
        m = evaluate(records, self.wth, price=price)
        g_chp, g_rad = price.gas_cost_coefficients(0.5)
        expect = 4 * (0.20 * 0.5 * 100.0 + g_chp * 199.0 + g_rad * 50.0) \
            + 10.0 * 100.0
        assert m.monetary_cost_total == pytest.approx(expect, rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evaluate([], self.wth)

    def test_report_json_roundtrip(self, tmp_path):
        records = [fake_record(k, np.full(9, 1e-3)) for k in range(4)]
        m = evaluate(records, self.wth, scenario="rt")
        path = tmp_path / "metrics.json"
        m.save(path)
        assert MetricsReport.load(path) == m

    @given(st.lists(st.floats(0.0, 1.0), min_size=9, max_size=9))
    @hyp_settings(max_examples=25, deadline=None)
    def test_weighted_mae_bounded_by_max_zone(self, eps_list):
        records = [fake_record(0, np.array(eps_list))]
        m = evaluate(records, self.wth)
        assert m.weighted_mae <= max(eps_list) + 1e-12


class TestWeightedMae:
    def test_matches_manual(self):
        w = OFFENBACH_2021.zone_weights()
        rng = np.random.default_rng(1)
        pred, y = rng.normal(size=(30, 9)), rng.normal(size=(30, 9))
        manual = float(w @ np.mean(np.abs(pred - y), axis=0))
        assert weighted_mae(pred, y, w) == pytest.approx(manual, abs=1e-15)


# -- training data -----------------------------------------------------------


class TestTrainingData:
    def make_records(self, n=30):
        rng = np.random.default_rng(7)
        return [fake_record(k, rng.normal(0, 0.05, 9)) for k in range(n)]

    def test_lag_rows_dropped(self):
        x, targets = collect_training_data(self.make_records(100))
        assert x.shape == (98, 6)
        assert targets.shape == (98, 9)

    def test_targets_copied_exactly(self):
        records = self.make_records()
        _, targets = collect_training_data(records)
        for i, r in enumerate(records[2:]):
            assert np.array_equal(targets[i], r.eps)

    def test_lag_columns_from_history(self):
        records = self.make_records()
        x, _ = collect_training_data(records)
        # column order: theta_air, lag1, lag2, p_dem, tod, doy
        assert x[0, 0] == records[2].d_row[0]
        assert x[0, 1] == records[1].d_row[0]
        assert x[0, 2] == records[0].d_row[0]

    def test_csv_roundtrip(self, tmp_path):
        records = self.make_records()
        path = tmp_path / "training.csv"
        x, targets = collect_training_data(records, path)
        x2, t2 = load_training_csv(path)
        assert np.allclose(x, x2, atol=1e-12)
        assert np.allclose(targets, t2, atol=1e-14)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            collect_training_data(self.make_records(2))

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            load_training_csv(path)


# -- end-to-end closed loop --------------------------------------------------


@pytest.fixture(scope="module")
def degenerate_run():
    scenario = ScenarioConfig(name="degenerate", duration_days=2,
                              data_source=DataSource(seed=1))
    return scenario, run_sil(scenario, settings=FAST)


class TestClosedLoop:
    def test_degenerate_twin_zero_error(self, degenerate_run):
        _, (records, metrics) = degenerate_run
        assert metrics.weighted_mae <= 1e-6

    def test_baseline_estimate_is_zero(self, degenerate_run):
        _, (records, _) = degenerate_run
        assert all(np.all(r.eps_tilde == 0.0) for r in records)

    def test_one_record_per_step(self, degenerate_run):
        scenario, (records, _) = degenerate_run
        assert [r.step for r in records] == list(range(scenario.n_steps))

    def test_solver_telemetry_recorded(self, degenerate_run):
        _, (records, _) = degenerate_run
        assert all(r.agg_telemetry["iterations"] > 0 for r in records)
        assert all(r.dis_telemetry["status"] in ("SOLVED", "MAX_ITER")
                   for r in records)

    def test_artifacts_written(self, tmp_path):
        scenario = ScenarioConfig(name="artifacts", duration_days=2,
                                  data_source=DataSource(seed=2))
        run_sil(scenario, settings=FAST, out_dir=tmp_path)
        for name in ("trajectory.csv", "residuals.csv", "metrics.json",
                     "training.csv"):
            assert (tmp_path / name).exists(), name
        header = (tmp_path / "trajectory.csv").read_text().splitlines()[0]
        assert header.startswith("step,theta_b,theta_s,theta_1")

    def test_reproducible_bit_for_bit(self):
        scenario = ScenarioConfig(name="repro", duration_days=2,
                                  data_source=DataSource(seed=5),
                                  plant=PlantConfig.default())
        _, m1 = run_sil(scenario, settings=FAST)
        _, m2 = run_sil(scenario, settings=FAST)
        assert m1 == m2

    def test_oracle_closes_building_prediction(self):
        scenario = ScenarioConfig(name="oracle", duration_days=2,
                                  data_source=DataSource(seed=3),
                                  estimator=EstimatorChoice(kind="oracle"),
                                  plant=PlantConfig.default())
        records, metrics = run_sil(scenario, settings=FAST)
        assert max(r.theta_b_pred_err for r in records) <= 1e-9
        assert metrics.weighted_mae <= 1e-9

    def test_missing_bundle_path_rejected(self):
        scenario = ScenarioConfig(name="nobundle", duration_days=2,
                                  estimator=EstimatorChoice(kind="gbt"))
        with pytest.raises(RuntimeError, match="bundle"):
            run_sil(scenario)

    def test_data_exhaustion_detected(self, tmp_path):
        from hemsim.plant import DisturbanceSeries, save_disturbances_csv
        short = DisturbanceSeries(theta_air=np.full(50, 10.0),
                                  p_dem=np.full(50, 250.0),
                                  p_pv=np.zeros(50))
        path = tmp_path / "short.csv"
        save_disturbances_csv(short, path)
        scenario = ScenarioConfig(
            name="short", duration_days=2,
            data_source=DataSource(kind="csv", path=str(path)))
        with pytest.raises(RuntimeError, match="exhausted"):
            run_sil(scenario)
