import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hemsim.estimators import (
    EstimatorBundle,
    FeatureVector,
    GbtHyperParams,
    GbtZoneModel,
    LinearZoneModel,
    cyclic_transform,
    fit_gbt,
    fit_gbt_bundle,
    fit_linear,
    fit_linear_bundle,
    train_test_split,
)
from hemsim.estimators import _Tree


def random_features(rng, n):
    """Raw (n, 6) feature matrix with realistic ranges."""
    return np.column_stack([
        rng.uniform(-10, 30, n),    # theta_air
        rng.uniform(-10, 30, n),    # lag 1
        rng.uniform(-10, 30, n),    # lag 2
        rng.uniform(20, 700, n),    # p_dem
        rng.uniform(0, 24 - 1e-9, n),
        rng.integers(1, 366, n).astype(float),
    ])


class TestCyclicTransform:
    def test_quarter_period(self):
        s, c, _, _ = cyclic_transform(6.0, 1)
        assert s == pytest.approx(1.0)
        assert c == pytest.approx(0.0, abs=1e-12)

    def test_midnight_continuity(self):
        a = np.array(cyclic_transform(0.0, 100))
        b = np.array(cyclic_transform(24.0 - 1e-10, 100))
        assert np.max(np.abs(a - b)) < 1e-9

    def test_new_year_wrap(self):
        s, c = cyclic_transform(0.0, 365)[2:]
        assert s == pytest.approx(0.0, abs=1e-9)
        assert c == pytest.approx(1.0, abs=1e-9)

    def test_range_checks(self):
        with pytest.raises(ValueError):
            cyclic_transform(24.0, 1)
        with pytest.raises(ValueError):
            cyclic_transform(0.0, 0)

    @given(st.floats(0, 23.999), st.integers(1, 365))
    def test_outputs_bounded(self, tod, doy):
        out = cyclic_transform(tod, doy)
        assert all(-1.0 <= float(v) <= 1.0 for v in out)


class TestFeatureVector:
    def test_row_layout(self):
        fv = FeatureVector(theta_air=5.0, theta_air_lags=(4.0, 3.0),
                           p_dem=250.0, tod=12.0, doy=40)
        assert np.allclose(fv.as_row(), [5.0, 4.0, 3.0, 250.0, 12.0, 40.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            FeatureVector(5.0, (4.0,), 250.0, 12.0, 40)
        with pytest.raises(ValueError):
            FeatureVector(5.0, (4.0, 3.0), 250.0, 24.0, 40)
        with pytest.raises(ValueError):
            FeatureVector(5.0, (4.0, 3.0), 250.0, 12.0, 366)


class TestLinearFit:
    def planted(self):
        return LinearZoneModel(alpha=0.003, beta=(0.01, -0.004, 0.002),
                               gamma=(0.05, -0.02), delta=(0.03, 0.01),
                               kappa=0.12)

    def test_exact_recovery(self):
        rng = np.random.default_rng(0)
        x = random_features(rng, 200)
        model = self.planted()
        y = model.predict(x)
        fitted = fit_linear(x, y)
        assert np.max(np.abs(fitted.coefficients - model.coefficients)) < 1e-8

    def test_constant_targets(self):
        rng = np.random.default_rng(1)
        x = random_features(rng, 100)
        fitted = fit_linear(x, np.full(100, 0.37))
        assert fitted.kappa == pytest.approx(0.37, abs=1e-8)
        assert np.max(np.abs(fitted.coefficients[:-1])) < 1e-8

    def test_noise_consistency(self):
        # coefficient error should shrink roughly like 1/sqrt(n)
        model = self.planted()
        errs = []
        for n in (10000, 160000):
            rng = np.random.default_rng(5)
            x = random_features(rng, n)
            y = model.predict(x) + rng.normal(0, 0.1, n)
            fitted = fit_linear(x, y)
            errs.append(np.linalg.norm(fitted.coefficients - model.coefficients))
        assert errs[1] < errs[0] / 2.0  # 16x samples -> ~4x tighter

    def test_collinear_columns_named(self):
        rng = np.random.default_rng(2)
        x = random_features(rng, 50)
        x[:, 1] = x[:, 0]  # lag1 duplicates current temperature
        with pytest.raises(ValueError, match="theta_air_lag1"):
            fit_linear(x, rng.normal(size=50))

    def test_too_few_samples(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            fit_linear(random_features(rng, 5), np.zeros(5))

    def test_midnight_prediction_continuity(self):
        model = self.planted()
        row_a = np.array([[5.0, 4.0, 3.0, 250.0, 1e-9, 50.0]])
        row_b = np.array([[5.0, 4.0, 3.0, 250.0, 24.0 - 1e-9, 50.0]])
        assert abs(model.predict(row_a)[0] - model.predict(row_b)[0]) < 1e-6


class TestGbt:
    def test_zero_trees_is_mean(self):
        rng = np.random.default_rng(0)
        x = random_features(rng, 60)
        y = rng.normal(2.0, 1.0, 60)
        model = fit_gbt(x, y, hyper=GbtHyperParams(n_trees=0))
        assert np.allclose(model.predict(x), y.mean())

    def test_step_function_with_stumps(self):
        rng = np.random.default_rng(1)
        x = random_features(rng, 400)
        y = np.where(x[:, 0] > 10.0, 1.0, -1.0)
        model = fit_gbt(x, y, hyper=GbtHyperParams(
            n_trees=300, max_depth=1, shrinkage=0.3, min_leaf=5))
        assert np.mean(np.abs(model.predict(x) - y)) < 1e-3

    def test_training_loss_non_increasing(self):
        rng = np.random.default_rng(2)
        x = random_features(rng, 300)
        y = 0.01 * x[:, 3] + np.sin(x[:, 4]) + rng.normal(0, 0.2, 300)
        model = fit_gbt(x, y, hyper=GbtHyperParams(n_trees=100))
        pred = np.full(len(y), model.base_score)
        losses = []
        for i, tree in enumerate(model.trees, start=1):
            pred = pred + model.shrinkage * tree.predict(x)
            if i % 10 == 0:
                losses.append(np.mean((y - pred) ** 2))
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_depth_limit(self):
        rng = np.random.default_rng(3)
        x = random_features(rng, 500)
        y = rng.normal(size=500)
        model = fit_gbt(x, y, hyper=GbtHyperParams(n_trees=5, max_depth=3))
        assert all(t.depth() <= 3 for t in model.trees)

    def test_min_leaf_respected(self):
        rng = np.random.default_rng(4)
        x = random_features(rng, 200)
        y = rng.normal(size=200)
        model = fit_gbt(x, y, hyper=GbtHyperParams(n_trees=3, min_leaf=20))
        for tree in model.trees:
            leaves = tree.feature < 0
            # count rows reaching each leaf
            node = np.zeros(len(x), dtype=int)
            for _ in range(10):
                internal = tree.feature[node] >= 0
                go_left = np.zeros(len(x), dtype=bool)
                go_left[internal] = (
                    x[internal, tree.feature[node[internal]]]
                    <= tree.threshold[node[internal]])
                node = np.where(internal & go_left, tree.left[node],
                                np.where(internal, tree.right[node], node))
            counts = np.bincount(node, minlength=len(tree.feature))
            assert np.all(counts[leaves] >= 20)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x = random_features(rng, 150)
        y = rng.normal(size=150)
        a = fit_gbt(x, y, hyper=GbtHyperParams(n_trees=20, subsample=0.8))
        b = fit_gbt(x, y, hyper=GbtHyperParams(n_trees=20, subsample=0.8))
        assert np.array_equal(a.predict(x), b.predict(x))

    def test_single_constant_tree(self):
        tree = _Tree(feature=np.array([-1]), threshold=np.zeros(1),
                     left=np.array([-1]), right=np.array([-1]),
                     value=np.array([0.7]))
        model = GbtZoneModel(trees=[tree], shrinkage=1.0, base_score=0.2)
        rng = np.random.default_rng(6)
        assert np.allclose(model.predict(random_features(rng, 10)), 0.9)

    def test_beats_mean_predictor(self):
        rng = np.random.default_rng(7)
        x = random_features(rng, 1000)
        y = 0.002 * x[:, 3] + 0.05 * np.cos(2 * np.pi * x[:, 4] / 24.0)
        y = y + rng.normal(0, 0.01, 1000)
        (xt, yt), (xe, ye) = train_test_split(x, y)
        model = fit_gbt(xt, yt)
        mae_model = np.mean(np.abs(model.predict(xe) - ye))
        mae_mean = np.mean(np.abs(ye - yt.mean()))
        assert mae_model < mae_mean


class TestBundle:
    def make_linear_bundle(self, rng):
        x = random_features(rng, 300)
        coefs = rng.normal(0, 0.05, (9, 9))
        targets = np.column_stack([
            LinearZoneModel.from_coefficients(c).predict(x) for c in coefs])
        return x, targets, fit_linear_bundle(x, targets)

    def test_linear_bundle_predicts_all_zones(self):
        rng = np.random.default_rng(0)
        x, targets, bundle = self.make_linear_bundle(rng)
        pred = bundle.predict_matrix(x)
        assert pred.shape == targets.shape
        assert np.max(np.abs(pred - targets)) < 1e-7

    def test_single_row_matches_matrix(self):
        rng = np.random.default_rng(1)
        x, _, bundle = self.make_linear_bundle(rng)
        fv = FeatureVector(theta_air=x[0, 0], theta_air_lags=(x[0, 1], x[0, 2]),
                           p_dem=x[0, 3], tod=x[0, 4], doy=int(x[0, 5]))
        assert np.allclose(bundle.predict(fv), bundle.predict_matrix(x[:1])[0])

    def test_homogeneity_enforced(self):
        rng = np.random.default_rng(2)
        _, _, bundle = self.make_linear_bundle(rng)
        with pytest.raises(ValueError):
            EstimatorBundle(kind="gbt", per_zone=bundle.per_zone)
        with pytest.raises(ValueError):
            EstimatorBundle(kind="linear", per_zone=bundle.per_zone[:5])

    def test_json_round_trip_linear(self, tmp_path):
        rng = np.random.default_rng(3)
        x, _, bundle = self.make_linear_bundle(rng)
        bundle.metadata = {"scenario": "unit-test"}
        path = tmp_path / "bundle.json"
        bundle.save(path)
        loaded = EstimatorBundle.load(path)
        assert loaded.kind == "linear"
        assert loaded.metadata == {"scenario": "unit-test"}
        assert np.array_equal(loaded.predict_matrix(x), bundle.predict_matrix(x))

    def test_json_round_trip_gbt(self, tmp_path):
        rng = np.random.default_rng(4)
        x = random_features(rng, 200)
        targets = rng.normal(0, 0.1, (200, 9))
        bundle = fit_gbt_bundle(x, targets, hyper=GbtHyperParams(n_trees=10))
        path = tmp_path / "bundle.json"
        bundle.save(path)
        loaded = EstimatorBundle.load(path)
        assert np.array_equal(loaded.predict_matrix(x), bundle.predict_matrix(x))

    def test_schema_version_checked(self, tmp_path):
        path = tmp_path / "bundle.json"
        path.write_text('{"schema_version": 99, "kind": "linear", "zones": []}')
        with pytest.raises(ValueError, match="schema version"):
            EstimatorBundle.load(path)

    def test_parallel_fit_matches_serial(self):
        rng = np.random.default_rng(5)
        x = random_features(rng, 150)
        targets = rng.normal(0, 0.1, (150, 9))
        hyper = GbtHyperParams(n_trees=5)
        serial = fit_gbt_bundle(x, targets, hyper=hyper, n_jobs=1)
        parallel = fit_gbt_bundle(x, targets, hyper=hyper, n_jobs=2)
        assert np.array_equal(serial.predict_matrix(x),
                              parallel.predict_matrix(x))


class TestSplit:
    def test_seventy_thirty(self):
        x = np.arange(10).reshape(-1, 1)
        y = np.arange(10)
        (xt, yt), (xe, ye) = train_test_split(x, y)
        assert len(xt) == 7 and len(xe) == 3

    def test_partition(self):
        x = np.arange(40).reshape(-1, 1)
        y = np.arange(40)
        (xt, yt), (xe, ye) = train_test_split(x, y, mode="shuffled", seed=1)
        merged = np.sort(np.concatenate([yt, ye]))
        assert np.array_equal(merged, y)

    def test_chronological_ordering(self):
        x = np.arange(30).reshape(-1, 1)
        y = np.arange(30)
        (xt, yt), (xe, ye) = train_test_split(x, y)
        assert yt.max() < ye.min()

    def test_too_small(self):
        with pytest.raises(ValueError):
            train_test_split(np.zeros((5, 1)), np.zeros(5))

    @settings(max_examples=25)
    @given(st.integers(10, 200), st.floats(0.1, 0.9))
    def test_sizes_always_partition(self, n, ratio):
        x = np.arange(n).reshape(-1, 1)
        (xt, _), (xe, _) = train_test_split(x, np.zeros(n), ratio=ratio)
        assert len(xt) + len(xe) == n
        assert len(xt) >= 1 and len(xe) >= 1
