import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from craft.data import (
    Dataset,
    GeneratorSpec,
    apply_scaler,
    fit_scaler,
    generate_synthetic,
    ground_truth,
    inject_marginal_bias,
    invert_scaler,
    load_csv,
    stratified_label_mask,
    write_csv,
)


def make_dataset(n=10, d=3, seed=0, labeled=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = rng.normal(size=n)
    mask = np.ones(n, dtype=bool) if labeled is None else np.asarray(labeled, dtype=bool)
    return Dataset(X, y, mask)


class TestDatasetInvariants:
    def test_rejects_nonfinite_features(self):
        with pytest.raises(ValueError, match="non-finite"):
            Dataset(np.array([[1.0], [np.inf]]), np.zeros(2), np.ones(2, dtype=bool))

    def test_rejects_nan_label_on_labeled_row(self):
        with pytest.raises(ValueError, match="finite label"):
            Dataset(np.ones((2, 1)), np.array([1.0, np.nan]), np.ones(2, dtype=bool))

    def test_nan_label_allowed_when_unlabeled(self):
        ds = Dataset(np.ones((2, 1)), np.array([1.0, np.nan]), np.array([True, False]))
        assert ds.n_labeled == 1

    def test_arrays_are_readonly(self):
        ds = make_dataset()
        with pytest.raises(ValueError):
            ds.features[0, 0] = 99.0


class TestCsv:
    def test_missing_labeled_column_defaults_to_all_labeled(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("f0,f1,y\n0.1,0.2,1.5\n0.3,0.4,2.5\n0.5,0.6,3.5\n")
        ds = load_csv(path)
        assert ds.labeled.tolist() == [True, True, True]
        assert ds.labels.tolist() == [1.5, 2.5, 3.5]

    def test_empty_label_cell_on_unlabeled_row(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("f0,f1,y,labeled\n0.1,0.2,,0\n0.3,0.4,1.0,1\n")
        ds = load_csv(path)
        assert not ds.labeled[0] and math.isnan(ds.labels[0])
        assert ds.labeled[1] and ds.labels[1] == 1.0

    def test_labeled_row_with_empty_label_errors(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("f0,f1,y,labeled\n0.1,0.2,,1\n")
        with pytest.raises(ValueError, match="labeled sample missing label"):
            load_csv(path)

    def test_malformed_header_errors(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b,y\n1,2,3\n")
        with pytest.raises(ValueError, match="malformed header"):
            load_csv(path)

    def test_non_numeric_cell_errors(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("f0,y\nfoo,1.0\n")
        with pytest.raises(ValueError, match="non-numeric"):
            load_csv(path)

    def test_round_trip(self, tmp_path):
        ds = make_dataset(n=7, d=2, labeled=[1, 1, 0, 1, 0, 1, 1])
        path = tmp_path / "d.csv"
        write_csv(ds, path)
        back = load_csv(path)
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labeled, ds.labeled)
        np.testing.assert_array_equal(back.labels[back.labeled], ds.labels[ds.labeled])
        assert np.isnan(back.labels[~back.labeled]).all()

    def test_fully_labeled_round_trip_omits_mask_column(self, tmp_path):
        ds = make_dataset(n=3, d=2)
        path = tmp_path / "d.csv"
        write_csv(ds, path)
        assert path.read_text().splitlines()[0] == "f0,f1,y"
        back = load_csv(path)
        np.testing.assert_array_equal(back.labels, ds.labels)


class TestScaler:
    def test_label_endpoints_map_to_unit_interval(self):
        ds = Dataset(np.arange(6).reshape(3, 2) + 0.0, np.array([0.0, 5.0, 10.0]), np.ones(3, dtype=bool))
        params = fit_scaler(ds)
        scaled = apply_scaler(ds, params)
        np.testing.assert_allclose(scaled.labels, [-1.0, 0.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_round_trip_identity(self, seed):
        ds = make_dataset(n=20, d=4, seed=seed)
        params = fit_scaler(ds)
        back = invert_scaler(apply_scaler(ds, params), params)
        np.testing.assert_allclose(back.features, ds.features, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(back.labels, ds.labels, rtol=1e-12, atol=1e-12)

    def test_scaled_features_standardized(self):
        ds = make_dataset(n=200, d=3, seed=1)
        scaled = apply_scaler(ds, fit_scaler(ds))
        np.testing.assert_allclose(scaled.features.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(scaled.features.std(axis=0), 1.0, atol=1e-12)

    def test_zero_variance_feature_errors(self):
        X = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
        ds = Dataset(X, np.arange(5.0), np.ones(5, dtype=bool))
        with pytest.raises(ValueError, match="zero-variance"):
            fit_scaler(ds)

    def test_constant_labels_error(self):
        ds = Dataset(np.random.default_rng(0).normal(size=(5, 2)), np.full(5, 2.0), np.ones(5, dtype=bool))
        with pytest.raises(ValueError, match="label_lo equals label_hi"):
            fit_scaler(ds)

    def test_label_range_uses_labeled_rows_only(self):
        X = np.random.default_rng(0).normal(size=(4, 2))
        ds = Dataset(X, np.array([0.0, 10.0, 100.0, -100.0]), np.array([True, True, False, False]))
        params = fit_scaler(ds)
        assert params.label_lo == 0.0 and params.label_hi == 10.0


class TestStratifiedMask:
    def test_exact_counts_per_stratum(self):
        ds = Dataset(np.ones((10, 1)), np.arange(10.0), np.ones(10, dtype=bool))
        masked = stratified_label_mask(ds, keep_fraction=0.4, n_strata=2, seed=0)
        order = np.argsort(ds.labels)
        assert masked.labeled[order[:5]].sum() == 2
        assert masked.labeled[order[5:]].sum() == 2

    def test_keep_all_is_identity(self):
        ds = make_dataset(n=12)
        masked = stratified_label_mask(ds, 1.0, n_strata=3, seed=5)
        assert masked.labeled.all()

    def test_deterministic_and_seed_sensitive(self):
        ds = make_dataset(n=40)
        a = stratified_label_mask(ds, 0.3, n_strata=4, seed=11)
        b = stratified_label_mask(ds, 0.3, n_strata=4, seed=11)
        c = stratified_label_mask(ds, 0.3, n_strata=4, seed=12)
        np.testing.assert_array_equal(a.labeled, b.labeled)
        assert not np.array_equal(a.labeled, c.labeled)

    def test_only_mask_changes(self):
        ds = make_dataset(n=15)
        masked = stratified_label_mask(ds, 0.5, seed=3)
        np.testing.assert_array_equal(masked.features, ds.features)
        np.testing.assert_array_equal(masked.labels, ds.labels)

    def test_fraction_domain(self):
        ds = make_dataset()
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                stratified_label_mask(ds, bad)

    def test_requires_fully_labeled(self):
        ds = make_dataset(n=4, labeled=[1, 0, 1, 1])
        with pytest.raises(ValueError, match="fully labeled"):
            stratified_label_mask(ds, 0.5)


class TestMarginalBias:
    def test_counts_with_median_threshold(self):
        ds = Dataset(np.ones((100, 1)), np.arange(100.0), np.ones(100, dtype=bool))
        biased = inject_marginal_bias(ds, keep_fraction_above=0.2, threshold_quantile=0.5, seed=0)
        assert biased.n == 60
        assert (biased.labels <= 49.5).sum() == 50
        assert (biased.labels > 49.5).sum() == 10

    def test_keep_all_is_identity(self):
        ds = make_dataset(n=30)
        biased = inject_marginal_bias(ds, 1.0, seed=0)
        np.testing.assert_array_equal(biased.features, ds.features)
        np.testing.assert_array_equal(biased.labels, ds.labels)

    def test_output_is_row_subset(self):
        ds = make_dataset(n=50, seed=2)
        biased = inject_marginal_bias(ds, 0.3, seed=4)
        rows = {tuple(r) for r in ds.features}
        assert all(tuple(r) in rows for r in biased.features)
        assert biased.n < ds.n

    def test_mean_threshold_then_mask_reproduces_bias_protocol(self):
        # the sampling-bias regime: 80% above the mean removed, then keep 40% of labels
        rng = np.random.default_rng(0)
        y = rng.normal(60.0, 10.0, 400)
        ds = Dataset(rng.normal(size=(400, 2)), y, np.ones(400, dtype=bool))
        biased = inject_marginal_bias(ds, keep_fraction_above=0.2, seed=1)
        n_above_before = int((y > y.mean()).sum())
        n_above_after = int((biased.labels > y.mean()).sum())
        assert n_above_after == int(math.floor(0.2 * n_above_before + 0.5))
        masked = stratified_label_mask(biased, 0.4, seed=1)
        kept = masked.n_labeled / masked.n
        assert abs(kept - 0.4) < 0.05

    def test_fraction_domain(self):
        ds = make_dataset()
        with pytest.raises(ValueError):
            inject_marginal_bias(ds, -0.01)
        with pytest.raises(ValueError):
            inject_marginal_bias(ds, 1.01)


class TestGenerator:
    def test_null_shift_matches_source_distribution(self):
        spec = GeneratorSpec("null", 3, 2000, 2000, 10, 10, 0.0, 1.0, 0.0, 3)
        source, train, _, _ = generate_synthetic(spec)
        assert abs(train.features.mean()) < 0.05
        assert abs(train.features.std() - 1.0) < 0.05
        assert abs(source.features.mean()) < 0.05

    def test_noiseless_labels_equal_ground_truth(self):
        spec = GeneratorSpec("clean", 4, 50, 50, 10, 10, 0.5, 1.3, 0.0, 1)
        source, train, _, _ = generate_synthetic(spec)
        np.testing.assert_array_equal(source.labels, ground_truth(source.features))
        np.testing.assert_array_equal(train.labels, ground_truth(train.features))

    def test_deterministic(self):
        spec = GeneratorSpec("det", 2, 30, 30, 10, 10, 0.5, 1.2, 0.1, 9)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        for ds_a, ds_b in zip(a, b):
            np.testing.assert_array_equal(ds_a.features, ds_b.features)
            np.testing.assert_array_equal(ds_a.labels, ds_b.labels)

    def test_target_splits_disjoint(self):
        spec = GeneratorSpec("disjoint", 2, 30, 40, 40, 40, 0.5, 1.2, 0.1, 9)
        _, train, val, test = generate_synthetic(spec)
        seen = {tuple(r) for r in train.features}
        assert not any(tuple(r) in seen for r in val.features)
        assert not any(tuple(r) in seen for r in test.features)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            GeneratorSpec("bad", 2, 0, 10, 10, 10, 0.0, 1.0, 0.1, 0)
        with pytest.raises(ValueError):
            GeneratorSpec("bad", 2, 10, 10, 10, 10, 0.0, -1.0, 0.1, 0)
        with pytest.raises(ValueError):
            GeneratorSpec("bad", 2, 10, 10, 10, 10, 0.0, 1.0, -0.1, 0)
