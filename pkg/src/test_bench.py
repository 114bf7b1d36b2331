"""
Unit tests for the real-data benchmark: ingestion, cross-validation splits,
scoring, the prior-variance grid search and the dataset catalog.
"""

import logging
from pathlib import Path

import numpy as np
import pytest

from bench import (
    CvPlan,
    Dataset,
    IngestionSpec,
    apply_scaler,
    check_catalog_shape,
    default_sigma_grid,
    evaluate_acc,
    evaluate_auc,
    fit_fold,
    fit_scaler,
    grid_search_sigma_x,
    kfold_split,
    load_catalog,
    load_dataset,
    run_benchmark,
)
from error_handling import (
    ConfigurationError,
    DataLoadError,
    DatasetNotFoundError,
    DuplicateHeaderError,
    MissingValueError,
    NonNumericError,
    SingleClassError,
    ValidationError,
)
from estimators import EstimatorId, SolverConfig
from model_core import trial_stream

CATALOG_PATH = Path(__file__).resolve().parent.parent / "config" / "datasets.yaml"
DATA_DIR = Path(__file__).resolve().parent.parent / "data"


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def probit_dataset(m=80, n=3, seed=0):
    rng = trial_stream(41, seed)
    features = rng.standard_normal((m, n)) * np.array([1.0, 5.0, 0.2])[:n]
    weights = np.array([1.5, -0.3, 4.0])[:n]
    labels = np.where(features @ weights + rng.standard_normal(m) >= 0.0, 1.0, -1.0)
    return Dataset(
        name="synthetic",
        features=features,
        labels=labels,
        feature_names=[f"f{i}" for i in range(n)],
    )


class TestLoadDataset:
    """Test cases for CSV ingestion."""

    def test_basic_load(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "id,a,b,y\n1,0.5,2,1\n2,1.5,-1,0\n3,2.5,0,1\n")
        dataset = load_dataset(path, IngestionSpec(label_column="y", drop_columns=("id",)))
        assert dataset.name == "d"
        assert dataset.feature_names == ["a", "b"]
        assert dataset.labels.tolist() == [1.0, -1.0, 1.0]
        assert np.allclose(dataset.features, [[0.5, 2.0], [1.5, -1.0], [2.5, 0.0]])

    def test_positive_value_and_intercept(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "x,famhist\n1,Present\n2,Absent\n3,Present\n")
        spec = IngestionSpec(label_column="famhist", positive_value="Present", add_intercept=True)
        dataset = load_dataset(path, spec, name="heart")
        assert dataset.name == "heart"
        assert dataset.labels.tolist() == [1.0, -1.0, 1.0]
        assert dataset.n == 2 and dataset.n_data_features == 1
        assert dataset.intercept_column == 1
        assert np.all(dataset.features[:, 1] == 1.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetNotFoundError) as error:
            load_dataset(tmp_path / "absent.csv", IngestionSpec(label_column="y"))
        assert "absent.csv" in str(error.value)

    def test_missing_value_names_row_and_column(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "a,b,y\n1,2,1\n3,,0\n")
        with pytest.raises(MissingValueError) as error:
            load_dataset(path, IngestionSpec(label_column="y"))
        assert "row 2" in str(error.value) and "'b'" in str(error.value)

    def test_non_numeric_feature(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "a,b,y\n1,2,1\n3,abc,0\n")
        with pytest.raises(NonNumericError) as error:
            load_dataset(path, IngestionSpec(label_column="y"))
        assert "abc" in str(error.value)

    def test_single_class(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "a,y\n1,1\n2,1\n")
        with pytest.raises(SingleClassError):
            load_dataset(path, IngestionSpec(label_column="y"))

    def test_duplicate_header(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "a,a,y\n1,2,1\n2,3,0\n")
        with pytest.raises(DuplicateHeaderError):
            load_dataset(path, IngestionSpec(label_column="y"))

    def test_unknown_label_column(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "a,y\n1,1\n2,0\n")
        with pytest.raises(DataLoadError):
            load_dataset(path, IngestionSpec(label_column="label"))

    def test_byte_order_mark_is_ignored(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_bytes(b"\xef\xbb\xbfy,a\n1,0.5\n0,1.5\n")
        dataset = load_dataset(path, IngestionSpec(label_column="y"))
        assert dataset.feature_names == ["a"]
        assert dataset.labels.tolist() == [1.0, -1.0]

    def test_invalid_utf8_is_a_load_error(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_bytes(b"a,y\n\xff\xfe,1\n2,0\n")
        with pytest.raises(DataLoadError) as error:
            load_dataset(path, IngestionSpec(label_column="y"))
        assert "UTF-8" in str(error.value)

    def test_spec_from_dict_is_strict(self):
        spec = IngestionSpec.from_dict({"label_column": "y", "drop_columns": ["id"]})
        assert spec.drop_columns == ("id",)
        with pytest.raises(ConfigurationError):
            IngestionSpec.from_dict({"label_column": "y", "label": "z"})
        with pytest.raises(ConfigurationError):
            IngestionSpec.from_dict({})


class TestSplitsAndScores:
    """Test cases for k-fold splits, standardization and the metrics."""

    def test_kfold_partitions(self):
        plan = CvPlan(folds=5, partitions=3, seed=4)
        splits = kfold_split(23, plan)
        assert len(splits) == 3 and all(len(folds) == 5 for folds in splits)
        for folds in splits:
            tests = [test for _, test in folds]
            assert sorted(np.concatenate(tests).tolist()) == list(range(23))
            sizes = [t.size for t in tests]
            assert max(sizes) - min(sizes) <= 1
            for train, test in folds:
                assert not set(train) & set(test)
                assert train.size + test.size == 23
        assert not np.array_equal(splits[0][0][1], splits[1][0][1])

    def test_kfold_is_deterministic(self):
        plan = CvPlan(folds=3, partitions=2, seed=1)
        a, b = kfold_split(30, plan), kfold_split(30, plan)
        assert all(np.array_equal(x[1], y[1]) for fa, fb in zip(a, b) for x, y in zip(fa, fb))

    def test_too_few_samples(self):
        with pytest.raises(ValidationError):
            kfold_split(3, CvPlan(folds=5))

    def test_fold_sizes_for_eleven_rows(self):
        folds = kfold_split(11, CvPlan(folds=5, partitions=1, seed=0))[0]
        assert sorted(test.size for _, test in folds) == [2, 2, 2, 2, 3]
        assert all(train.size + test.size == 11 for train, test in folds)

    def test_every_row_tested_once_per_partition(self):
        plan = CvPlan(folds=4, partitions=5, seed=8)
        for folds in kfold_split(37, plan):
            counts = np.zeros(37, dtype=int)
            for train, test in folds:
                assert np.intersect1d(train, test).size == 0
                assert np.array_equal(np.union1d(train, test), np.arange(37))
                counts[test] += 1
            assert np.all(counts == 1), f"test counts per row: {counts.tolist()}"

    def test_scaler_skips_intercept(self):
        features = np.array([[1.0, 1.0], [3.0, 1.0], [5.0, 1.0]])
        scaler, columns = fit_scaler(features, intercept_column=1)
        assert columns.tolist() == [0]
        scaled = apply_scaler(scaler, columns, features)
        assert np.allclose(scaled[:, 0].mean(), 0.0)
        # population standard deviation (ddof=0)
        assert np.allclose(scaled[:, 0].std(ddof=0), 1.0)
        assert scaler.scale_[0] == pytest.approx(np.sqrt(8.0 / 3.0))
        assert np.all(scaled[:, 1] == 1.0)
        assert np.array_equal(features[:, 0], [1.0, 3.0, 5.0])

    def test_intercept_only_passes_through(self):
        features = np.ones((4, 1))
        scaler, columns = fit_scaler(features, intercept_column=0)
        assert scaler is None and columns.size == 0
        assert np.array_equal(apply_scaler(scaler, columns, features), features)

    def test_fold_fit_sees_only_training_rows(self):
        dataset = probit_dataset(m=60)
        train, test = kfold_split(dataset.m, CvPlan(folds=3, partitions=1, seed=2))[0][0]
        poisoned_features = dataset.features.copy()
        poisoned_features[test] = 1e6 * poisoned_features[test] + 1e4
        poisoned_labels = dataset.labels.copy()
        poisoned_labels[test] = -poisoned_labels[test]
        poisoned = Dataset(
            name="poisoned",
            features=poisoned_features,
            labels=poisoned_labels,
            feature_names=dataset.feature_names,
        )
        grid = [0.01, 1.0, 100.0]
        cfg = SolverConfig.desk_scale()
        clean_fit = fit_fold(dataset, train, EstimatorId.MAP, grid, cfg, trial_stream(3))
        poisoned_fit = fit_fold(poisoned, train, EstimatorId.MAP, grid, cfg, trial_stream(3))

        assert np.allclose(clean_fit.scaler.mean_, dataset.features[train].mean(axis=0))
        assert np.array_equal(clean_fit.scaler.mean_, poisoned_fit.scaler.mean_)
        assert np.array_equal(clean_fit.scaler.scale_, poisoned_fit.scaler.scale_)
        assert clean_fit.sigma_x_sq == poisoned_fit.sigma_x_sq
        assert np.array_equal(clean_fit.weights, poisoned_fit.weights)

    def test_accuracy(self):
        labels = np.array([1.0, -1.0, 1.0, -1.0])
        assert evaluate_acc(np.array([0.0, -1.0, 2.0, 3.0]), labels) == 0.75

    def test_auc(self):
        labels = np.array([1.0, 1.0, -1.0, -1.0])
        assert evaluate_auc(np.array([0.9, 0.8, 0.1, 0.2]), labels) == 1.0
        assert evaluate_auc(np.array([0.1, 0.2, 0.9, 0.8]), labels) == 0.0
        assert evaluate_auc(np.zeros(4), labels) == 0.5
        assert evaluate_auc(np.array([0.9, 0.1, 0.5, 0.05]), labels) == pytest.approx(0.75)

    def test_auc_invariant_under_monotone_transforms(self):
        rng = trial_stream(41, 12)
        scores = rng.standard_normal(200)
        labels = np.where(scores + rng.standard_normal(200) > 0.0, 1.0, -1.0)
        auc = evaluate_auc(scores, labels)
        assert evaluate_auc(np.exp(scores), labels) == pytest.approx(auc, abs=1e-12)
        assert evaluate_auc(3.0 * scores, labels) == pytest.approx(auc, abs=1e-12)
        assert evaluate_auc(-scores, labels) == pytest.approx(1.0 - auc, abs=1e-12)

    def test_auc_of_shuffled_labels_is_near_one_half(self):
        rng = trial_stream(41, 13)
        scores = rng.standard_normal(4000)
        labels = np.where(scores > 0.0, 1.0, -1.0)
        assert evaluate_auc(scores, labels) == 1.0
        shuffled = rng.permutation(labels)
        # standard error is about 0.009 at this size
        assert abs(evaluate_auc(scores, shuffled) - 0.5) < 0.05

    def test_auc_single_class(self):
        with pytest.raises(ValidationError):
            evaluate_auc(np.array([0.1, 0.2]), np.array([1.0, 1.0]))

    def test_default_grid(self):
        grid = default_sigma_grid()
        assert len(grid) == 9
        assert grid[0] == pytest.approx(0.01) and grid[-1] == pytest.approx(100.0)


class TestGridSearch:
    """Test cases for the prior-variance grid search."""

    def setup_method(self):
        self.dataset = probit_dataset()
        self.cfg = SolverConfig.desk_scale()

    def test_singleton_grid(self):
        value = grid_search_sigma_x(
            self.dataset.features, self.dataset.labels, EstimatorId.MAP, [2.0, 2.0],
            trial_stream(0), self.cfg,
        )
        assert value == 2.0

    def test_choice_comes_from_grid(self):
        grid = [0.01, 1.0, 100.0]
        value = grid_search_sigma_x(
            self.dataset.features, self.dataset.labels, EstimatorId.LMMSE, grid,
            trial_stream(1), self.cfg,
        )
        assert value in grid

    def test_invalid_grid(self):
        with pytest.raises(ValidationError):
            grid_search_sigma_x(
                self.dataset.features, self.dataset.labels, EstimatorId.MAP, [],
                trial_stream(0), self.cfg,
            )
        with pytest.raises(ValidationError):
            grid_search_sigma_x(
                self.dataset.features, self.dataset.labels, EstimatorId.MAP, [-1.0, 1.0],
                trial_stream(0), self.cfg,
            )


class TestRunBenchmark:
    """Test cases for run_benchmark."""

    def setup_method(self):
        self.cfg = SolverConfig(gibbs_samples=200, gibbs_burn_in=50)
        self.plan = CvPlan(folds=3, partitions=2, seed=5)

    def test_rows_and_ranges(self):
        dataset = probit_dataset()
        estimators = [EstimatorId.MAP, EstimatorId.LMMSE, EstimatorId.LS]
        results = run_benchmark(dataset, estimators, self.plan, [0.1, 1.0, 10.0], self.cfg)
        assert [r.estimator_id for r in results] == [
            EstimatorId.LMMSE,
            EstimatorId.LS,
            EstimatorId.MAP,
        ]
        for r in results:
            assert r.available, r.reason
            assert 0.5 < r.acc_mean <= 1.0, f"{r.estimator_id.value}: ACC {r.acc_mean}"
            assert 0.5 < r.auc_mean <= 1.0
            assert r.acc_std >= 0.0
            assert r.sigma_x_sq_mode in (0.1, 1.0, 10.0)

    def test_ls_absent_for_short_training_folds(self):
        rng = trial_stream(41, 9)
        dataset = Dataset(
            name="wide",
            features=rng.standard_normal((10, 8)),
            labels=np.tile([1.0, -1.0], 5),
            feature_names=[f"f{i}" for i in range(8)],
        )
        plan = CvPlan(folds=2, partitions=1)
        results = run_benchmark(dataset, [EstimatorId.LS, EstimatorId.LMMSE], plan, [1.0], self.cfg)
        ls = results[1] if results[0].estimator_id == EstimatorId.LMMSE else results[0]
        assert not ls.available and "M < N" in ls.reason
        assert ls.acc_mean is None

    def test_thread_count_does_not_change_results(self):
        dataset = probit_dataset(m=40, seed=2)
        estimators = [EstimatorId.LMMSE, EstimatorId.PM]
        one = run_benchmark(dataset, estimators, self.plan, [0.1, 1.0], self.cfg, threads=1)
        many = run_benchmark(dataset, estimators, self.plan, [0.1, 1.0], self.cfg, threads=3)
        assert one == many


class TestCatalog:
    """Test cases for the dataset catalog."""

    def setup_method(self):
        self.catalog = load_catalog(CATALOG_PATH)

    def test_catalog_entries(self):
        assert set(self.catalog) == {
            "Admissions",
            "Lowbwt",
            "Polypharm",
            "Myopia",
            "Uis",
            "SAheart",
        }
        saheart = self.catalog["SAheart"]
        assert (saheart.m, saheart.n) == (462, 9)
        assert saheart.reference_for(EstimatorId.LMMSE, "acc") == pytest.approx(0.727)
        assert saheart.reference_for(EstimatorId.ML, "acc") is None

    def test_shape_mismatch_warns(self, caplog):
        entry = self.catalog["Admissions"]
        with caplog.at_level(logging.WARNING, logger="linprobit.bench"):
            assert not check_catalog_shape(probit_dataset(), entry)
        assert "catalog lists" in caplog.text

    def test_missing_catalog(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_catalog(tmp_path / "none.yaml")


@pytest.mark.slow
class TestSaheartReproduction:
    """Full protocol on SAheart against the reference means (needs data/SAheart.csv)."""

    def test_reference_means(self):
        catalog = load_catalog(CATALOG_PATH)
        entry = catalog["SAheart"]
        path = DATA_DIR / entry.file
        if not path.is_file():
            pytest.skip(f"{path} not present")
        dataset = load_dataset(path, entry.spec, name="SAheart")
        estimators = [EstimatorId.LMMSE, EstimatorId.MAP, EstimatorId.PM, EstimatorId.LOGIT_MAP]
        results = run_benchmark(
            dataset, estimators, CvPlan(folds=5, partitions=20), default_sigma_grid(),
            SolverConfig.desk_scale(), threads=4,
        )
        for r in results:
            for metric in ("acc", "auc"):
                reference = entry.reference_for(r.estimator_id, metric)
                ours = getattr(r, f"{metric}_mean")
                assert abs(ours - reference) <= 0.03, (
                    f"{r.estimator_id.value} {metric}: {ours:.3f} vs {reference:.3f}"
                )
