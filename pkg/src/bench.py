"""
Real-Data Benchmark

Pipeline for the binary regression datasets:
1. CSV ingestion with strict error reporting
2. Repeated k-fold cross-validation splits
3. Training-fold standardization and prior-variance grid search
4. ACC / AUC scoring and aggregation across partitions
5. The dataset catalog in config/datasets.yaml
"""

import csv
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from joblib import Parallel, delayed
from scipy import stats
from sklearn.preprocessing import StandardScaler

from error_handling import (
    ConfigurationError,
    DataLoadError,
    DatasetNotFoundError,
    DuplicateHeaderError,
    ErrorSeverity,
    MissingValueError,
    NonNumericError,
    NumericalError,
    SingleClassError,
    ValidationError,
    log_error,
)
from estimators import (
    EstimatorId,
    SolverConfig,
    estimator_availability,
    fit_estimator,
)
from model_core import ObservationVector, ProbitProblem, trial_stream

logger = logging.getLogger("linprobit.bench")

INNER_VALIDATION_FRACTION = 0.25
NOISE_VARIANCE = 1.0
INTERCEPT_NAME = "intercept"
# a leading byte-order mark is dropped rather than glued to the first column name
CSV_ENCODING = "utf-8-sig"
DEFAULT_ESTIMATORS = (
    EstimatorId.LMMSE,
    EstimatorId.LS,
    EstimatorId.MAP,
    EstimatorId.PM,
    EstimatorId.LOGIT_MAP,
)
ESTIMATOR_ORDER = list(EstimatorId)

# stream keys under CvPlan.seed
SPLIT_KEY = 0
INNER_SPLIT_KEY = 1
FIT_KEY = 2


def default_sigma_grid() -> List[float]:
    """Nine log-spaced prior variances in [1e-2, 1e2]."""
    return np.logspace(-2.0, 2.0, 9).tolist()


@dataclass(frozen=True)
class IngestionSpec:
    """How a CSV file becomes a Dataset."""

    label_column: str
    positive_value: Optional[Any] = None
    add_intercept: bool = False
    drop_columns: Tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IngestionSpec":
        unknown = set(data) - {"label_column", "positive_value", "add_intercept", "drop_columns"}
        if unknown:
            raise ConfigurationError(
                f"Unknown ingestion spec field(s): {', '.join(sorted(unknown))}",
                details={"fields": sorted(unknown)},
            )
        if "label_column" not in data:
            raise ConfigurationError("Ingestion spec requires 'label_column'")
        return cls(
            label_column=str(data["label_column"]),
            positive_value=data.get("positive_value"),
            add_intercept=bool(data.get("add_intercept", False)),
            drop_columns=tuple(str(c) for c in data.get("drop_columns", ()) or ()),
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Features (M x N), labels in {-1, +1} and column names."""

    name: str
    features: np.ndarray
    labels: np.ndarray
    feature_names: List[str]
    intercept_column: Optional[int] = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValidationError("features and labels disagree in row count")
        if len(self.feature_names) != self.features.shape[1]:
            raise ValidationError("feature_names does not match the feature count")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValidationError("labels must be -1 or +1")
        if np.unique(self.labels).size < 2:
            raise SingleClassError(f"dataset '{self.name}' has a single label class")

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1]

    @property
    def n_data_features(self) -> int:
        return self.n - (self.intercept_column is not None)


def _read_header(path: Path) -> List[str]:
    try:
        with open(path, newline="", encoding=CSV_ENCODING) as handle:
            header = next(csv.reader(handle), None)
    except UnicodeDecodeError as e:
        raise DataLoadError(f"{path}: not valid UTF-8 text: {e}", details={"path": str(path)})
    if not header:
        raise DataLoadError(f"{path}: file is empty or has no header row")
    return [name.strip() for name in header]


def _parse_labels(raw: pd.Series, spec: IngestionSpec, path: Path) -> np.ndarray:
    text = raw.str.strip()
    if spec.positive_value is not None:
        positive = str(spec.positive_value).strip()
        numeric = pd.to_numeric(text, errors="coerce")
        try:
            matches = (numeric == float(positive)) | (text == positive)
        except ValueError:
            matches = text == positive
        return np.where(matches.to_numpy(), 1.0, -1.0)

    numeric = pd.to_numeric(text, errors="coerce")
    bad = numeric.isna() | ~numeric.isin([-1.0, 0.0, 1.0])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise NonNumericError(
            f"{path}: label '{raw.iloc[row]}' in row {row + 1}, column "
            f"'{spec.label_column}' is not 0/1 or -1/+1 (set positive_value)",
            details={"row": row + 1, "column": spec.label_column},
        )
    values = numeric.to_numpy(dtype=float)
    if np.any(values == 0.0) and np.any(values == -1.0):
        raise DataLoadError(f"{path}: labels mix 0/1 and -1/+1 codings")
    return np.where(values > 0.0, 1.0, -1.0)


def load_dataset(
    path: Union[str, Path], spec: IngestionSpec, name: Optional[str] = None
) -> Dataset:
    """
    Load a CSV file with a header row into a Dataset.

    Labels are mapped 0 -> -1 and 1 -> +1 (or matched against
    `spec.positive_value`). Remaining columns, minus `spec.drop_columns`, become
    the features in header order. Features are not standardized here.

    Raises:
        DatasetNotFoundError, DuplicateHeaderError, MissingValueError,
        NonNumericError, SingleClassError: one per ingestion failure
    """
    path = Path(path)
    name = name or path.stem
    if not path.is_file():
        raise DatasetNotFoundError(f"Dataset file not found: {path}", details={"path": str(path)})

    header = _read_header(path)
    duplicates = sorted(n for n, count in Counter(header).items() if count > 1)
    if duplicates:
        raise DuplicateHeaderError(
            f"{path}: duplicate column name(s) {duplicates}", details={"columns": duplicates}
        )
    for column in (spec.label_column, *spec.drop_columns):
        if column not in header:
            raise DataLoadError(
                f"{path}: column '{column}' not found in header", details={"column": column}
            )

    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, skipinitialspace=True, encoding=CSV_ENCODING
        )
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataLoadError(f"{path}: could not parse CSV: {e}", details={"path": str(path)})
    frame.columns = header

    cells = frame.fillna("").apply(lambda column: column.str.strip())
    missing = cells.eq("")
    if missing.to_numpy().any():
        row, col = np.argwhere(missing.to_numpy())[0]
        raise MissingValueError(
            f"{path}: missing value in row {row + 1}, column '{header[col]}'",
            details={"row": int(row) + 1, "column": header[col]},
        )

    labels = _parse_labels(cells[spec.label_column], spec, path)
    feature_names = [
        c for c in header if c != spec.label_column and c not in spec.drop_columns
    ]
    numeric = cells[feature_names].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise NonNumericError(
            f"{path}: non-numeric value '{cells[feature_names[col]].iloc[row]}' in row "
            f"{row + 1}, column '{feature_names[col]}'",
            details={"row": int(row) + 1, "column": feature_names[col]},
        )
    features = numeric.to_numpy(dtype=float)

    if np.unique(labels).size < 2:
        raise SingleClassError(
            f"{path}: label column '{spec.label_column}' holds a single class",
            details={"column": spec.label_column},
        )

    intercept_column = None
    if spec.add_intercept:
        features = np.hstack([features, np.ones((features.shape[0], 1))])
        feature_names = feature_names + [INTERCEPT_NAME]
        intercept_column = features.shape[1] - 1

    logger.info(f"Loaded dataset '{name}': M={features.shape[0]}, N={features.shape[1]}")
    return Dataset(
        name=name,
        features=features,
        labels=labels,
        feature_names=feature_names,
        intercept_column=intercept_column,
    )


def fit_scaler(
    features: np.ndarray, intercept_column: Optional[int] = None
) -> Tuple[Optional[StandardScaler], np.ndarray]:
    """StandardScaler fitted on every column except the intercept, and those columns."""
    columns = np.array([j for j in range(features.shape[1]) if j != intercept_column], dtype=int)
    if columns.size == 0:
        return None, columns
    return StandardScaler().fit(features[:, columns]), columns


def apply_scaler(
    scaler: Optional[StandardScaler], columns: np.ndarray, features: np.ndarray
) -> np.ndarray:
    """Scale `columns` of `features`; every other column passes through unchanged."""
    out = np.array(features, dtype=float, copy=True)
    if scaler is not None:
        out[:, columns] = scaler.transform(out[:, columns])
    return out


@dataclass(frozen=True)
class CvPlan:
    """Repeated k-fold cross-validation: `partitions` random k-fold splits."""

    folds: int = 5
    partitions: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValidationError("folds must be at least 2", details={"folds": self.folds})
        if self.partitions < 1:
            raise ValidationError("partitions must be at least 1")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")


Split = Tuple[np.ndarray, np.ndarray]


def kfold_split(m: int, plan: CvPlan) -> List[List[Split]]:
    """
    (train, test) index pairs for each fold of each partition.

    Each partition shuffles 0..m-1 with its own stream and chops the permutation
    into `plan.folds` blocks whose sizes differ by at most one.
    """
    if m < plan.folds:
        raise ValidationError(
            f"cannot split {m} samples into {plan.folds} folds",
            details={"m": m, "folds": plan.folds},
        )
    partitions = []
    for p in range(plan.partitions):
        order = trial_stream(plan.seed, SPLIT_KEY, p).permutation(m)
        blocks = np.array_split(order, plan.folds)
        partitions.append(
            [
                (np.sort(np.concatenate(blocks[:k] + blocks[k + 1 :])), np.sort(block))
                for k, block in enumerate(blocks)
            ]
        )
    return partitions


def evaluate_acc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose score sign (sign(0) = +1) equals the label."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValidationError(
            "scores and labels must be nonempty vectors of equal length",
            details={"scores": scores.shape, "labels": labels.shape},
        )
    predictions = np.where(scores >= 0.0, 1.0, -1.0)
    return float(np.mean(predictions == labels))


def evaluate_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted as one half, from midranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be vectors of equal length")
    positive = labels > 0.0
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC is undefined when only one class is present")
    ranks = stats.rankdata(scores)
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def fit_weights(
    features: np.ndarray,
    labels: np.ndarray,
    estimator_id: EstimatorId,
    sigma_x_sq: float,
    cfg: SolverConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Fit one estimator with C_x = sigma_x_sq I and C_w = I on (already scaled) rows."""
    problem = ProbitProblem.isotropic(features, sigma_x_sq, NOISE_VARIANCE)
    reason = estimator_availability(estimator_id, problem)
    if reason:
        raise NumericalError(reason)
    report = fit_estimator(estimator_id, problem, ObservationVector.binary(labels), cfg, rng)
    if report.diverged:
        raise NumericalError(f"{estimator_id.display_name} fit diverged")
    return report.estimate


def grid_search_sigma_x(
    features: np.ndarray,
    labels: np.ndarray,
    estimator_id: EstimatorId,
    grid: Sequence[float],
    rng: np.random.Generator,
    cfg: Optional[SolverConfig] = None,
) -> float:
    """
    Choose sigma_x^2 by validation accuracy on an inner split.

    The validation rows are the last 25% of a shuffle of the training rows; the
    remaining rows are used for fitting at every grid value (with sigma_w^2 = 1).
    Ties go to the smaller sigma_x^2. Grid values whose fit fails are skipped.
    """
    values = sorted(set(float(v) for v in grid))
    if not values:
        raise ValidationError("sigma_x grid must not be empty")
    if values[0] <= 0.0:
        raise ValidationError("sigma_x grid values must be positive")
    if len(values) == 1:
        return values[0]
    cfg = cfg or SolverConfig()

    order = rng.permutation(labels.size)
    n_val = max(1, int(round(INNER_VALIDATION_FRACTION * labels.size)))
    fit_rows, val_rows = order[:-n_val], order[-n_val:]

    best_value, best_acc = None, -1.0
    for k, value in enumerate(values):
        fit_rng = trial_stream(int(rng.integers(2**63)), k)
        try:
            weights = fit_weights(
                features[fit_rows], labels[fit_rows], estimator_id, value, cfg, fit_rng
            )
        except Exception as e:
            logger.debug(f"grid point sigma_x^2={value} disqualified: {e}")
            continue
        acc = evaluate_acc(features[val_rows] @ weights, labels[val_rows])
        if acc > best_acc:
            best_value, best_acc = value, acc
    if best_value is None:
        raise NumericalError(
            f"{estimator_id.display_name}: every grid point failed to fit",
            details={"grid": values},
        )
    return best_value


@dataclass(frozen=True, eq=False)
class FoldFit:
    weights: np.ndarray
    sigma_x_sq: float
    scaler: Optional[StandardScaler]
    scaled_columns: np.ndarray

    def transform(self, features: np.ndarray) -> np.ndarray:
        return apply_scaler(self.scaler, self.scaled_columns, features)


def fit_fold(
    dataset: Dataset,
    train: np.ndarray,
    estimator_id: EstimatorId,
    grid: Sequence[float],
    cfg: SolverConfig,
    rng: np.random.Generator,
) -> FoldFit:
    """Standardize on the training rows, grid-search sigma_x^2 and fit."""
    scaler, columns = fit_scaler(dataset.features[train], dataset.intercept_column)
    features = apply_scaler(scaler, columns, dataset.features[train])
    labels = dataset.labels[train]
    sigma_x_sq = grid_search_sigma_x(features, labels, estimator_id, grid, rng, cfg)
    weights = fit_weights(features, labels, estimator_id, sigma_x_sq, cfg, rng)
    return FoldFit(weights=weights, sigma_x_sq=sigma_x_sq, scaler=scaler, scaled_columns=columns)


@dataclass(frozen=True)
class BenchResult:
    """Mean and standard deviation of ACC/AUC across partitions."""

    dataset: str
    estimator_id: EstimatorId
    available: bool = True
    acc_mean: Optional[float] = None
    acc_std: Optional[float] = None
    auc_mean: Optional[float] = None
    auc_std: Optional[float] = None
    sigma_x_sq_mode: Optional[float] = None
    reason: Optional[str] = None


@dataclass(frozen=True)
class _PartitionScore:
    acc: float
    auc: Optional[float]
    sigma_choices: Tuple[float, ...] = field(default_factory=tuple)


def _score_partition(
    dataset: Dataset,
    folds: List[Split],
    estimator_id: EstimatorId,
    partition: int,
    grid: Sequence[float],
    cfg: SolverConfig,
    seed: int,
) -> _PartitionScore:
    accs, aucs, choices = [], [], []
    for k, (train, test) in enumerate(folds):
        rng = trial_stream(seed, FIT_KEY, ESTIMATOR_ORDER.index(estimator_id), partition, k)
        fold = fit_fold(dataset, train, estimator_id, grid, cfg, rng)
        scores = fold.transform(dataset.features[test]) @ fold.weights
        labels = dataset.labels[test]
        accs.append(evaluate_acc(scores, labels))
        if np.unique(labels).size == 2:
            aucs.append(evaluate_auc(scores, labels))
        choices.append(fold.sigma_x_sq)
    return _PartitionScore(
        acc=float(np.mean(accs)),
        auc=float(np.mean(aucs)) if aucs else None,
        sigma_choices=tuple(choices),
    )


def _spread(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _mode(values: Sequence[float]) -> float:
    counts = Counter(values)
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


def run_benchmark(
    dataset: Dataset,
    estimators: Sequence[EstimatorId],
    plan: CvPlan,
    grid: Sequence[float],
    cfg: Optional[SolverConfig] = None,
    threads: int = 1,
) -> List[BenchResult]:
    """
    Cross-validated ACC/AUC of each estimator on `dataset`.

    Per partition the fold scores are averaged; the result reports the mean and
    sample standard deviation of those partition averages. An estimator that is
    inapplicable (LS with fewer training rows than features) or fails is
    reported as an absent row.
    """
    cfg = cfg or SolverConfig()
    selected = sorted(set(estimators), key=ESTIMATOR_ORDER.index)
    splits = kfold_split(dataset.m, plan)
    min_train = min(train.size for folds in splits for train, _ in folds)

    started = time.perf_counter()
    results = []
    for estimator_id in selected:
        if estimator_id == EstimatorId.LS and min_train < dataset.n:
            results.append(
                BenchResult(
                    dataset=dataset.name,
                    estimator_id=estimator_id,
                    available=False,
                    reason=f"LS estimator does not exist for M < N ({min_train} < {dataset.n})",
                )
            )
            continue
        try:
            scores = Parallel(n_jobs=threads, prefer="threads")(
                delayed(_score_partition)(
                    dataset, folds, estimator_id, p, grid, cfg, plan.seed
                )
                for p, folds in enumerate(splits)
            )
        except Exception as e:
            log_error(e, {"dataset": dataset.name, "estimator": estimator_id.value})
            results.append(
                BenchResult(
                    dataset=dataset.name,
                    estimator_id=estimator_id,
                    available=False,
                    reason=str(e),
                )
            )
            continue

        accs = [s.acc for s in scores]
        aucs = [s.auc for s in scores if s.auc is not None]
        results.append(
            BenchResult(
                dataset=dataset.name,
                estimator_id=estimator_id,
                acc_mean=float(np.mean(accs)),
                acc_std=_spread(accs),
                auc_mean=float(np.mean(aucs)) if aucs else None,
                auc_std=_spread(aucs) if aucs else None,
                sigma_x_sq_mode=_mode([c for s in scores for c in s.sigma_choices]),
            )
        )
        logger.info(
            f"{dataset.name} / {estimator_id.display_name}: ACC {results[-1].acc_mean:.3f}"
        )
    logger.info(f"Benchmark '{dataset.name}' finished in {time.perf_counter() - started:.1f}s")
    return results


@dataclass(frozen=True)
class CatalogEntry:
    """A named dataset with its ingestion spec and reference results."""

    name: str
    file: str
    spec: IngestionSpec
    m: int
    n: int
    reference: Dict[str, Dict[str, float]] = field(default_factory=dict)
    notes: str = ""

    def reference_for(self, estimator_id: EstimatorId, metric: str) -> Optional[float]:
        return self.reference.get(estimator_id.value, {}).get(metric)


def load_catalog(path: Union[str, Path] = "config/datasets.yaml") -> Dict[str, CatalogEntry]:
    """Load the dataset catalog keyed by dataset name."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigurationError(
            f"Dataset catalog not found: {path}", severity=ErrorSeverity.CRITICAL
        )
    except yaml.YAMLError as e:
        raise ConfigurationError(
            f"Invalid YAML in dataset catalog {path}: {e}", severity=ErrorSeverity.CRITICAL
        )

    catalog = {}
    for name, entry in (raw.get("datasets") or {}).items():
        try:
            catalog[name] = CatalogEntry(
                name=name,
                file=str(entry["file"]),
                spec=IngestionSpec.from_dict(entry["ingestion"]),
                m=int(entry["m"]),
                n=int(entry["n"]),
                reference={str(k): dict(v) for k, v in (entry.get("reference") or {}).items()},
                notes=str(entry.get("notes", "")),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(
                f"Malformed catalog entry '{name}': {e}", details={"dataset": name}
            )
    return catalog


def check_catalog_shape(dataset: Dataset, entry: CatalogEntry) -> bool:
    """Warn (but do not fail) when a loaded dataset differs from its catalog shape."""
    if (dataset.m, dataset.n_data_features) == (entry.m, entry.n):
        return True
    logger.warning(
        f"Dataset '{entry.name}' has M={dataset.m}, N={dataset.n_data_features}; "
        f"catalog lists M={entry.m}, N={entry.n}"
    )
    return False
