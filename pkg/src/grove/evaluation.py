"""Metrics, confidence intervals, evaluation reports, cross-validation,
and paired model comparison.

Classification reports follow the standard layout: accuracy/logloss with
their majority-class baselines, a confusion table with an out-of-dictionary
row/column, and per-class one-vs-rest AUC, PR-AUC and AP. Confidence-interval
methods are tagged W (Wilson), H (Hanley-McNeil), L (logit-normal) and
B (bootstrap percentile).
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as scipy_stats

from .dataspec import ColumnSpec, DataSpec, OOD_TOKEN
from .dataset import ColumnarDataset, FoldAssignment
from .errors import DataError, UsageError

LOGLOSS_CLAMP = 1e-15
DEFAULT_BOOTSTRAP_SAMPLES = 2000


@dataclass
class ConfidenceInterval:
    method: str  # W | H | L | B
    lower: float
    upper: float


@dataclass
class PerClassMetrics:
    class_name: str
    auc: float
    pr_auc: float
    ap: float
    cis: dict[str, list[ConfidenceInterval]] = field(default_factory=dict)


@dataclass
class EvaluationReport:
    num_predictions: int
    task: str
    label: str
    evaluation_source: str = "TEST"
    accuracy: float | None = None
    logloss: float | None = None
    error_rate: float | None = None
    default_accuracy: float | None = None
    default_logloss: float | None = None
    default_error_rate: float | None = None
    confusion: np.ndarray | None = None  # (vocab, vocab) counts, row = truth
    class_names: list[str] | None = None  # aligned with confusion, index 0 = OOD
    per_class: list[PerClassMetrics] = field(default_factory=list)
    ci: dict[str, ConfidenceInterval] = field(default_factory=dict)
    rmse: float | None = None
    mae: float | None = None
    num_skipped: int = 0

    def metric(self, name: str) -> float:
        value = getattr(self, name, None)
        if value is None:
            raise UsageError(f"metric '{name}' is not part of this report")
        return float(value)


@dataclass
class ComparisonResult:
    metrics_a: np.ndarray
    metrics_b: np.ndarray
    mean_difference: float
    t_statistic: float
    p_value: float
    test_name: str = "two-sided paired t-test"


# ---------------------------------------------------------------------------
# Core classification metrics.

def roc_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """One-vs-rest ROC-AUC: trapezoidal over all thresholds with ties
    averaged, computed as the Mann-Whitney rank statistic."""
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = scipy_stats.rankdata(scores)
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pr_curve(scores: np.ndarray, positives: np.ndarray):
    """Precision/recall at each distinct threshold, highest threshold first."""
    order = np.argsort(-scores, kind="stable")
    sorted_pos = positives[order].astype(np.float64)
    tp = np.cumsum(sorted_pos)
    n_pos = tp[-1]
    # Keep only the last index of each tied-score run.
    boundary = np.append(np.diff(scores[order]) != 0, True)
    ranks = np.flatnonzero(boundary) + 1.0
    precision = tp[boundary] / ranks
    recall = tp[boundary] / n_pos if n_pos > 0 else np.zeros(boundary.sum())
    return precision, recall


def pr_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the precision-recall curve (trapezoidal between points)."""
    if positives.sum() == 0:
        return 0.0
    precision, recall = _pr_curve(scores, positives)
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[1.0], precision])
    return float(np.trapezoid(precision, recall))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Precision-weighted recall increments (step interpolation)."""
    if positives.sum() == 0:
        return 0.0
    precision, recall = _pr_curve(scores, positives)
    increments = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(increments * precision))


def log_loss(probabilities_of_truth: np.ndarray) -> float:
    clamped = np.clip(probabilities_of_truth, LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP)
    return float(-np.mean(np.log(clamped)))


# ---------------------------------------------------------------------------
# Confidence intervals.

CI_METHODS = ("WILSON", "HANLEY_MCNEIL", "LOGIT", "BOOTSTRAP")
_METHOD_TAGS = {"WILSON": "W", "HANLEY_MCNEIL": "H", "LOGIT": "L", "BOOTSTRAP": "B"}


def wilson_interval(p_hat: float, n: int, level: float = 0.95) -> tuple[float, float]:
    z = float(scipy_stats.norm.ppf((1.0 + level) / 2.0))
    denom = 1.0 + z * z / n
    center = (p_hat + z * z / (2 * n)) / denom
    half = z * np.sqrt(p_hat * (1 - p_hat) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def hanley_mcneil_interval(
    auc: float, n_pos: int, n_neg: int, level: float = 0.95
) -> tuple[float, float]:
    z = float(scipy_stats.norm.ppf((1.0 + level) / 2.0))
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc * auc / (1.0 + auc)
    variance = (
        auc * (1 - auc) + (n_pos - 1) * (q1 - auc * auc) + (n_neg - 1) * (q2 - auc * auc)
    ) / (n_pos * n_neg)
    half = z * np.sqrt(max(variance, 0.0))
    return max(0.0, auc - half), min(1.0, auc + half)


def logit_interval(m: float, n_effective: int, level: float = 0.95) -> tuple[float, float]:
    """Normal interval in logit space mapped back to [0, 1]."""
    z = float(scipy_stats.norm.ppf((1.0 + level) / 2.0))
    eps = 1e-9
    m = min(max(m, eps), 1.0 - eps)
    se = np.sqrt(m * (1 - m) / n_effective)
    logit = np.log(m / (1 - m))
    half = z * se / (m * (1 - m))
    lo, hi = logit - half, logit + half
    return float(1 / (1 + np.exp(-lo))), float(1 / (1 + np.exp(-hi)))


def bootstrap_interval(
    statistic,
    n: int,
    num_samples: int = DEFAULT_BOOTSTRAP_SAMPLES,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile interval of ``statistic(resampled_indices)`` over
    example-level resamples with a fixed seed."""
    rng = np.random.default_rng(seed)
    values = np.empty(num_samples)
    for b in range(num_samples):
        values[b] = statistic(rng.integers(0, n, size=n))
    alpha = (1.0 - level) / 2.0
    return float(np.quantile(values, alpha)), float(np.quantile(values, 1.0 - alpha))


def confidence_interval(
    metric_kind: str,
    data,
    method: str,
    level: float = 0.95,
    seed: int = 0,
    num_bootstrap: int = DEFAULT_BOOTSTRAP_SAMPLES,
) -> tuple[float, float]:
    """CI for a metric. ``data`` is a boolean per-example success vector for
    'accuracy', and ``(scores, positives)`` for 'auc' / 'pr_auc' / 'ap'."""
    if method not in CI_METHODS:
        raise UsageError(f"unknown CI method '{method}'. Available methods: {CI_METHODS}")
    if metric_kind == "accuracy":
        correct = np.asarray(data, dtype=bool)
        n = len(correct)
        if n == 0:
            raise UsageError("cannot compute a confidence interval from 0 predictions")
        if method == "WILSON":
            return wilson_interval(float(correct.mean()), n, level)
        if method == "LOGIT":
            return logit_interval(float(correct.mean()), n, level)
        if method == "BOOTSTRAP":
            return bootstrap_interval(
                lambda idx: correct[idx].mean(), n, num_bootstrap, level, seed
            )
        raise UsageError("method HANLEY_MCNEIL only applies to AUC metrics")
    if metric_kind in ("auc", "pr_auc", "ap"):
        scores, positives = data
        scores = np.asarray(scores, dtype=np.float64)
        positives = np.asarray(positives, dtype=bool)
        n = len(scores)
        if n == 0:
            raise UsageError("cannot compute a confidence interval from 0 predictions")
        point = {"auc": roc_auc, "pr_auc": pr_auc, "ap": average_precision}[metric_kind]
        if method == "HANLEY_MCNEIL":
            if metric_kind != "auc":
                raise UsageError("method HANLEY_MCNEIL only applies to AUC metrics")
            return hanley_mcneil_interval(
                point(scores, positives), int(positives.sum()),
                int((~positives).sum()), level,
            )
        if method == "LOGIT":
            return logit_interval(point(scores, positives), int(positives.sum()), level)
        if method == "BOOTSTRAP":
            return bootstrap_interval(
                lambda idx: point(scores[idx], positives[idx]),
                n, num_bootstrap, level, seed,
            )
        raise UsageError(f"method WILSON does not apply to {metric_kind}")
    raise UsageError(f"unknown metric kind '{metric_kind}'")


# ---------------------------------------------------------------------------
# Report construction.

def evaluate_classification(
    probabilities: np.ndarray,
    labels: np.ndarray,
    label_spec: ColumnSpec,
    evaluation_source: str = "TEST",
    compute_cis: bool = True,
    seed: int = 1234,
    num_bootstrap: int = DEFAULT_BOOTSTRAP_SAMPLES,
    num_skipped: int = 0,
) -> EvaluationReport:
    """Builds a classification report from per-example class probabilities.

    ``probabilities`` has one column per real class (dictionary index - 1);
    ``labels`` are dictionary indices (0 = out-of-dictionary).
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if probabilities.shape[0] != n:
        raise UsageError(
            f"{probabilities.shape[0]} probability rows for {n} labels"
        )
    if n == 0:
        raise UsageError("cannot evaluate 0 predictions")
    n_classes = label_spec.vocab_size - 1
    if probabilities.shape[1] != n_classes:
        raise UsageError(
            f"{probabilities.shape[1]} probability columns for {n_classes} classes"
        )
    if labels.max() > n_classes or labels.min() < 0:
        raise UsageError("label codes outside the label dictionary")
    row_sums = probabilities.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise UsageError("probability rows must sum to 1 within 1e-6")

    predicted = np.argmax(probabilities, axis=1) + 1  # tie -> lower class index
    correct = predicted == labels
    accuracy = float(correct.mean())

    p_truth = np.where(
        labels >= 1, probabilities[np.arange(n), np.maximum(labels - 1, 0)], 0.0
    )
    logloss = log_loss(p_truth)

    prior = np.bincount(labels, minlength=n_classes + 1)[1:] / n
    default_accuracy = float(prior.max())
    default_logloss = float(
        -np.sum(prior * np.log(np.clip(prior, LOGLOSS_CLAMP, None)))
    )

    vocab = label_spec.vocab_size
    confusion = np.zeros((vocab, vocab), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)

    report = EvaluationReport(
        num_predictions=n,
        task="CLASSIFICATION",
        label=label_spec.name,
        evaluation_source=evaluation_source,
        accuracy=accuracy,
        logloss=logloss,
        error_rate=1.0 - accuracy,
        default_accuracy=default_accuracy,
        default_logloss=default_logloss,
        default_error_rate=1.0 - default_accuracy,
        confusion=confusion,
        class_names=[t for t, _ in label_spec.dictionary],
        num_skipped=num_skipped,
    )

    if compute_cis:
        lo, hi = confidence_interval("accuracy", correct, "WILSON")
        report.ci["accuracy"] = ConfidenceInterval("W", lo, hi)

    for c in range(n_classes):
        scores = probabilities[:, c]
        positives = labels == c + 1
        metrics = PerClassMetrics(
            class_name=label_spec.dictionary[c + 1][0],
            auc=roc_auc(scores, positives),
            pr_auc=pr_auc(scores, positives),
            ap=average_precision(scores, positives),
        )
        if compute_cis and 0 < positives.sum() < n:
            data = (scores, positives)
            metrics.cis["auc"] = [
                ConfidenceInterval("H", *confidence_interval("auc", data, "HANLEY_MCNEIL")),
                ConfidenceInterval(
                    "B",
                    *confidence_interval(
                        "auc", data, "BOOTSTRAP", seed=seed, num_bootstrap=num_bootstrap
                    ),
                ),
            ]
            metrics.cis["pr_auc"] = [
                ConfidenceInterval("L", *confidence_interval("pr_auc", data, "LOGIT")),
                ConfidenceInterval(
                    "B",
                    *confidence_interval(
                        "pr_auc", data, "BOOTSTRAP", seed=seed + 1, num_bootstrap=num_bootstrap
                    ),
                ),
            ]
            metrics.cis["ap"] = [
                ConfidenceInterval(
                    "B",
                    *confidence_interval(
                        "ap", data, "BOOTSTRAP", seed=seed + 2, num_bootstrap=num_bootstrap
                    ),
                ),
            ]
        report.per_class.append(metrics)
    return report


def evaluate_regression(
    predictions: np.ndarray,
    targets: np.ndarray,
    label_name: str,
    evaluation_source: str = "TEST",
) -> EvaluationReport:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(predictions) != len(targets):
        raise UsageError(f"{len(predictions)} predictions for {len(targets)} targets")
    if len(targets) == 0:
        raise UsageError("cannot evaluate 0 predictions")
    err = predictions - targets
    return EvaluationReport(
        num_predictions=len(targets),
        task="REGRESSION",
        label=label_name,
        evaluation_source=evaluation_source,
        rmse=float(np.sqrt(np.mean(err * err))),
        mae=float(np.mean(np.abs(err))),
    )


# ---------------------------------------------------------------------------
# Report rendering (the `evaluate` CLI body).

def _g(x: float) -> str:
    return f"{x:.6g}"


def _ci_text(ci: ConfidenceInterval, level: int = 95) -> str:
    return f"CI{level}[{ci.method}][{_g(ci.lower)} {_g(ci.upper)}]"


def format_evaluation(report: EvaluationReport) -> str:
    lines = [
        "Evaluation:",
        f"Number of predictions (without weights): {report.num_predictions}",
        f"Number of predictions (with weights): {report.num_predictions}",
        f"Task: {report.task}",
        f"Label: {report.label}",
        "",
    ]
    if report.task == "REGRESSION":
        lines += [f"RMSE: {_g(report.rmse)}", f"MAE: {_g(report.mae)}", ""]
        return "\n".join(lines)

    accuracy_line = f"Accuracy: {_g(report.accuracy)}"
    if "accuracy" in report.ci:
        accuracy_line += f"  {_ci_text(report.ci['accuracy'])}"
    lines += [
        accuracy_line,
        f"LogLoss: {_g(report.logloss)}",
        f"ErrorRate: {_g(report.error_rate)}",
        "",
        f"Default Accuracy: {_g(report.default_accuracy)}",
        f"Default LogLoss: {_g(report.default_logloss)}",
        f"Default ErrorRate: {_g(report.default_error_rate)}",
        "",
        "Confusion Table:",
        "truth\\prediction",
    ]
    names = report.class_names
    width = max(len(name) for name in names) + 2
    header = " " * width + "".join(f"{name:>{width}}" for name in names)
    lines.append(header.rstrip())
    for i, name in enumerate(names):
        row = f"{name:>{width}}" + "".join(
            f"{int(v):>{width}}" for v in report.confusion[i]
        )
        lines.append(row)
    lines.append(f"Total: {report.num_predictions}")
    lines.append("")

    if report.per_class:
        lines.append("One vs other classes:")
        for metrics in report.per_class:
            lines.append(f'  "{metrics.class_name}" vs. the others')
            for key, label in (("auc", "auc"), ("pr_auc", "p/r-auc"), ("ap", "ap")):
                prefix = f"    {label}: {_g(getattr(metrics, key))} "
                cis = metrics.cis.get(key, [])
                if not cis:
                    lines.append(prefix.rstrip())
                    continue
                lines.append(prefix + _ci_text(cis[0]))
                for extra in cis[1:]:
                    lines.append(" " * len(prefix) + _ci_text(extra))
            lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


# ---------------------------------------------------------------------------
# Machine-readable serialization (stored alongside the model).

def report_to_text(report: EvaluationReport) -> str:
    lines = [
        f"evaluation_source: {report.evaluation_source}",
        f"task: {report.task}",
        f"label: {json.dumps(report.label)}",
        f"num_predictions: {report.num_predictions}",
        f"num_skipped: {report.num_skipped}",
    ]
    for key in ("accuracy", "logloss", "error_rate", "default_accuracy",
                "default_logloss", "default_error_rate", "rmse", "mae"):
        value = getattr(report, key)
        if value is not None:
            lines.append(f"{key}: {value!r}")
    for metric, ci in sorted(report.ci.items()):
        lines.append(
            f"ci {{ metric: {json.dumps(metric)} method: {json.dumps(ci.method)} "
            f"lower: {ci.lower!r} upper: {ci.upper!r} }}"
        )
    if report.class_names is not None:
        lines.append("class_names: " + json.dumps(report.class_names))
    if report.confusion is not None:
        for row in report.confusion:
            lines.append("confusion_row: " + " ".join(str(int(v)) for v in row))
    for metrics in report.per_class:
        lines.append(
            f"class {{ name: {json.dumps(metrics.class_name)} auc: {metrics.auc!r} "
            f"pr_auc: {metrics.pr_auc!r} ap: {metrics.ap!r} }}"
        )
    return "\n".join(lines) + "\n"


_CLASS_RE = re.compile(
    r'^class \{ name: (".*") auc: (\S+) pr_auc: (\S+) ap: (\S+) \}$'
)
_CI_RE = re.compile(
    r'^ci \{ metric: (".*") method: (".*") lower: (\S+) upper: (\S+) \}$'
)


def report_from_text(text: str) -> EvaluationReport:
    report = EvaluationReport(num_predictions=0, task="CLASSIFICATION", label="")
    confusion_rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        m = _CLASS_RE.match(line)
        if m:
            report.per_class.append(
                PerClassMetrics(
                    class_name=json.loads(m.group(1)),
                    auc=float(m.group(2)),
                    pr_auc=float(m.group(3)),
                    ap=float(m.group(4)),
                )
            )
            continue
        m = _CI_RE.match(line)
        if m:
            report.ci[json.loads(m.group(1))] = ConfidenceInterval(
                json.loads(m.group(2)), float(m.group(3)), float(m.group(4))
            )
            continue
        key, sep, value = line.partition(": ")
        if not sep:
            raise DataError(f"malformed evaluation line: '{line}'")
        if key == "evaluation_source":
            report.evaluation_source = value
        elif key == "task":
            report.task = value
        elif key == "label":
            report.label = json.loads(value)
        elif key in ("num_predictions", "num_skipped"):
            setattr(report, key, int(value))
        elif key == "class_names":
            report.class_names = json.loads(value)
        elif key == "confusion_row":
            confusion_rows.append([int(v) for v in value.split()])
        else:
            setattr(report, key, float(value))
    if confusion_rows:
        report.confusion = np.asarray(confusion_rows, dtype=np.int64)
    return report


# ---------------------------------------------------------------------------
# Self-evaluation, cross-validation, and model comparison.

def self_evaluate(model) -> EvaluationReport:
    """The model's training-time self-evaluation (OOB / validation split)."""
    report = getattr(model, "self_evaluation", None)
    if report is None:
        raise UsageError(
            "this model has no self-evaluation (no out-of-bag examples are "
            "available when bootstrapping is disabled). Possible solutions: "
            "(1) enable bootstrapping, or (2) use cross-validation."
        )
    return report


@dataclass
class CrossValidationResult:
    reports: list[EvaluationReport]

    def metric(self, name: str) -> np.ndarray:
        return np.array([r.metric(name) for r in self.reports])

    def mean(self, name: str) -> float:
        return float(self.metric(name).mean())

    def std(self, name: str) -> float:
        return float(self.metric(name).std())


def cross_validate(
    learner,
    dataset: ColumnarDataset,
    folds: FoldAssignment,
    compute_cis: bool = False,
) -> CrossValidationResult:
    """Trains k models on k-1 folds each and evaluates on the held-out fold."""
    label_spec = dataset.spec.column(learner.config.label)
    label_values = dataset.column_values(learner.config.label)
    reports = []
    for fold in range(folds.k):
        train_rows = folds.rows_not_in_fold(fold)
        test_rows = folds.rows_in_fold(fold)
        if label_spec.dictionary is not None:
            train_classes = set(np.unique(label_values[train_rows]).tolist())
            expected = set(range(1, label_spec.vocab_size))
            absent = sorted(expected - train_classes)
            if absent:
                names = [label_spec.dictionary[c][0] for c in absent]
                warnings.warn(
                    f"fold {fold}: classes {names} absent from the training portion",
                    stacklevel=2,
                )
        model = learner.train(dataset.take(train_rows))
        test = dataset.take(test_rows)
        predictions = model.predict(test)
        if label_spec.dictionary is not None:
            report = evaluate_classification(
                predictions,
                label_values[test_rows],
                label_spec,
                evaluation_source="CROSS_VALIDATION",
                compute_cis=compute_cis,
            )
        else:
            report = evaluate_regression(
                predictions, label_values[test_rows], label_spec.name,
                evaluation_source="CROSS_VALIDATION",
            )
        reports.append(report)
    return CrossValidationResult(reports)


def compare_models(
    reports_a: list[EvaluationReport] | np.ndarray,
    reports_b: list[EvaluationReport] | np.ndarray,
    metric: str = "accuracy",
) -> ComparisonResult:
    """Two-sided paired t-test on per-fold metric differences."""
    a = np.asarray(
        [r.metric(metric) for r in reports_a]
        if reports_a and isinstance(reports_a[0], EvaluationReport)
        else reports_a,
        dtype=np.float64,
    )
    b = np.asarray(
        [r.metric(metric) for r in reports_b]
        if reports_b and isinstance(reports_b[0], EvaluationReport)
        else reports_b,
        dtype=np.float64,
    )
    if len(a) != len(b):
        raise UsageError(f"unpaired fold counts: {len(a)} vs {len(b)}")
    k = len(a)
    if k < 2:
        raise UsageError("paired comparison needs at least 2 folds")
    diff = a - b
    mean_diff = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        t = 0.0 if mean_diff == 0.0 else float(np.inf) * np.sign(mean_diff)
        p = 1.0 if mean_diff == 0.0 else 0.0
    else:
        t = mean_diff / (sd / np.sqrt(k))
        p = float(2.0 * scipy_stats.t.sf(abs(t), df=k - 1))
    return ComparisonResult(
        metrics_a=a, metrics_b=b, mean_difference=mean_diff,
        t_statistic=float(t), p_value=p,
    )
