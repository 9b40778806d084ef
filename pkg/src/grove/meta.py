"""Meta-learners: learners parameterized by other learners.

All of them satisfy the same contract as a plain learner (``train(dataset)
-> model`` plus a ``config`` describing the label), so they can be nested
arbitrarily: a calibrator of an ensemble of a tuned learner is itself a
learner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .dataset import ColumnarDataset
from .errors import TrainingError, UsageError
from .evaluation import EvaluationReport, evaluate_classification, self_evaluate
from .learners import (
    GRADIENT_BOOSTED_TREES,
    RANDOM_FOREST,
    Learner,
    require_binary_classes,
)

LOGIT_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# Random-search hyper-parameter tuner.

@dataclass
class SearchDimension:
    """One tunable hyper-parameter.

    ``domain`` is ("real", lo, hi), ("int", lo, hi) or ("cat", values).
    ``conditional_on`` = (parent key, activating values): the dimension is
    only sampled when the parent drew one of those values, so dependents
    must appear after their parent in the dimension list.
    """

    key: str
    domain: tuple
    conditional_on: tuple | None = None


@dataclass
class SearchSpace:
    dimensions: list[SearchDimension] = field(default_factory=list)

    def sample(self, rng: np.random.Generator) -> dict:
        point = {}
        for dim in self.dimensions:
            if dim.conditional_on is not None:
                parent, activating = dim.conditional_on
                if point.get(parent) not in activating:
                    continue
            kind = dim.domain[0]
            if kind == "real":
                point[dim.key] = float(rng.uniform(dim.domain[1], dim.domain[2]))
            elif kind == "int":
                point[dim.key] = int(rng.integers(dim.domain[1], dim.domain[2] + 1))
            elif kind == "cat":
                values = dim.domain[1]
                point[dim.key] = values[int(rng.integers(len(values)))]
            else:
                raise UsageError(f"unknown search domain kind '{kind}'")
        return point


def default_search_space(learner_key: str) -> SearchSpace:
    """The stock random-search space for a learner."""
    dims = [
        SearchDimension("min_examples", ("int", 2, 10)),
        SearchDimension("categorical_algorithm", ("cat", ["CART", "RANDOM"])),
        SearchDimension("split_axis", ("cat", ["AXIS_ALIGNED", "SPARSE_OBLIQUE"])),
        SearchDimension(
            "sparse_oblique_normalization",
            ("cat", ["NONE", "MIN_MAX", "STANDARD_DEVIATION"]),
            conditional_on=("split_axis", {"SPARSE_OBLIQUE"}),
        ),
        SearchDimension(
            "sparse_oblique_num_projections_exponent",
            ("real", 1.0, 2.0),
            conditional_on=("split_axis", {"SPARSE_OBLIQUE"}),
        ),
    ]
    if learner_key == RANDOM_FOREST:
        dims.append(SearchDimension("max_depth", ("int", 12, 30)))
    elif learner_key == GRADIENT_BOOSTED_TREES:
        dims += [
            SearchDimension("use_hessian_gain", ("cat", [False, True])),
            SearchDimension("shrinkage", ("real", 0.02, 0.15)),
            SearchDimension("num_candidate_attributes_ratio", ("real", 0.2, 1.0)),
            SearchDimension("growing_strategy", ("cat", ["LOCAL", "BEST_FIRST_GLOBAL"])),
            SearchDimension(
                "max_depth", ("int", 3, 8), conditional_on=("growing_strategy", {"LOCAL"})
            ),
            SearchDimension(
                "max_num_nodes",
                ("int", 16, 256),
                conditional_on=("growing_strategy", {"BEST_FIRST_GLOBAL"}),
            ),
        ]
    return SearchSpace(dims)


@dataclass
class TrialRecord:
    hyperparameters: dict
    score: float
    score_metric: str  # LOGLOSS | ACCURACY
    evaluation_source: str


def _trial_score(report: EvaluationReport, metric: str) -> float:
    if metric == "LOGLOSS":
        return report.metric("logloss")
    if metric == "ACCURACY":
        return report.metric("accuracy")
    raise UsageError(f"unknown tuning metric '{metric}'; use LOGLOSS or ACCURACY")


def _is_better(metric: str, candidate: float, incumbent: float) -> bool:
    if metric == "LOGLOSS":
        return candidate < incumbent
    return candidate > incumbent


def tune(
    base_learner: Learner,
    space: SearchSpace | None,
    num_trials: int,
    metric: str,
    dataset: ColumnarDataset,
    seed: int,
):
    """Random-search tuning scored by the base learner's self-evaluation.

    Samples unique points (fewer than ``num_trials`` if the space is
    exhausted), evaluates each trial's self-evaluation, retrains the winner
    on the full training data, and returns (model, trial log). Ties keep the
    first-sampled point.
    """
    if num_trials < 1:
        raise UsageError("num_trials must be >= 1")
    if dataset.num_rows == 0:
        raise TrainingError("the training dataset is empty")
    if space is None:
        space = default_search_space(base_learner.config.learner)
    if not space.dimensions:
        raise UsageError("the search space is empty")

    rng = np.random.default_rng(seed)
    points: list[dict] = []
    seen = set()
    attempts = 0
    while len(points) < num_trials and attempts < 50 * num_trials:
        attempts += 1
        point = space.sample(rng)
        key = tuple(sorted(point.items()))
        if key in seen:
            continue
        seen.add(key)
        points.append(point)

    trials: list[TrialRecord] = []
    best_index = -1
    best_score = None
    for index, point in enumerate(points):
        trial_learner = base_learner.with_hyperparameters(point)
        trial_learner.config.seed = base_learner.config.seed + index
        try:
            model = trial_learner.train(dataset)
            report = self_evaluate(model)
            score = _trial_score(report, metric)
        except TrainingError:
            continue
        if not math.isfinite(score):
            continue
        trials.append(
            TrialRecord(
                hyperparameters=dict(point),
                score=score,
                score_metric=metric,
                evaluation_source=report.evaluation_source,
            )
        )
        if best_score is None or _is_better(metric, score, best_score):
            best_score = score
            best_index = index
    if best_index < 0:
        raise TrainingError(
            "all tuning trials failed. Possible solutions: (1) check the search "
            "space, or (2) validate the training configuration on its own."
        )

    winner = base_learner.with_hyperparameters(points[best_index])
    winner.config.seed = base_learner.config.seed + best_index
    model = winner.train(dataset)
    model.tuning_log = trials
    return model, trials


class TunedLearner:
    """Hyper-parameter tuner wrapped as a learner."""

    def __init__(
        self,
        base_learner: Learner,
        search_space: SearchSpace | None = None,
        num_trials: int = 300,
        metric: str = "LOGLOSS",
        seed: int | None = None,
    ):
        self.base_learner = base_learner
        self.search_space = search_space
        self.num_trials = num_trials
        self.metric = metric
        self.seed = base_learner.config.seed if seed is None else seed

    @property
    def config(self):
        return self.base_learner.config

    def train(self, dataset: ColumnarDataset):
        model, _ = tune(
            self.base_learner, self.search_space, self.num_trials, self.metric,
            dataset, self.seed,
        )
        return model


# ---------------------------------------------------------------------------
# Ensembler.

class EnsembleModel:
    """Unweighted mean of the sub-models' probability vectors or values."""

    def __init__(self, models, task: str, label: str, self_evaluation=None):
        self.models = models
        self.task = task
        self.label = label
        self.self_evaluation = self_evaluation

    def predict(self, dataset: ColumnarDataset) -> np.ndarray:
        total = None
        for model in self.models:
            prediction = model.predict(dataset)
            total = prediction if total is None else total + prediction
        return total / len(self.models)


def ensemble_train(sub_learners: list, dataset: ColumnarDataset) -> EnsembleModel:
    if len(sub_learners) < 1:
        raise UsageError("an ensemble needs at least one sub-learner")
    first = sub_learners[0].config
    for other in sub_learners[1:]:
        if other.config.label != first.label or other.config.task != first.task:
            raise UsageError("all ensemble sub-learners must share the task and label")
    models = [learner.train(dataset) for learner in sub_learners]
    return EnsembleModel(models, task=first.task, label=first.label)


class EnsembleLearner:
    def __init__(self, sub_learners: list):
        if not sub_learners:
            raise UsageError("an ensemble needs at least one sub-learner")
        self.sub_learners = sub_learners

    @property
    def config(self):
        return self.sub_learners[0].config

    def train(self, dataset: ColumnarDataset) -> EnsembleModel:
        return ensemble_train(self.sub_learners, dataset)


# ---------------------------------------------------------------------------
# Calibrator (binary classification).

class CalibratedModel:
    """Base model followed by a logistic map fitted on held-out scores."""

    def __init__(self, base_model, a: float, b: float, task: str, label: str,
                 self_evaluation=None):
        self.base_model = base_model
        self.a = a
        self.b = b
        self.task = task
        self.label = label
        self.self_evaluation = self_evaluation

    def _calibrate(self, scores: np.ndarray) -> np.ndarray:
        s = np.clip(scores, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
        logits = np.log(s / (1.0 - s))
        p = 1.0 / (1.0 + np.exp(-(self.a * logits + self.b)))
        return np.column_stack([1.0 - p, p])

    def predict(self, dataset: ColumnarDataset) -> np.ndarray:
        return self._calibrate(self.base_model.predict(dataset)[:, 1])


def _fit_logistic_map(x: np.ndarray, y: np.ndarray, max_iterations: int = 100,
                      tolerance: float = 1e-8) -> tuple[float, float]:
    """Maximum-likelihood fit of sigmoid(a*x + b) by Newton iterations."""
    a, b = 0.0, 0.0
    for _ in range(max_iterations):
        eta = a * x + b
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1.0 - p) + 1e-12
        g_a = float(np.sum((p - y) * x))
        g_b = float(np.sum(p - y))
        h_aa = float(np.sum(w * x * x)) + 1e-10
        h_ab = float(np.sum(w * x))
        h_bb = float(np.sum(w)) + 1e-10
        det = h_aa * h_bb - h_ab * h_ab
        if det <= 0:
            break
        da = (h_bb * g_a - h_ab * g_b) / det
        db = (h_aa * g_b - h_ab * g_a) / det
        a -= da
        b -= db
        if max(abs(da), abs(db)) < tolerance:
            break
    return a, b


def calibrate_train(base_learner, dataset: ColumnarDataset,
                    holdout_ratio: float = 0.1) -> CalibratedModel:
    """Trains the base learner on (1 - holdout_ratio) of the data and fits a
    one-dimensional logistic map from raw positive-class scores (in log-odds)
    to probabilities on the holdout."""
    config = base_learner.config
    if config.task != "CLASSIFICATION":
        raise TrainingError(
            "calibration only supports classification. Possible solutions: (1) "
            "use task=CLASSIFICATION, or (2) drop the calibrator."
        )
    require_binary_classes(config, dataset.spec, "Calibration (a binary-only meta-learner)")
    if not 0.0 < holdout_ratio < 1.0:
        raise UsageError("holdout_ratio must be in (0, 1)")

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(dataset.num_rows)
    n_holdout = max(1, int(round(holdout_ratio * dataset.num_rows)))
    holdout_rows = np.sort(perm[:n_holdout])
    train_rows = np.sort(perm[n_holdout:])
    if len(train_rows) == 0:
        raise TrainingError("the calibration holdout leaves no training examples")

    label_spec = dataset.spec.column(config.label)
    label_codes = dataset.column_values(config.label).astype(np.int64)
    holdout_labels = label_codes[holdout_rows]
    if len(np.unique(holdout_labels)) < 2:
        raise TrainingError(
            "the calibration holdout contains a single label class, the logistic "
            "map cannot be fitted. Possible solutions: (1) increase "
            "holdout_ratio, (2) use more data, or (3) change the seed."
        )

    base_model = base_learner.train(dataset.take(train_rows))
    holdout = dataset.take(holdout_rows)
    scores = base_model.predict(holdout)[:, 1]
    s = np.clip(scores, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    x = np.log(s / (1.0 - s))
    y = (holdout_labels == 2).astype(np.float64)
    a, b = _fit_logistic_map(x, y)

    model = CalibratedModel(base_model, a, b, task=config.task, label=config.label)
    model.self_evaluation = evaluate_classification(
        model._calibrate(scores), holdout_labels, label_spec,
        evaluation_source="VALIDATION_SPLIT", compute_cis=False,
    )
    return model


class CalibratedLearner:
    def __init__(self, base_learner, holdout_ratio: float = 0.1):
        self.base_learner = base_learner
        self.holdout_ratio = holdout_ratio

    @property
    def config(self):
        return self.base_learner.config

    def train(self, dataset: ColumnarDataset) -> CalibratedModel:
        return calibrate_train(self.base_learner, dataset, self.holdout_ratio)


# ---------------------------------------------------------------------------
# Feature selector.

def select_features(base_learner: Learner, dataset: ColumnarDataset,
                    metric: str = "ACCURACY"):
    """Backward elimination driven by node-count importance.

    Repeatedly drops the feature with the lowest NUM_NODES importance, keeps
    the feature set whose self-evaluation is best, and retrains on it.
    Returns (model, selected feature names).
    """
    config = base_learner.config
    spec = dataset.spec
    if config.features is not None:
        features = list(config.features)
    else:
        features = [c.name for c in spec.columns if c.name != config.label]
    if not features:
        raise TrainingError("feature selection needs at least one input feature")

    stages: list[tuple[float, list[str]]] = []
    current = list(features)
    while current:
        learner = Learner(
            dc_replace(config, features=list(current))
        )
        model = learner.train(dataset)
        report = self_evaluate(model)
        stages.append((_trial_score(report, metric), list(current)))
        if len(current) == 1:
            break
        importance = dict(model.variable_importances("NUM_NODES"))
        # Drop the least used feature; ties drop the later column.
        scored = sorted(
            current,
            key=lambda name: (importance.get(name, 0.0), -spec.column_index(name)),
        )
        current.remove(scored[0])

    best_score, best_features = stages[0]
    for score, feature_set in stages[1:]:
        if _is_better(metric, score, best_score):
            best_score = score
            best_features = feature_set
    winner = Learner(
        dc_replace(config, features=list(best_features))
    )
    return winner.train(dataset), best_features


class FeatureSelectorLearner:
    def __init__(self, base_learner: Learner, metric: str = "ACCURACY"):
        self.base_learner = base_learner
        self.metric = metric

    @property
    def config(self):
        return self.base_learner.config

    def train(self, dataset: ColumnarDataset):
        model, _ = select_features(self.base_learner, dataset, self.metric)
        return model
