"""Learners: training configuration, config validation with actionable
errors, tree growing (depth-first and best-first), and the Random Forest /
Gradient Boosted Trees / CART training loops.

Training is deterministic: the same dataset, configuration, and seed always
produce the same model, for any fixed number of worker processes (random
forests are trained in fixed-size tree chunks whose results are merged in
chunk order).
"""

from __future__ import annotations

import heapq
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace

import multiprocessing

import numpy as np

from . import splitters as sp
from .dataspec import ColumnSemantic, DataSpec
from .dataset import BOOLEAN_MISSING, ColumnarDataset
from .errors import TrainingError, UsageError
from .evaluation import (
    EvaluationReport,
    evaluate_classification,
    evaluate_regression,
)
from .model import (
    CART,
    GRADIENT_BOOSTED_TREES,
    RANDOM_FOREST,
    ForestModel,
)
from .trees import (
    ClassDistribution,
    DecisionTree,
    GbtLogit,
    InternalNode,
    Leaf,
    RegressionValue,
)

TASKS = ("CLASSIFICATION", "REGRESSION")

_COMMON_DEFAULTS = {
    "min_examples": 5,
    "categorical_algorithm": "CART",
    "split_axis": "AXIS_ALIGNED",
    "sparse_oblique_normalization": "NONE",
    "sparse_oblique_num_projections_exponent": 2.0,
    "numerical_split": "EXACT",
    "histogram_bins": 255,
    "missing_policy": "GLOBAL_IMPUTATION",
    "growing_strategy": "LOCAL",
    # Capacity-equivalent to depth-6 local growth (32 leaves).
    "max_num_nodes": 63,
    "num_candidate_attributes_ratio": -1.0,
}

RANDOM_FOREST_DEFAULTS = {
    **_COMMON_DEFAULTS,
    "num_trees": 500,
    "max_depth": 16,
    "num_candidate_attributes": 0,  # Breiman rule of thumb
    "bootstrap": True,
}

GRADIENT_BOOSTED_TREES_DEFAULTS = {
    **_COMMON_DEFAULTS,
    "num_trees": 500,
    "max_depth": 6,
    "num_candidate_attributes": -1,  # all
    "shrinkage": 0.1,
    "early_stopping": "LOSS_INCREASE",
    "validation_ratio": 0.1,
    "l1_regularization": 0.0,
    "l2_regularization": 0.0,
    "use_hessian_gain": False,
    "sampling_method": "NONE",
}

CART_DEFAULTS = {
    **_COMMON_DEFAULTS,
    "max_depth": 16,
    "num_candidate_attributes": -1,
    "validation_ratio": 0.1,
}

LEARNER_DEFAULTS = {
    RANDOM_FOREST: RANDOM_FOREST_DEFAULTS,
    GRADIENT_BOOSTED_TREES: GRADIENT_BOOSTED_TREES_DEFAULTS,
    CART: CART_DEFAULTS,
}

_ENUM_VALUES = {
    "categorical_algorithm": ("CART", "RANDOM", "ONE_HOT"),
    "split_axis": ("AXIS_ALIGNED", "SPARSE_OBLIQUE"),
    "sparse_oblique_normalization": ("NONE", "MIN_MAX", "STANDARD_DEVIATION"),
    "numerical_split": ("EXACT", "HISTOGRAM"),
    "missing_policy": ("GLOBAL_IMPUTATION", "LOCAL_IMPUTATION"),
    "growing_strategy": ("LOCAL", "BEST_FIRST_GLOBAL"),
    "early_stopping": ("LOSS_INCREASE", "NONE"),
    "sampling_method": ("NONE",),
}

# Versioned hyper-parameter overlays. Values never change once released.
HYPERPARAMETER_TEMPLATES = {
    "benchmark_rank1": {
        1: {
            GRADIENT_BOOSTED_TREES: {
                "growing_strategy": "BEST_FIRST_GLOBAL",
                "categorical_algorithm": "RANDOM",
                "split_axis": "SPARSE_OBLIQUE",
                "sparse_oblique_normalization": "MIN_MAX",
                "sparse_oblique_num_projections_exponent": 1.0,
            },
            RANDOM_FOREST: {
                "categorical_algorithm": "RANDOM",
                "split_axis": "SPARSE_OBLIQUE",
                "sparse_oblique_normalization": "MIN_MAX",
                "sparse_oblique_num_projections_exponent": 1.0,
            },
        }
    }
}

# Trees per worker batch; fixed so that results do not depend on the number
# of worker processes.
_RF_CHUNK_TREES = 25

DEFAULT_SEED = 123456


def _coerce_hyperparameter(key: str, value, default):
    if key in _ENUM_VALUES:
        value = str(value)
        if value not in _ENUM_VALUES[key]:
            raise UsageError(
                f"invalid value '{value}' for hyper-parameter '{key}'. "
                f"Valid values: {list(_ENUM_VALUES[key])}"
            )
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "false"):
            return str(value).lower() == "true"
        raise UsageError(f"hyper-parameter '{key}' expects true/false, got '{value}'")
    if isinstance(default, int):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise UsageError(f"hyper-parameter '{key}' expects an integer, got '{value}'") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise UsageError(f"hyper-parameter '{key}' expects a number, got '{value}'") from None
    return str(value)


@dataclass
class TrainingConfig:
    task: str
    label: str
    learner: str
    features: list[str] | None = None
    hyperparameters: dict = field(default_factory=dict)
    seed: int = DEFAULT_SEED
    error_overrides: set = field(default_factory=set)
    num_threads: int | None = None
    template: str | None = None  # hyper-parameter template to apply
    tuner: dict | None = None  # tuner settings from the config file

    def __post_init__(self):
        if self.task not in TASKS:
            raise UsageError(f"unknown task '{self.task}'. Valid tasks: {list(TASKS)}")
        if self.learner not in LEARNER_DEFAULTS:
            raise UsageError(
                f"unknown learner '{self.learner}'. "
                f"Valid learners: {sorted(LEARNER_DEFAULTS)}"
            )
        defaults = LEARNER_DEFAULTS[self.learner]
        unknown = sorted(set(self.hyperparameters) - set(defaults))
        if unknown:
            raise UsageError(
                f"unknown hyper-parameter(s) {unknown} for learner '{self.learner}'. "
                f"Valid keys: {sorted(defaults)}"
            )
        self.hyperparameters = {
            key: _coerce_hyperparameter(key, value, defaults[key])
            for key, value in self.hyperparameters.items()
        }
        if self.features is not None and self.label in self.features:
            raise UsageError(
                f"the label column '{self.label}' cannot also be an input feature"
            )

    def effective_hyperparameters(self) -> dict:
        return {**LEARNER_DEFAULTS[self.learner], **self.hyperparameters}

    def replace_hyperparameters(self, overrides: dict) -> "TrainingConfig":
        return dc_replace(
            self, hyperparameters={**self.hyperparameters, **overrides}
        )


def apply_hyperparameter_template(
    name: str, learner: str, base: dict | None = None
) -> tuple[dict, str]:
    """Applies a versioned hyper-parameter overlay on top of ``base``.

    An unversioned name resolves to the latest version; the resolved
    versioned name is returned alongside the merged values.
    """
    base = dict(base or {})
    template_name, _, version_text = name.partition("@")
    known = sorted(
        f"{t}@v{v}" for t, versions in HYPERPARAMETER_TEMPLATES.items() for v in versions
    )
    if template_name not in HYPERPARAMETER_TEMPLATES:
        raise UsageError(
            f"unknown hyper-parameter template '{name}'. Known templates: {known}"
        )
    versions = HYPERPARAMETER_TEMPLATES[template_name]
    if version_text:
        if not version_text.startswith("v") or not version_text[1:].isdigit():
            raise UsageError(f"malformed template version in '{name}'; expected e.g. '@v1'")
        version = int(version_text[1:])
        if version not in versions:
            raise UsageError(
                f"unknown hyper-parameter template '{name}'. Known templates: {known}"
            )
    else:
        version = max(versions)
    overlay = versions[version].get(learner)
    if overlay is None:
        raise UsageError(
            f"template '{template_name}@v{version}' does not define values for "
            f"learner '{learner}'"
        )
    base.update(overlay)
    return base, f"{template_name}@v{version}"


# ---------------------------------------------------------------------------
# Training-config validation.

def _looks_numeric_fraction(column) -> float:
    from .dataspec import _parse_finite  # shared token parsing

    if not column.dictionary or column.count_values == 0:
        return 0.0
    numeric = sum(
        freq for token, freq in column.dictionary[1:] if _parse_finite(token) is not None
    )
    return numeric / column.count_values


def validate_training_config(config: TrainingConfig, spec: DataSpec) -> None:
    """Checks label existence/semantics, class sanity, feature availability.

    Raises errors that state the violated constraint, the observed facts,
    and concrete solutions; some checks can be disabled through
    ``config.error_overrides``.
    """
    names = set(spec.column_names())
    if config.label not in names:
        raise TrainingError(
            f"the label column '{config.label}' does not exist in the dataset. "
            f"Available columns: {sorted(names)}. Possible solutions: (1) fix the "
            "label name in the training configuration, or (2) add the column to "
            "the dataset."
        )
    label = spec.column(config.label)

    if config.task == "CLASSIFICATION":
        if label.semantic is not ColumnSemantic.CATEGORICAL:
            raise TrainingError(
                f"classification training (task=CLASSIFICATION) requires a "
                f"CATEGORICAL label, however, the label column '{config.label}' is "
                f"{label.semantic.value}. Possible solutions: (1) use task=REGRESSION "
                "for a numerical label, or (2) override the column semantic to "
                "CATEGORICAL.",
                code="label_semantic",
            )
        n_classes = label.vocab_size - 1
        if n_classes < 1:
            raise TrainingError(
                f"classification training requires a label with at least 1 class, "
                f"however, none were found in the label column '{config.label}'. "
                "Possible solutions: (1) use a training dataset with label values, "
                "or (2) lower min_vocab_frequency when building the dataspec.",
                code="not_enough_classes",
            )
        if label.count_missing > 0:
            raise TrainingError(
                f"the label column '{config.label}' has {label.count_missing} missing "
                "value(s); labels must be fully observed. Possible solutions: (1) "
                "drop the unlabeled examples, or (2) fix the dataset.",
                code="missing_labels",
            )
        if label.count_ood > 0:
            raise TrainingError(
                f"the label column '{config.label}' has {label.count_ood} "
                "out-of-dictionary value(s): some classes were pruned from the "
                "dictionary. Possible solutions: (1) rebuild the dataspec with "
                "min_vocab_frequency=1, or (2) remove the rare classes.",
                code="ood_labels",
            )
        numeric_fraction = _looks_numeric_fraction(label)
        if (
            n_classes > 50
            and numeric_fraction >= 0.99
            and "classification_look_like_regression" not in config.error_overrides
        ):
            raise TrainingError(
                f"the classification label column '{config.label}' looks like a "
                f"regression column ({n_classes} unique values on "
                f"{label.count_values} examples, {numeric_fraction:.0%} of the "
                "values look like numbers). Possible solutions: (1) configure the "
                "training as a regression with task=REGRESSION, or (2) disable the "
                "error with disable_error.classification_look_like_regression=true.",
                code="classification_look_like_regression",
            )
    else:
        if label.semantic is not ColumnSemantic.NUMERICAL:
            raise TrainingError(
                f"regression training (task=REGRESSION) requires a NUMERICAL label, "
                f"however, the label column '{config.label}' is {label.semantic.value}. "
                "Possible solutions: (1) use task=CLASSIFICATION, or (2) override "
                "the column semantic to NUMERICAL.",
                code="label_semantic",
            )
        if label.count_missing > 0:
            raise TrainingError(
                f"the label column '{config.label}' has {label.count_missing} missing "
                "value(s); labels must be fully observed. Possible solutions: (1) "
                "drop the unlabeled examples, or (2) fix the dataset.",
                code="missing_labels",
            )

    if config.features is not None:
        missing = sorted(set(config.features) - names)
        if missing:
            raise TrainingError(
                f"the feature column(s) {missing} do not exist in the dataset. "
                f"Available columns: {sorted(names)}. Possible solutions: (1) fix "
                "the feature list, or (2) omit it to use all columns.",
                code="unknown_features",
            )
        if not config.features:
            raise TrainingError(
                "the feature list is empty; training needs at least one input "
                "feature. Possible solutions: (1) list at least one feature, or "
                "(2) omit the list to use all columns.",
                code="no_features",
            )


def require_binary_classes(config: TrainingConfig, spec: DataSpec, context: str) -> None:
    """Checks for exactly two label classes, with the standard error shape."""
    label = spec.column(config.label)
    if label.dictionary is None:
        raise TrainingError(
            f"{context} requires a CATEGORICAL label with 2 classes, however, the "
            f"label column '{config.label}' is {label.semantic.value}. Possible "
            "solutions: (1) use a categorical binary label, or (2) use a learner "
            "without this restriction e.g. learner='RANDOM_FOREST'.",
            code="binary_label_required",
        )
    classes = [t for t, _ in label.dictionary[1:]]
    if len(classes) != 2:
        raise TrainingError(
            f"{context} requires a training dataset with a label having 2 classes, "
            f"however, {len(classes)} classe(s) were found in the label column "
            f"'{config.label}'. Those {len(classes)} classe(s) are "
            f"[{', '.join(classes)}]. Possible solutions: (1) use a training "
            "dataset with two classes, or (2) use a learning algorithm that "
            "supports single-class or multi-class classification e.g. "
            "learner='RANDOM_FOREST'.",
            code="binary_label_required",
        )


# ---------------------------------------------------------------------------
# Training context: dense feature matrix plus per-column metadata.

@dataclass
class GrowContext:
    X: np.ndarray  # (n, columns) float64, Fortran order
    spec: DataSpec
    feature_indices: list[int]
    vocab_sizes: np.ndarray  # dictionary size per column (0 if not categorical)
    global_imputation: np.ndarray  # per column, in encoded units
    breiman_task: str  # CLASSIFICATION or REGRESSION


def _dense_matrix(dataset: ColumnarDataset) -> np.ndarray:
    cached = getattr(dataset, "_dense", None)
    if cached is not None:
        return cached
    n = dataset.num_rows
    X = np.empty((n, len(dataset.spec.columns)), dtype=np.float64, order="F")
    for j, (col, values) in enumerate(zip(dataset.spec.columns, dataset.columns)):
        X[:, j] = values
    dataset._dense = X
    return X


def build_grow_context(dataset: ColumnarDataset, config: TrainingConfig) -> GrowContext:
    spec = dataset.spec
    if config.features is None:
        feature_indices = [
            i for i, c in enumerate(spec.columns) if c.name != config.label
        ]
    else:
        feature_indices = sorted(spec.column_index(name) for name in config.features)
    X = _dense_matrix(dataset)
    vocab_sizes = np.array(
        [c.vocab_size if c.semantic is ColumnSemantic.CATEGORICAL else 0 for c in spec.columns],
        dtype=np.int64,
    )
    global_imputation = np.zeros(len(spec.columns))
    for j, col in enumerate(spec.columns):
        values = X[:, j]
        if col.semantic is ColumnSemantic.NUMERICAL:
            missing = np.isnan(values)
        elif col.semantic is ColumnSemantic.CATEGORICAL:
            missing = values == col.missing_sentinel
        else:
            missing = values == BOOLEAN_MISSING
        global_imputation[j] = sp.global_imputation_value(
            values, missing, categorical=col.semantic is not ColumnSemantic.NUMERICAL
        )
    return GrowContext(
        X=X,
        spec=spec,
        feature_indices=feature_indices,
        vocab_sizes=vocab_sizes,
        global_imputation=global_imputation,
        breiman_task=config.task,
    )


def _splitter_config(hp: dict) -> sp.SplitterConfig:
    return sp.SplitterConfig(
        min_examples=hp["min_examples"],
        num_candidate_attributes=hp["num_candidate_attributes"],
        categorical_algorithm=sp.CategoricalAlgorithm(hp["categorical_algorithm"]),
        split_axis=sp.SplitAxis(hp["split_axis"]),
        sparse_oblique_normalization=sp.ObliqueNormalization(
            hp["sparse_oblique_normalization"]
        ),
        sparse_oblique_num_projections_exponent=hp[
            "sparse_oblique_num_projections_exponent"
        ],
        numerical_split=sp.NumericalSplit(hp["numerical_split"]),
        histogram_bins=hp["histogram_bins"],
        missing_policy=sp.MissingPolicy(hp["missing_policy"]),
        use_hessian_gain=hp.get("use_hessian_gain", False),
        l2=hp.get("l2_regularization", 0.0),
    )


# ---------------------------------------------------------------------------
# Per-node split search.

def _num_candidates(config: sp.SplitterConfig, ratio: float, n_features: int, task: str) -> int:
    if 0.0 < ratio <= 1.0:
        return max(1, math.ceil(ratio * n_features))
    k = config.num_candidate_attributes
    if k == -1:
        return n_features
    if k == 0:  # Breiman rule of thumb
        if task == "CLASSIFICATION":
            return max(1, math.ceil(math.sqrt(n_features)))
        return max(1, math.ceil(n_features / 3))
    return min(k, n_features)


def _slice_labels(labels: sp.Labels, rows: np.ndarray) -> sp.Labels:
    if isinstance(labels, sp.ClassificationLabels):
        return sp.ClassificationLabels(labels.codes[rows], labels.n_classes)
    return sp.NumericLabels(
        labels.values[rows],
        None if labels.hessians is None else labels.hessians[rows],
    )


def _labels_pure(labels: sp.Labels) -> bool:
    if isinstance(labels, sp.ClassificationLabels):
        return bool((labels.codes == labels.codes[0]).all())
    return bool((labels.values == labels.values[0]).all())


def _imputed_numerical(ctx: GrowContext, rows: np.ndarray, attr: int, config) -> tuple[np.ndarray, float]:
    values = ctx.X[rows, attr]
    missing = np.isnan(values)
    imputed = sp.impute_missing(
        values, missing, config.missing_policy, ctx.global_imputation[attr]
    )
    if missing.any():
        values = np.where(missing, imputed, values)
    return values, imputed


def _best_split_for_node(
    ctx: GrowContext,
    node_labels: sp.Labels,
    rows: np.ndarray,
    rng: np.random.Generator,
    config: sp.SplitterConfig,
    candidate_ratio: float,
) -> sp.SplitCandidate | None:
    features = ctx.feature_indices
    count = _num_candidates(config, candidate_ratio, len(features), ctx.breiman_task)
    if count < len(features):
        chosen = rng.permutation(len(features))[:count]
        candidates = sorted(features[i] for i in chosen)
    else:
        candidates = list(features)

    oblique_numericals = []
    best: sp.SplitCandidate | None = None
    for attr in candidates:
        col = ctx.spec.columns[attr]
        if col.semantic is ColumnSemantic.NUMERICAL:
            if config.split_axis is sp.SplitAxis.SPARSE_OBLIQUE:
                # Oblique projections are drawn over these features below, in
                # addition to their individual axis-aligned scans.
                oblique_numericals.append(attr)
            values, imputed = _imputed_numerical(ctx, rows, attr, config)
            if config.numerical_split is sp.NumericalSplit.HISTOGRAM:
                cand = sp.find_numerical_split_histogram(values, node_labels, config, attr)
            else:
                cand = sp.find_numerical_split_exact(values, node_labels, config, attr)
            if cand is not None:
                cand.condition.na_value = bool(imputed >= cand.condition.threshold)
        elif col.semantic is ColumnSemantic.CATEGORICAL:
            codes = ctx.X[rows, attr].astype(np.int64)
            missing = codes == col.missing_sentinel
            imputed = int(
                sp.impute_missing(
                    codes, missing, config.missing_policy,
                    ctx.global_imputation[attr], categorical=True,
                )
            )
            if missing.any():
                codes = np.where(missing, imputed, codes)
            cand = sp.find_categorical_split(
                codes, node_labels, config, col.vocab_size, attr,
                seed=int(rng.integers(2**31)),
            )
            if cand is not None:
                cand.condition.na_value = bool(cand.condition.mask[imputed])
        else:
            values = ctx.X[rows, attr].astype(np.int64)
            missing = values == BOOLEAN_MISSING
            imputed = int(
                sp.impute_missing(
                    values, missing, config.missing_policy,
                    ctx.global_imputation[attr], categorical=True,
                )
            )
            if missing.any():
                values = np.where(missing, imputed, values)
            cand = sp.find_boolean_split(values, node_labels, config, attr)
            if cand is not None:
                cand.condition.na_value = imputed == 1
        if cand is not None and (best is None or cand.score > best.score):
            best = cand

    if oblique_numericals:
        block = ctx.X[np.ix_(rows, oblique_numericals)]
        imputations = np.empty(len(oblique_numericals))
        for j, attr in enumerate(oblique_numericals):
            missing = np.isnan(block[:, j])
            imputations[j] = sp.impute_missing(
                block[:, j], missing, config.missing_policy, ctx.global_imputation[attr]
            )
            if missing.any():
                block[missing, j] = imputations[j]
        cand = sp.find_oblique_split(block, oblique_numericals, node_labels, config, rng)
        if cand is not None:
            cond = cand.condition
            if hasattr(cond, "weights"):
                imputed_by_attr = dict(zip(oblique_numericals, imputations))
                total = sum(
                    w * imputed_by_attr[a] for a, w in zip(cond.attributes, cond.weights)
                )
                cond.na_value = bool(total >= cond.threshold)
            else:  # single numerical feature degenerates to a Higher split
                cond.na_value = bool(
                    imputations[oblique_numericals.index(cond.attribute)] >= cond.threshold
                )
            if best is None or cand.score > best.score:
                best = cand
    return best


# ---------------------------------------------------------------------------
# Tree growing.

def grow_tree(
    ctx: GrowContext,
    labels: sp.Labels,
    rows: np.ndarray,
    rng: np.random.Generator,
    config: sp.SplitterConfig,
    leaf_builder,
    strategy: str = "LOCAL",
    max_depth: int | None = None,
    max_num_nodes: int | None = None,
    candidate_ratio: float = -1.0,
) -> DecisionTree:
    """Grows one tree.

    LOCAL splits depth-first up to ``max_depth`` levels of nodes (a tree of
    max_depth d has leaves at edge depth <= d - 1). BEST_FIRST_GLOBAL expands
    the highest-scoring leaf first, unconstrained in depth, until the tree
    holds ``max_num_nodes`` nodes.
    """
    if strategy == "LOCAL":
        root = _grow_local(
            ctx, labels, rows, 0, rng, config, leaf_builder, max_depth, candidate_ratio
        )
        return DecisionTree(root)
    if strategy == "BEST_FIRST_GLOBAL":
        root = _grow_global(
            ctx, labels, rows, rng, config, leaf_builder,
            63 if max_num_nodes is None else max_num_nodes, candidate_ratio,
        )
        return DecisionTree(root)
    raise UsageError(
        f"unknown growing strategy '{strategy}'. Valid strategies: LOCAL, BEST_FIRST_GLOBAL"
    )


def _try_split(ctx, labels, rows, rng, config, candidate_ratio):
    """Best split of a node plus the induced row partition, or None."""
    if len(rows) < 2 * config.min_examples:
        return None
    node_labels = _slice_labels(labels, rows)
    if _labels_pure(node_labels):
        return None
    cand = _best_split_for_node(ctx, node_labels, rows, rng, config, candidate_ratio)
    if cand is None:
        return None
    mask = sp.condition_mask(cand.condition, ctx.X, rows, ctx.vocab_sizes)
    pos_rows = rows[mask]
    neg_rows = rows[~mask]
    if len(pos_rows) < config.min_examples or len(neg_rows) < config.min_examples:
        return None
    return cand, pos_rows, neg_rows


def _grow_local(ctx, labels, rows, depth, rng, config, leaf_builder, max_depth, candidate_ratio):
    if max_depth is not None and depth > max_depth - 2:
        return Leaf(leaf_builder(rows))
    split = _try_split(ctx, labels, rows, rng, config, candidate_ratio)
    if split is None:
        return Leaf(leaf_builder(rows))
    cand, pos_rows, neg_rows = split
    return InternalNode(
        cand.condition,
        positive_child=_grow_local(
            ctx, labels, pos_rows, depth + 1, rng, config, leaf_builder, max_depth, candidate_ratio
        ),
        negative_child=_grow_local(
            ctx, labels, neg_rows, depth + 1, rng, config, leaf_builder, max_depth, candidate_ratio
        ),
    )


class _BuildNode:
    __slots__ = ("rows", "condition", "positive", "negative")

    def __init__(self, rows):
        self.rows = rows
        self.condition = None
        self.positive = None
        self.negative = None


def _grow_global(ctx, labels, rows, rng, config, leaf_builder, max_num_nodes, candidate_ratio):
    root = _BuildNode(rows)
    counter = 0
    frontier = []

    def push(node):
        nonlocal counter
        split = _try_split(ctx, labels, node.rows, rng, config, candidate_ratio)
        if split is not None:
            heapq.heappush(frontier, (-split[0].score, counter, node, split))
            counter += 1

    push(root)
    num_nodes = 1
    while frontier and num_nodes + 2 <= max_num_nodes:
        _, _, node, (cand, pos_rows, neg_rows) = heapq.heappop(frontier)
        node.condition = cand.condition
        node.positive = _BuildNode(pos_rows)
        node.negative = _BuildNode(neg_rows)
        num_nodes += 2
        push(node.positive)
        push(node.negative)

    def freeze(node):
        if node.condition is None:
            return Leaf(leaf_builder(node.rows))
        return InternalNode(
            node.condition,
            positive_child=freeze(node.positive),
            negative_child=freeze(node.negative),
        )

    return freeze(root)


# ---------------------------------------------------------------------------
# Vectorized single-tree application (training-time predictions).

def _apply_tree(tree: DecisionTree, ctx: GrowContext, rows: np.ndarray, payload_fn, out_dim: int) -> np.ndarray:
    out = np.empty((len(rows), out_dim))
    stack = [(tree.root, np.arange(len(rows)))]
    while stack:
        node, positions = stack.pop()
        if len(positions) == 0:
            continue
        if isinstance(node, Leaf):
            out[positions] = payload_fn(node.payload)
            continue
        mask = sp.condition_mask(node.condition, ctx.X, rows[positions], ctx.vocab_sizes)
        stack.append((node.positive_child, positions[mask]))
        stack.append((node.negative_child, positions[~mask]))
    return out


# ---------------------------------------------------------------------------
# Label preparation.

def _classification_labels(dataset: ColumnarDataset, config: TrainingConfig) -> tuple[sp.ClassificationLabels, np.ndarray]:
    label_spec = dataset.spec.column(config.label)
    codes = dataset.column_values(config.label).astype(np.int64)
    n_classes = label_spec.vocab_size - 1
    if (codes == label_spec.missing_sentinel).any():
        raise TrainingError(
            f"the label column '{config.label}' has missing values in the training "
            "examples. Possible solutions: (1) drop the unlabeled rows, or (2) fix "
            "the dataset.",
            code="missing_labels",
        )
    if (codes == 0).any():
        raise TrainingError(
            f"the label column '{config.label}' has out-of-dictionary values in the "
            "training examples. Possible solutions: (1) rebuild the dataspec on "
            "this dataset, or (2) use min_vocab_frequency=1.",
            code="ood_labels",
        )
    return sp.ClassificationLabels(codes=codes - 1, n_classes=n_classes), codes


def _regression_labels(dataset: ColumnarDataset, config: TrainingConfig) -> np.ndarray:
    values = dataset.column_values(config.label).astype(np.float64)
    if np.isnan(values).any():
        raise TrainingError(
            f"the label column '{config.label}' has missing values in the training "
            "examples. Possible solutions: (1) drop the unlabeled rows, or (2) fix "
            "the dataset.",
            code="missing_labels",
        )
    return values


def _check_not_empty(dataset: ColumnarDataset) -> None:
    if dataset.num_rows == 0:
        raise TrainingError("the training dataset is empty")


# ---------------------------------------------------------------------------
# Random Forest.

_FORK_PAYLOAD: dict = {}


def _rf_train_chunk(args):
    """Trains trees [start, stop); returns the trees and OOB sums."""
    from .engines import FlattenedForest

    start, stop = args
    ctx: GrowContext = _FORK_PAYLOAD["ctx"]
    labels = _FORK_PAYLOAD["labels"]
    config: sp.SplitterConfig = _FORK_PAYLOAD["splitter_config"]
    hp = _FORK_PAYLOAD["hp"]
    seeds = _FORK_PAYLOAD["seeds"]
    leaf_dim = _FORK_PAYLOAD["leaf_dim"]
    payload_fn = _FORK_PAYLOAD["payload_fn"]
    leaf_builder_factory = _FORK_PAYLOAD["leaf_builder_factory"]

    n = ctx.X.shape[0]
    all_rows = np.arange(n)
    oob_sum = np.zeros((n, leaf_dim))
    oob_count = np.zeros(n, dtype=np.int64)
    trees = []
    for t in range(start, stop):
        rng = np.random.default_rng(seeds[t])
        if hp["bootstrap"]:
            rows = rng.integers(0, n, size=n)
            oob_rows = np.setdiff1d(all_rows, rows, assume_unique=False)
        else:
            rows = all_rows
            oob_rows = np.empty(0, dtype=np.int64)
        tree = grow_tree(
            ctx, labels, rows, rng, config,
            leaf_builder_factory(labels),
            strategy=hp["growing_strategy"],
            max_depth=hp["max_depth"] if hp["growing_strategy"] == "LOCAL" else None,
            max_num_nodes=hp["max_num_nodes"],
            candidate_ratio=hp["num_candidate_attributes_ratio"],
        )
        if len(oob_rows):
            flat = FlattenedForest(
                [tree], ctx.vocab_sizes,
                lambda p: np.atleast_1d(payload_fn(p)), leaf_dim,
            )
            oob_sum[oob_rows] += flat.traverse(ctx.X[oob_rows])
            oob_count[oob_rows] += 1
        trees.append(tree)
    return trees, oob_sum, oob_count


def _resolve_threads(config: TrainingConfig) -> int:
    if config.num_threads is not None:
        return max(1, config.num_threads)
    return max(1, min(os.cpu_count() or 1, 20))


def train_random_forest(dataset: ColumnarDataset, config: TrainingConfig) -> ForestModel:
    """Breiman-style random forest: bootstrap per tree, per-node attribute
    sampling, out-of-bag self-evaluation; deterministic given the seed."""
    _check_not_empty(dataset)
    validate_training_config(config, dataset.spec)
    hp = config.effective_hyperparameters()
    ctx = build_grow_context(dataset, config)
    splitter_config = _splitter_config(hp)
    n = dataset.num_rows

    if config.task == "CLASSIFICATION":
        labels, codes = _classification_labels(dataset, config)
        leaf_dim = labels.n_classes

        def leaf_builder_factory(lbl):
            def build(rows):
                counts = np.bincount(lbl.codes[rows], minlength=lbl.n_classes)
                return ClassDistribution(counts.astype(np.float64))

            return build

        def payload_fn(payload):
            return payload.probabilities()

    else:
        y = _regression_labels(dataset, config)
        labels = sp.NumericLabels(values=y)
        leaf_dim = 1

        def leaf_builder_factory(lbl):
            def build(rows):
                return RegressionValue(float(lbl.values[rows].mean()), float(len(rows)))

            return build

        def payload_fn(payload):
            return payload.value

    num_trees = hp["num_trees"]
    seeds = np.random.SeedSequence(config.seed).spawn(num_trees)
    _FORK_PAYLOAD.update(
        ctx=ctx,
        labels=labels,
        splitter_config=splitter_config,
        hp=hp,
        seeds=seeds,
        leaf_dim=leaf_dim,
        payload_fn=payload_fn,
        leaf_builder_factory=leaf_builder_factory,
    )
    chunks = [
        (start, min(start + _RF_CHUNK_TREES, num_trees))
        for start in range(0, num_trees, _RF_CHUNK_TREES)
    ]
    threads = _resolve_threads(config)
    try:
        if threads > 1 and len(chunks) > 1:
            with ProcessPoolExecutor(
                max_workers=min(threads, len(chunks)),
                mp_context=multiprocessing.get_context("fork"),
            ) as pool:
                results = list(pool.map(_rf_train_chunk, chunks))
        else:
            results = [_rf_train_chunk(chunk) for chunk in chunks]
    finally:
        _FORK_PAYLOAD.clear()

    trees = []
    oob_sum = np.zeros((n, leaf_dim))
    oob_count = np.zeros(n, dtype=np.int64)
    for chunk_trees, chunk_sum, chunk_count in results:
        trees.extend(chunk_trees)
        oob_sum += chunk_sum
        oob_count += chunk_count

    self_evaluation = None
    if hp["bootstrap"]:
        covered = oob_count > 0
        num_skipped = int(n - covered.sum())
        if covered.any():
            predictions = oob_sum[covered] / oob_count[covered, None]
            if config.task == "CLASSIFICATION":
                self_evaluation = evaluate_classification(
                    predictions,
                    codes[covered],
                    dataset.spec.column(config.label),
                    evaluation_source="OOB",
                    compute_cis=False,
                    num_skipped=num_skipped,
                )
            else:
                self_evaluation = evaluate_regression(
                    predictions[:, 0], labels.values[covered], config.label,
                    evaluation_source="OOB",
                )
                self_evaluation.num_skipped = num_skipped

    return ForestModel(
        model_kind=RANDOM_FOREST,
        task=config.task,
        label=config.label,
        dataspec=dataset.spec,
        trees=trees,
        feature_indices=ctx.feature_indices,
        learner_key=RANDOM_FOREST,
        hyperparameters=hp,
        seed=config.seed,
        num_trees_per_iteration=1,
        self_evaluation=self_evaluation,
    )


# ---------------------------------------------------------------------------
# Gradient Boosted Trees.

def _binomial_deviance(F: np.ndarray, y: np.ndarray) -> float:
    # 2x the mean negative binomial log-likelihood, computed in logit space.
    margins = np.where(y == 1, F, -F)
    return float(2.0 * np.mean(np.logaddexp(0.0, -margins)))


def _softmax(F: np.ndarray) -> np.ndarray:
    shifted = F - F.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _gbt_leaf_builder(g: np.ndarray, h: np.ndarray, shrinkage: float, l1: float, l2: float):
    def build(rows):
        sg = float(g[rows].sum())
        sh = float(h[rows].sum())
        if l1 > 0.0:
            sg = math.copysign(max(abs(sg) - l1, 0.0), sg)
        value = 0.0 if sh + l2 <= 0.0 else -sg / (sh + l2)
        return GbtLogit(shrinkage * value, count=float(len(rows)))

    return build


def train_gbt(dataset: ColumnarDataset, config: TrainingConfig) -> ForestModel:
    """Gradient boosted trees with internal validation extraction and
    loss-increase early stopping (the model is truncated at the iteration of
    minimal validation loss)."""
    _check_not_empty(dataset)
    validate_training_config(config, dataset.spec)
    hp = config.effective_hyperparameters()
    ctx = build_grow_context(dataset, config)
    splitter_config = _splitter_config(hp)
    n = dataset.num_rows
    rng = np.random.default_rng(config.seed)

    early_stopping = hp["early_stopping"] == "LOSS_INCREASE" and hp["validation_ratio"] > 0
    n_val = int(round(hp["validation_ratio"] * n)) if early_stopping else 0
    perm = rng.permutation(n)
    val_rows = np.sort(perm[:n_val])
    train_rows = np.sort(perm[n_val:])
    if len(train_rows) == 0:
        raise TrainingError(
            "the validation split leaves no training examples. Possible "
            "solutions: (1) lower validation_ratio, or (2) use more data."
        )

    classification = config.task == "CLASSIFICATION"
    if classification:
        labels, codes = _classification_labels(dataset, config)
        n_classes = labels.n_classes
        if n_classes < 2:
            raise TrainingError(
                "gradient boosted trees classification requires a training "
                "dataset with a label having at least 2 classes, however, "
                f"{n_classes} classe(s) were found in the label column "
                f"'{config.label}'. Possible solutions: (1) use a training "
                "dataset with two or more classes, or (2) use a learning "
                "algorithm that supports single-class classification e.g. "
                "learner='RANDOM_FOREST'.",
                code="not_enough_classes",
            )
        train_codes = labels.codes[train_rows]
        present = np.unique(train_codes)
        if len(present) < n_classes:
            label_spec = dataset.spec.column(config.label)
            absent = [
                label_spec.dictionary[c + 1][0]
                for c in range(n_classes)
                if c not in set(present.tolist())
            ]
            raise TrainingError(
                f"the internal validation split leaves zero training examples for "
                f"class(es) {absent} of the label '{config.label}'. Possible "
                "solutions: (1) lower validation_ratio, (2) use more data, or (3) "
                "change the seed.",
                code="class_lost_in_split",
            )
        binary = n_classes == 2
        n_outputs = 1 if binary else n_classes
    else:
        y_all = _regression_labels(dataset, config)
        binary = False
        n_outputs = 1

    shrinkage = hp["shrinkage"]
    l1 = hp["l1_regularization"]
    l2 = hp["l2_regularization"]
    grow_kwargs = dict(
        strategy=hp["growing_strategy"],
        max_depth=hp["max_depth"] if hp["growing_strategy"] == "LOCAL" else None,
        max_num_nodes=hp["max_num_nodes"],
        candidate_ratio=hp["num_candidate_attributes_ratio"],
    )

    def logit_payload(payload):
        return payload.value

    trees: list[DecisionTree] = []
    history: list[float] = []

    if classification and binary:
        y_train = (labels.codes[train_rows] == 1).astype(np.float64)
        y_val = (labels.codes[val_rows] == 1).astype(np.float64)
        prior = min(max(y_train.mean(), 1e-12), 1 - 1e-12)
        initial = math.log(prior / (1.0 - prior))
        initial_predictions = np.array([initial])
        F_train = np.full(len(train_rows), initial)
        F_val = np.full(len(val_rows), initial)
        g = np.zeros(n)
        h = np.zeros(n)
        for _ in range(hp["num_trees"]):
            p = 1.0 / (1.0 + np.exp(-F_train))
            g[train_rows] = p - y_train
            h[train_rows] = p * (1.0 - p)
            tree = grow_tree(
                ctx, sp.NumericLabels(values=g, hessians=h), train_rows, rng,
                splitter_config, _gbt_leaf_builder(g, h, shrinkage, l1, l2),
                **grow_kwargs,
            )
            trees.append(tree)
            F_train += _apply_tree(tree, ctx, train_rows, logit_payload, 1)[:, 0]
            if early_stopping:
                F_val += _apply_tree(tree, ctx, val_rows, logit_payload, 1)[:, 0]
                history.append(_binomial_deviance(F_val, y_val))
    elif classification:
        train_codes = labels.codes[train_rows]
        val_codes = labels.codes[val_rows]
        prior = np.bincount(train_codes, minlength=n_classes) / len(train_rows)
        initial_predictions = np.log(np.clip(prior, 1e-12, None))
        F_train = np.tile(initial_predictions, (len(train_rows), 1))
        F_val = np.tile(initial_predictions, (len(val_rows), 1))
        g = np.zeros(n)
        h = np.zeros(n)
        for _ in range(hp["num_trees"]):
            P = _softmax(F_train)
            for c in range(n_classes):
                pc = P[:, c]
                g[train_rows] = pc - (train_codes == c)
                h[train_rows] = pc * (1.0 - pc)
                tree = grow_tree(
                    ctx, sp.NumericLabels(values=g, hessians=h), train_rows, rng,
                    splitter_config, _gbt_leaf_builder(g, h, shrinkage, l1, l2),
                    **grow_kwargs,
                )
                trees.append(tree)
                F_train[:, c] += _apply_tree(tree, ctx, train_rows, logit_payload, 1)[:, 0]
                if early_stopping:
                    F_val[:, c] += _apply_tree(tree, ctx, val_rows, logit_payload, 1)[:, 0]
            if early_stopping:
                P_val = _softmax(F_val)
                p_true = np.clip(P_val[np.arange(len(val_rows)), val_codes], 1e-15, None)
                history.append(float(-2.0 * np.mean(np.log(p_true))))
    else:
        y_train = y_all[train_rows]
        y_val = y_all[val_rows]
        initial = float(y_train.mean())
        initial_predictions = np.array([initial])
        F_train = np.full(len(train_rows), initial)
        F_val = np.full(len(val_rows), initial)
        g = np.zeros(n)
        h = np.zeros(n)
        for _ in range(hp["num_trees"]):
            g[train_rows] = F_train - y_train
            h[train_rows] = 1.0
            tree = grow_tree(
                ctx, sp.NumericLabels(values=g, hessians=h), train_rows, rng,
                splitter_config, _gbt_leaf_builder(g, h, shrinkage, l1, l2),
                **grow_kwargs,
            )
            trees.append(tree)
            F_train += _apply_tree(tree, ctx, train_rows, logit_payload, 1)[:, 0]
            if early_stopping:
                F_val += _apply_tree(tree, ctx, val_rows, logit_payload, 1)[:, 0]
                history.append(float(np.mean((F_val - y_val) ** 2)))

    num_trees_per_iteration = n_outputs
    validation_loss = None
    self_evaluation = None
    if early_stopping and history:
        best_iteration = int(np.argmin(history))
        validation_loss = float(history[best_iteration])
        trees = trees[: (best_iteration + 1) * num_trees_per_iteration]

        # Validation predictions of the truncated model.
        if classification:
            F = np.tile(initial_predictions, (len(val_rows), 1))
            for i, tree in enumerate(trees):
                c = i % n_outputs
                F[:, c] += _apply_tree(tree, ctx, val_rows, logit_payload, 1)[:, 0]
            if binary:
                p = 1.0 / (1.0 + np.exp(-F[:, 0]))
                probabilities = np.column_stack([1.0 - p, p])
            else:
                probabilities = _softmax(F)
            self_evaluation = evaluate_classification(
                probabilities,
                codes[val_rows],
                dataset.spec.column(config.label),
                evaluation_source="VALIDATION_SPLIT",
                compute_cis=False,
            )
        else:
            F = np.full(len(val_rows), initial_predictions[0])
            for tree in trees:
                F += _apply_tree(tree, ctx, val_rows, logit_payload, 1)[:, 0]
            self_evaluation = evaluate_regression(
                F, y_all[val_rows], config.label, evaluation_source="VALIDATION_SPLIT"
            )

    return ForestModel(
        model_kind=GRADIENT_BOOSTED_TREES,
        task=config.task,
        label=config.label,
        dataspec=dataset.spec,
        trees=trees,
        feature_indices=ctx.feature_indices,
        learner_key=GRADIENT_BOOSTED_TREES,
        hyperparameters=hp,
        seed=config.seed,
        num_trees_per_iteration=num_trees_per_iteration,
        initial_predictions=initial_predictions,
        self_evaluation=self_evaluation,
        validation_loss=validation_loss,
    )


# ---------------------------------------------------------------------------
# CART: one tree, pruned on an internal validation split.

def _prune(node, ctx, labels, train_rows, val_rows, leaf_builder, val_loss):
    """Bottom-up reduced-loss pruning; keeps the smallest tree whose
    validation loss matches the best achievable."""
    if isinstance(node, Leaf):
        return node, val_loss(node.payload, val_rows)
    mask_train = sp.condition_mask(node.condition, ctx.X, train_rows, ctx.vocab_sizes)
    mask_val = sp.condition_mask(node.condition, ctx.X, val_rows, ctx.vocab_sizes)
    positive, pos_loss = _prune(
        node.positive_child, ctx, labels, train_rows[mask_train], val_rows[mask_val],
        leaf_builder, val_loss,
    )
    negative, neg_loss = _prune(
        node.negative_child, ctx, labels, train_rows[~mask_train], val_rows[~mask_val],
        leaf_builder, val_loss,
    )
    subtree_loss = pos_loss + neg_loss
    as_leaf = Leaf(leaf_builder(train_rows))
    leaf_loss = val_loss(as_leaf.payload, val_rows)
    if leaf_loss <= subtree_loss:
        return as_leaf, leaf_loss
    return InternalNode(node.condition, positive_child=positive, negative_child=negative), subtree_loss


def train_cart(dataset: ColumnarDataset, config: TrainingConfig) -> ForestModel:
    """Single tree grown without attribute sampling, then pruned to minimize
    loss on an internally extracted validation split."""
    _check_not_empty(dataset)
    validate_training_config(config, dataset.spec)
    hp = config.effective_hyperparameters()
    ctx = build_grow_context(dataset, config)
    splitter_config = _splitter_config(hp)
    n = dataset.num_rows
    rng = np.random.default_rng(config.seed)

    n_val = int(round(hp["validation_ratio"] * n))
    perm = rng.permutation(n)
    val_rows = np.sort(perm[:n_val])
    train_rows = np.sort(perm[n_val:])
    if len(train_rows) == 0:
        raise TrainingError(
            "the validation split leaves no training examples. Possible "
            "solutions: (1) lower validation_ratio, or (2) use more data."
        )

    if config.task == "CLASSIFICATION":
        labels, codes = _classification_labels(dataset, config)
        train_classes = set(np.unique(labels.codes[train_rows]).tolist())
        if len(train_classes) < labels.n_classes:
            label_spec = dataset.spec.column(config.label)
            absent = [
                label_spec.dictionary[c + 1][0]
                for c in range(labels.n_classes)
                if c not in train_classes
            ]
            raise TrainingError(
                f"the validation split leaves zero training examples for "
                f"class(es) {absent} of the label '{config.label}'. Possible "
                "solutions: (1) lower validation_ratio, (2) use more data, or (3) "
                "change the seed.",
                code="class_lost_in_split",
            )

        def leaf_builder(rows):
            counts = np.bincount(labels.codes[rows], minlength=labels.n_classes)
            return ClassDistribution(counts.astype(np.float64))

        def val_loss(payload, rows):
            if len(rows) == 0:
                return 0.0
            p = payload.probabilities()[labels.codes[rows]]
            return float(-np.sum(np.log(np.clip(p, 1e-15, None))))

    else:
        y = _regression_labels(dataset, config)
        labels = sp.NumericLabels(values=y)

        def leaf_builder(rows):
            return RegressionValue(float(labels.values[rows].mean()), float(len(rows)))

        def val_loss(payload, rows):
            if len(rows) == 0:
                return 0.0
            return float(np.sum((labels.values[rows] - payload.value) ** 2))

    tree = grow_tree(
        ctx, labels, train_rows, rng, splitter_config, leaf_builder,
        strategy=hp["growing_strategy"],
        max_depth=hp["max_depth"] if hp["growing_strategy"] == "LOCAL" else None,
        max_num_nodes=hp["max_num_nodes"],
        candidate_ratio=hp["num_candidate_attributes_ratio"],
    )
    pruned_root, _ = _prune(
        tree.root, ctx, labels, train_rows, val_rows, leaf_builder, val_loss
    )
    tree = DecisionTree(pruned_root)

    self_evaluation = None
    if len(val_rows):
        if config.task == "CLASSIFICATION":
            probabilities = _apply_tree(
                tree, ctx, val_rows, lambda p: p.probabilities(), labels.n_classes
            )
            self_evaluation = evaluate_classification(
                probabilities, codes[val_rows], dataset.spec.column(config.label),
                evaluation_source="VALIDATION_SPLIT", compute_cis=False,
            )
        else:
            predictions = _apply_tree(tree, ctx, val_rows, lambda p: p.value, 1)[:, 0]
            self_evaluation = evaluate_regression(
                predictions, labels.values[val_rows], config.label,
                evaluation_source="VALIDATION_SPLIT",
            )

    return ForestModel(
        model_kind=CART,
        task=config.task,
        label=config.label,
        dataspec=dataset.spec,
        trees=[tree],
        feature_indices=ctx.feature_indices,
        learner_key=CART,
        hyperparameters=hp,
        seed=config.seed,
        num_trees_per_iteration=1,
        self_evaluation=self_evaluation,
    )


# ---------------------------------------------------------------------------
# Learner objects (the composable Learner contract: dataset -> model).

class Learner:
    """A trainable configuration; ``train`` maps a dataset to a model."""

    def __init__(self, config: TrainingConfig):
        self.config = config

    def train(self, dataset: ColumnarDataset) -> ForestModel:
        return TRAINERS[self.config.learner](dataset, self.config)

    def with_hyperparameters(self, overrides: dict) -> "Learner":
        return Learner(self.config.replace_hyperparameters(overrides))

    def with_template(self, template_name: str) -> tuple["Learner", str]:
        merged, resolved = apply_hyperparameter_template(
            template_name, self.config.learner, self.config.hyperparameters
        )
        return Learner(dc_replace(self.config, hyperparameters=merged)), resolved


TRAINERS = {
    RANDOM_FOREST: train_random_forest,
    GRADIENT_BOOSTED_TREES: train_gbt,
    CART: train_cart,
}


def make_learner(config: TrainingConfig) -> Learner:
    return Learner(config)
