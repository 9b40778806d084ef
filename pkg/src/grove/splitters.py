"""Best-split search: exact/histogram numerical, CART/random/one-hot
categorical, sparse oblique projections, and missing-value imputation.

Splitters are pure functions of (values, labels, config, seed). They operate
on missing-free inputs: the caller imputes missing values first (see
``impute_missing``) and then fixes each returned condition's ``na_value`` to
the branch the imputed value takes, which keeps inference free of imputation
state.

The positive branch of every returned condition is "condition holds"; both
children of a returned candidate hold at least ``min_examples`` examples and
the score is strictly positive (otherwise None is returned: no-split is a
value, not an error).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import _kernels as k
from .errors import UsageError
from .trees import (
    BooleanIsCondition,
    Condition,
    ContainsBitmapCondition,
    ContainsCondition,
    HigherCondition,
    ObliqueCondition,
)


# ---------------------------------------------------------------------------
# Label statistics accumulators.

@dataclass
class ClassificationAccumulator:
    """Per-class example counts."""

    class_counts: np.ndarray  # float64

    @classmethod
    def empty(cls, n_classes: int) -> "ClassificationAccumulator":
        return cls(np.zeros(n_classes))

    def add(self, label: int, weight: float = 1.0) -> None:
        self.class_counts[label] += weight

    def remove(self, label: int, weight: float = 1.0) -> None:
        self.class_counts[label] -= weight

    @property
    def count(self) -> float:
        return float(self.class_counts.sum())


@dataclass
class RegressionAccumulator:
    count: float = 0.0
    sum: float = 0.0
    sum_squares: float = 0.0

    def add(self, value: float, weight: float = 1.0) -> None:
        self.count += weight
        self.sum += weight * value
        self.sum_squares += weight * value * value

    def remove(self, value: float, weight: float = 1.0) -> None:
        self.add(value, -weight)


@dataclass
class GradientPairAccumulator:
    """Sums of gradients/hessians; ``sum_sq_gradient`` feeds variance scoring."""

    count: float = 0.0
    sum_gradient: float = 0.0
    sum_sq_gradient: float = 0.0
    sum_hessian: float = 0.0

    def add(self, gradient: float, hessian: float, weight: float = 1.0) -> None:
        self.count += weight
        self.sum_gradient += weight * gradient
        self.sum_sq_gradient += weight * gradient * gradient
        self.sum_hessian += weight * hessian

    def remove(self, gradient: float, hessian: float, weight: float = 1.0) -> None:
        self.add(gradient, hessian, -weight)


LabelAccumulator = Union[
    ClassificationAccumulator, RegressionAccumulator, GradientPairAccumulator
]


def split_score(
    parent: LabelAccumulator,
    pos: LabelAccumulator,
    neg: LabelAccumulator,
    use_hessian_gain: bool = False,
    l2: float = 0.0,
) -> float:
    """Score of a binary partition: information gain (classification),
    variance reduction (regression / gradients), or hessian gain."""
    if not (type(parent) is type(pos) is type(neg)):
        raise UsageError(
            "mismatched accumulators: "
            f"{type(parent).__name__}/{type(pos).__name__}/{type(neg).__name__}"
        )
    if isinstance(parent, ClassificationAccumulator):
        return float(
            k.info_gain_counts(parent.class_counts, pos.class_counts, neg.class_counts)
        )
    if isinstance(parent, RegressionAccumulator):
        return float(
            k.variance_reduction(
                parent.count, parent.sum, parent.sum_squares,
                pos.count, pos.sum, pos.sum_squares,
                neg.count, neg.sum, neg.sum_squares,
            )
        )
    if use_hessian_gain:
        return float(
            k.hessian_gain(
                parent.sum_gradient, parent.sum_hessian,
                pos.sum_gradient, pos.sum_hessian,
                neg.sum_gradient, neg.sum_hessian,
                l2,
            )
        )
    return float(
        k.variance_reduction(
            parent.count, parent.sum_gradient, parent.sum_sq_gradient,
            pos.count, pos.sum_gradient, pos.sum_sq_gradient,
            neg.count, neg.sum_gradient, neg.sum_sq_gradient,
        )
    )


# ---------------------------------------------------------------------------
# Label views passed to the splitters.

@dataclass
class ClassificationLabels:
    codes: np.ndarray  # int64, 0-based class ids
    n_classes: int


@dataclass
class NumericLabels:
    """Regression targets, or GBT gradients with their hessians."""

    values: np.ndarray  # float64
    hessians: np.ndarray | None = None

    def hessians_or_ones(self) -> np.ndarray:
        if self.hessians is None:
            return np.ones_like(self.values)
        return self.hessians


Labels = Union[ClassificationLabels, NumericLabels]


class CategoricalAlgorithm(enum.Enum):
    CART = "CART"
    RANDOM = "RANDOM"
    ONE_HOT = "ONE_HOT"


class SplitAxis(enum.Enum):
    AXIS_ALIGNED = "AXIS_ALIGNED"
    SPARSE_OBLIQUE = "SPARSE_OBLIQUE"


class ObliqueNormalization(enum.Enum):
    NONE = "NONE"
    MIN_MAX = "MIN_MAX"
    STANDARD_DEVIATION = "STANDARD_DEVIATION"


class NumericalSplit(enum.Enum):
    EXACT = "EXACT"
    HISTOGRAM = "HISTOGRAM"


class MissingPolicy(enum.Enum):
    GLOBAL_IMPUTATION = "GLOBAL_IMPUTATION"
    LOCAL_IMPUTATION = "LOCAL_IMPUTATION"


@dataclass
class SplitterConfig:
    min_examples: int = 5
    num_candidate_attributes: int = 0  # -1 = all, 0 = Breiman rule
    categorical_algorithm: CategoricalAlgorithm = CategoricalAlgorithm.CART
    split_axis: SplitAxis = SplitAxis.AXIS_ALIGNED
    sparse_oblique_normalization: ObliqueNormalization = ObliqueNormalization.NONE
    sparse_oblique_num_projections_exponent: float = 2.0
    numerical_split: NumericalSplit = NumericalSplit.EXACT
    histogram_bins: int = 255
    missing_policy: MissingPolicy = MissingPolicy.GLOBAL_IMPUTATION
    use_hessian_gain: bool = False
    l2: float = 0.0

    def __post_init__(self):
        if self.min_examples <= 0:
            raise UsageError("min_examples must be positive")
        if self.histogram_bins < 2:
            raise UsageError("histogram_bins must be >= 2")
        if self.num_candidate_attributes < -1:
            raise UsageError("num_candidate_attributes must be >= -1")


@dataclass
class SplitCandidate:
    condition: Condition
    score: float
    num_pos: int
    num_neg: int


# Trial count of the RANDOM categorical algorithm: linear in dictionary size.
RANDOM_CATEGORICAL_BASE_TRIALS = 32


def _classification_scan(values, labels: ClassificationLabels, order, min_examples):
    return k.scan_numerical_classification(
        values[order], labels.codes[order], labels.n_classes, min_examples
    )


def _numeric_scan(values, labels: NumericLabels, order, min_examples, config):
    return k.scan_numerical_numeric(
        values[order],
        labels.values[order],
        labels.hessians_or_ones()[order],
        min_examples,
        config.use_hessian_gain,
        config.l2,
    )


def find_numerical_split_exact(
    values: np.ndarray,
    labels: Labels,
    config: SplitterConfig,
    attribute: int = 0,
) -> Optional[SplitCandidate]:
    """Scans every midpoint between consecutive distinct sorted values."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = len(values)
    if n < 2 * config.min_examples:
        return None
    order = np.argsort(values)
    if isinstance(labels, ClassificationLabels):
        score, thr, n_pos = _classification_scan(values, labels, order, config.min_examples)
    else:
        score, thr, n_pos = _numeric_scan(values, labels, order, config.min_examples, config)
    if score <= 0.0:
        return None
    return SplitCandidate(
        condition=HigherCondition(attribute, float(thr)),
        score=float(score),
        num_pos=int(n_pos),
        num_neg=n - int(n_pos),
    )


def find_numerical_split_histogram(
    values: np.ndarray,
    labels: Labels,
    config: SplitterConfig,
    attribute: int = 0,
) -> Optional[SplitCandidate]:
    """Equal-width binning over [min, max]; candidates are bin boundaries."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = len(values)
    if n < 2 * config.min_examples:
        return None
    lo = float(values.min())
    hi = float(values.max())
    if lo == hi:
        return None
    width = (hi - lo) / config.histogram_bins
    boundaries = lo + width * np.arange(1, config.histogram_bins)
    order = np.argsort(values)
    if isinstance(labels, ClassificationLabels):
        score, thr, n_pos = k.scan_boundaries_classification(
            values[order], labels.codes[order], boundaries,
            labels.n_classes, config.min_examples,
        )
    else:
        score, thr, n_pos = k.scan_boundaries_numeric(
            values[order], labels.values[order], labels.hessians_or_ones()[order],
            boundaries, config.min_examples, config.use_hessian_gain, config.l2,
        )
    if score <= 0.0:
        return None
    return SplitCandidate(
        condition=HigherCondition(attribute, float(thr)),
        score=float(score),
        num_pos=int(n_pos),
        num_neg=n - int(n_pos),
    )


def _categorical_stats(codes, labels, vocab_size):
    """Per-category label statistics (count matrix or sums)."""
    if isinstance(labels, ClassificationLabels):
        counts = np.bincount(
            codes * labels.n_classes + labels.codes,
            minlength=vocab_size * labels.n_classes,
        ).reshape(vocab_size, labels.n_classes).astype(np.float64)
        return counts
    cnt = np.bincount(codes, minlength=vocab_size).astype(np.float64)
    s = np.bincount(codes, weights=labels.values, minlength=vocab_size)
    ss = np.bincount(codes, weights=labels.values**2, minlength=vocab_size)
    sh = np.bincount(codes, weights=labels.hessians_or_ones(), minlength=vocab_size)
    return cnt, s, ss, sh


def find_categorical_split(
    codes: np.ndarray,
    labels: Labels,
    config: SplitterConfig,
    vocab_size: int,
    attribute: int = 0,
    seed: int = 0,
) -> Optional[SplitCandidate]:
    """Categorical split per ``config.categorical_algorithm``.

    CART orders categories by mean label response (binary classification:
    positive-class rate) and scans prefix partitions, which is optimal for
    binary outcomes. RANDOM samples category subsets. ONE_HOT tests each
    single category against the rest. The out-of-dictionary index is
    assignable like any other category; categories absent from the node go
    to the negative branch.
    """
    if vocab_size < 2:
        return None
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    n = len(codes)
    if n < 2 * config.min_examples:
        return None
    stats = _categorical_stats(codes, labels, vocab_size)
    is_classification = isinstance(labels, ClassificationLabels)
    cnt = stats.sum(axis=1) if is_classification else stats[0]
    present = cnt > 0
    if int(present.sum()) < 2:
        return None

    algo = config.categorical_algorithm
    mask = np.zeros(vocab_size, dtype=bool)
    if algo is CategoricalAlgorithm.CART:
        present_idx = np.flatnonzero(present)
        if is_classification:
            rate_class = min(1, labels.n_classes - 1)
            response = stats[present_idx, rate_class] / cnt[present_idx]
        else:
            response = stats[1][present_idx] / cnt[present_idx]
        ordered = present_idx[np.argsort(response, kind="stable")]
        if is_classification:
            score, cut, n_pos = k.scan_ordered_categories_classification(
                np.ascontiguousarray(stats[ordered]), config.min_examples
            )
        else:
            cnt_, s, ss, sh = stats
            score, cut, n_pos = k.scan_ordered_categories_numeric(
                cnt_[ordered], s[ordered], ss[ordered], sh[ordered],
                config.min_examples, config.use_hessian_gain, config.l2,
            )
        if score <= 0.0:
            return None
        mask[ordered[cut:]] = True
    elif algo is CategoricalAlgorithm.RANDOM:
        trials = RANDOM_CATEGORICAL_BASE_TRIALS + vocab_size
        present_u8 = present.astype(np.uint8)
        if is_classification:
            score, mask_u8, n_pos = k.scan_random_categories_classification(
                stats, present_u8, trials, config.min_examples, seed % (2**32)
            )
        else:
            cnt_, s, ss, sh = stats
            score, mask_u8, n_pos = k.scan_random_categories_numeric(
                cnt_, s, ss, sh, present_u8, trials, config.min_examples,
                seed % (2**32), config.use_hessian_gain, config.l2,
            )
        if score <= 0.0:
            return None
        mask = mask_u8.astype(bool)
    elif algo is CategoricalAlgorithm.ONE_HOT:
        present_u8 = present.astype(np.uint8)
        if is_classification:
            score, cat, n_pos = k.scan_onehot_classification(
                stats, present_u8, config.min_examples
            )
        else:
            cnt_, s, ss, sh = stats
            score, cat, n_pos = k.scan_onehot_numeric(
                cnt_, s, ss, sh, present_u8, config.min_examples,
                config.use_hessian_gain, config.l2,
            )
        if score <= 0.0:
            return None
        mask[cat] = True
    else:
        raise UsageError(f"unknown categorical algorithm {algo}")

    return SplitCandidate(
        condition=ContainsBitmapCondition(attribute, mask),
        score=float(score),
        num_pos=int(n_pos),
        num_neg=n - int(n_pos),
    )


def find_boolean_split(
    values: np.ndarray,
    labels: Labels,
    config: SplitterConfig,
    attribute: int = 0,
) -> Optional[SplitCandidate]:
    """Single candidate partition: true vs false."""
    values = np.ascontiguousarray(values, dtype=np.int64)
    n = len(values)
    pos_rows = values == 1
    n_pos = int(pos_rows.sum())
    n_neg = n - n_pos
    if n_pos < config.min_examples or n_neg < config.min_examples:
        return None
    if isinstance(labels, ClassificationLabels):
        parent = np.bincount(labels.codes, minlength=labels.n_classes).astype(np.float64)
        pos = np.bincount(
            labels.codes[pos_rows], minlength=labels.n_classes
        ).astype(np.float64)
        score = float(k.info_gain_counts(parent, pos, parent - pos))
    else:
        y = labels.values
        h = labels.hessians_or_ones()
        if config.use_hessian_gain:
            score = float(
                k.hessian_gain(
                    y.sum(), h.sum(),
                    y[pos_rows].sum(), h[pos_rows].sum(),
                    y[~pos_rows].sum(), h[~pos_rows].sum(),
                    config.l2,
                )
            )
        else:
            score = float(
                k.variance_reduction(
                    float(n), y.sum(), (y * y).sum(),
                    float(n_pos), y[pos_rows].sum(), (y[pos_rows] ** 2).sum(),
                    float(n_neg), y[~pos_rows].sum(), (y[~pos_rows] ** 2).sum(),
                )
            )
    if score <= 0.0:
        return None
    return SplitCandidate(
        condition=BooleanIsCondition(attribute),
        score=score,
        num_pos=n_pos,
        num_neg=n_neg,
    )


def find_oblique_split(
    numerical_block: np.ndarray,
    attributes: list[int],
    labels: Labels,
    config: SplitterConfig,
    rng: np.random.Generator,
) -> Optional[SplitCandidate]:
    """Sparse random projections over numerical features.

    Draws ceil(f ** exponent) projections; each feature enters a projection
    independently with density sqrt(f)/f (expected ceil(sqrt(f)) nonzeros)
    and a weight uniform in [-1, 1]. The exact numerical splitter scores
    each projection. Normalization constants are folded into the returned
    weights so evaluation needs no normalization state.
    """
    block = np.ascontiguousarray(numerical_block, dtype=np.float64)
    n, f = block.shape
    if f == 0:
        return None
    if n < 2 * config.min_examples:
        return None
    if f == 1:
        return find_numerical_split_exact(block[:, 0], labels, config, attributes[0])

    norm = config.sparse_oblique_normalization
    if norm is ObliqueNormalization.MIN_MAX:
        shift = block.min(axis=0)
        scale = block.max(axis=0) - shift
    elif norm is ObliqueNormalization.STANDARD_DEVIATION:
        shift = block.mean(axis=0)
        scale = block.std(axis=0)
    else:
        shift = np.zeros(f)
        scale = np.ones(f)
    # Constant features map to 0 under normalization.
    degenerate = scale == 0.0
    scale = np.where(degenerate, 1.0, scale)
    normalized = (block - shift) / scale

    num_projections = int(math.ceil(f ** config.sparse_oblique_num_projections_exponent))
    density = math.ceil(math.sqrt(f)) / f

    best: SplitCandidate | None = None
    best_proj: tuple[np.ndarray, np.ndarray] | None = None
    for _ in range(num_projections):
        selected = rng.random(f) < density
        selected &= ~degenerate
        if not selected.any():
            usable = np.flatnonzero(~degenerate)
            if len(usable) == 0:
                return None
            selected[usable[rng.integers(len(usable))]] = True
        weights = rng.uniform(-1.0, 1.0, size=int(selected.sum()))
        projected = normalized[:, selected] @ weights
        candidate = find_numerical_split_exact(projected, labels, config)
        if candidate is not None and (best is None or candidate.score > best.score):
            best = candidate
            best_proj = (np.flatnonzero(selected), weights)

    if best is None:
        return None
    sel, weights = best_proj
    folded_weights = weights / scale[sel]
    threshold = best.condition.threshold + float(np.sum(weights * shift[sel] / scale[sel]))
    best.condition = ObliqueCondition(
        attributes=tuple(int(attributes[j]) for j in sel),
        weights=tuple(float(w) for w in folded_weights),
        threshold=threshold,
    )
    return best


# ---------------------------------------------------------------------------
# Missing-value imputation.

def impute_missing(
    values: np.ndarray,
    missing: np.ndarray,
    policy: MissingPolicy,
    global_value: float,
    categorical: bool = False,
) -> float:
    """Imputation value for a column at a node.

    GLOBAL uses the whole-dataset statistic (``global_value``); LOCAL uses
    the node's rows (mean for numerical, most frequent for categorical with
    ties to the smaller index), falling back to GLOBAL when the node has no
    observed value.
    """
    if policy is MissingPolicy.GLOBAL_IMPUTATION:
        return global_value
    observed = values[~missing]
    if len(observed) == 0:
        return global_value
    if categorical:
        return float(np.argmax(np.bincount(observed.astype(np.int64))))
    return float(observed.mean())


def global_imputation_value(values: np.ndarray, missing: np.ndarray, categorical: bool) -> float:
    observed = values[~missing]
    if len(observed) == 0:
        return 0.0
    if categorical:
        return float(np.argmax(np.bincount(observed.astype(np.int64))))
    return float(observed.mean())


# ---------------------------------------------------------------------------
# Vectorized condition application (used by the tree grower so that the
# training-time partition is exactly the stored condition's routing).

def condition_mask(
    condition: Condition,
    X: np.ndarray,
    rows: np.ndarray,
    vocab_sizes: np.ndarray | None = None,
) -> np.ndarray:
    """Boolean mask over ``rows``: True where the condition holds.

    ``vocab_sizes`` (dictionary size per column) is required to route the
    categorical missing sentinel of ContainsCondition; bitmap conditions
    carry their own dictionary size.
    """
    if isinstance(condition, HigherCondition):
        v = X[rows, condition.attribute]
        return np.where(np.isnan(v), condition.na_value, v >= condition.threshold)
    if isinstance(condition, ContainsBitmapCondition):
        codes = X[rows, condition.attribute].astype(np.int64)
        missing = codes >= len(condition.mask)
        hit = condition.mask[np.minimum(codes, len(condition.mask) - 1)]
        return np.where(missing, condition.na_value, hit)
    if isinstance(condition, ContainsCondition):
        codes = X[rows, condition.attribute].astype(np.int64)
        if vocab_sizes is None:
            raise UsageError("vocab_sizes is required to evaluate ContainsCondition")
        missing = codes >= vocab_sizes[condition.attribute]
        return np.where(missing, condition.na_value, np.isin(codes, condition.items))
    if isinstance(condition, ObliqueCondition):
        acc = X[rows][:, list(condition.attributes)] @ np.asarray(condition.weights)
        return np.where(np.isnan(acc), condition.na_value, acc >= condition.threshold)
    if isinstance(condition, BooleanIsCondition):
        v = X[rows, condition.attribute]
        return np.where(v == 2.0, condition.na_value, v == 1.0)
    raise UsageError(f"unknown condition type {type(condition).__name__}")
