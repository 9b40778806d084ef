import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grove.errors import UsageError
from grove.splitters import (
    CategoricalAlgorithm,
    ClassificationAccumulator,
    ClassificationLabels,
    GradientPairAccumulator,
    MissingPolicy,
    NumericLabels,
    ObliqueNormalization,
    RegressionAccumulator,
    SplitterConfig,
    find_boolean_split,
    find_categorical_split,
    find_numerical_split_exact,
    find_numerical_split_histogram,
    find_oblique_split,
    global_imputation_value,
    impute_missing,
    split_score,
)
from grove.trees import HigherCondition, ObliqueCondition


def clf_labels(codes, n_classes=2):
    return ClassificationLabels(np.asarray(codes, dtype=np.int64), n_classes)


def acc_from(labels_slice, n_classes=2):
    return ClassificationAccumulator(
        np.bincount(labels_slice, minlength=n_classes).astype(np.float64)
    )


def config(**kw):
    kw.setdefault("min_examples", 1)
    return SplitterConfig(**kw)


# ---------------------------------------------------------------------------
# split_score.

class TestSplitScore:
    def test_pure_parent_zero_gain_for_every_partition(self):
        labels = np.zeros(8, dtype=np.int64)
        parent = acc_from(labels)
        for cut in range(1, 8):
            assert split_score(parent, acc_from(labels[:cut]), acc_from(labels[cut:])) == 0.0

    def test_perfect_split_gain_is_ln2(self):
        labels = np.array([0] * 5 + [1] * 5)
        gain = split_score(acc_from(labels), acc_from(labels[5:]), acc_from(labels[:5]))
        assert gain == pytest.approx(math.log(2), rel=1e-12)

    def test_regression_variance_reduction(self):
        y = np.array([0.0, 0.0, 10.0, 10.0])
        parent = RegressionAccumulator()
        pos = RegressionAccumulator()
        neg = RegressionAccumulator()
        for v in y:
            parent.add(v)
        for v in y[2:]:
            pos.add(v)
        for v in y[:2]:
            neg.add(v)
        assert split_score(parent, pos, neg) == pytest.approx(25.0)

    def test_hessian_gain_formula(self):
        def make(gs, hs):
            acc = GradientPairAccumulator()
            for g, h in zip(gs, hs):
                acc.add(g, h)
            return acc

        parent = make([1.0, -2.0, 0.5], [0.2, 0.3, 0.4])
        pos = make([1.0], [0.2])
        neg = make([-2.0, 0.5], [0.3, 0.4])
        expected = 1.0**2 / 0.2 + (-1.5) ** 2 / 0.7 - (-0.5) ** 2 / 0.9
        assert split_score(parent, pos, neg, use_hessian_gain=True) == pytest.approx(expected)

    def test_accumulator_mismatch(self):
        with pytest.raises(UsageError, match="mismatch"):
            split_score(acc_from(np.array([0])), RegressionAccumulator(), RegressionAccumulator())

    def test_remove_returns_to_zero(self):
        acc = GradientPairAccumulator()
        acc.add(1.5, 0.3)
        acc.remove(1.5, 0.3)
        assert (acc.count, acc.sum_gradient, acc.sum_sq_gradient, acc.sum_hessian) == (0, 0, 0, 0)


# ---------------------------------------------------------------------------
# Exhaustive oracles.

def brute_force_numerical(values, labels: ClassificationLabels, min_examples):
    """Oracle: enumerate every midpoint between consecutive distinct sorted
    values, score the induced partition with split_score, keep the best."""
    values = np.asarray(values, dtype=np.float64)
    distinct = np.unique(values)
    parent = acc_from(labels.codes, labels.n_classes)
    best = None
    for i in range(len(distinct) - 1):
        threshold = (distinct[i] + distinct[i + 1]) / 2.0
        pos_mask = values >= threshold
        n_pos = int(pos_mask.sum())
        n_neg = len(values) - n_pos
        if n_pos < min_examples or n_neg < min_examples:
            continue
        score = split_score(
            parent,
            acc_from(labels.codes[pos_mask], labels.n_classes),
            acc_from(labels.codes[~pos_mask], labels.n_classes),
        )
        if score > 0 and (best is None or score > best[0]):
            best = (score, threshold, n_pos)
    return best


def brute_force_categorical(codes, labels: ClassificationLabels, min_examples):
    """Oracle: enumerate every bipartition of the present categories."""
    present = sorted(set(codes.tolist()))
    parent = acc_from(labels.codes, labels.n_classes)
    best = None
    for bits in range(1, 2 ** len(present) - 1):
        pos_set = [present[j] for j in range(len(present)) if (bits >> j) & 1]
        pos_mask = np.isin(codes, pos_set)
        n_pos = int(pos_mask.sum())
        n_neg = len(codes) - n_pos
        if n_pos < min_examples or n_neg < min_examples:
            continue
        score = split_score(
            parent,
            acc_from(labels.codes[pos_mask], labels.n_classes),
            acc_from(labels.codes[~pos_mask], labels.n_classes),
        )
        if score > 0 and (best is None or score > best[0]):
            best = (score, frozenset(pos_set), n_pos)
    return best


class TestNumericalExact:
    def test_constant_feature(self):
        values = np.full(10, 3.0)
        assert find_numerical_split_exact(values, clf_labels([0, 1] * 5), config()) is None

    def test_four_point_example(self):
        # Oracle enumeration over the 3 midpoints picks 2.5 with gain ln 2.
        cand = find_numerical_split_exact(
            np.array([1.0, 2.0, 3.0, 4.0]), clf_labels([0, 0, 1, 1]), config()
        )
        assert cand.condition.threshold == 2.5
        assert cand.score == pytest.approx(math.log(2), rel=1e-12)
        assert (cand.num_pos, cand.num_neg) == (2, 2)

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 51))
        values = rng.choice([0.5, 1.5, 2.25, 3.0, 7.5], size=n) + rng.integers(0, 2, size=n)
        labels = clf_labels(rng.integers(0, 2, size=n))
        min_examples = int(rng.integers(1, 4))
        cand = find_numerical_split_exact(values, labels, config(min_examples=min_examples))
        oracle = brute_force_numerical(values, labels, min_examples)
        if oracle is None:
            assert cand is None
        else:
            assert cand is not None
            assert cand.score == oracle[0]  # exact equality
            assert cand.condition.threshold == oracle[1]
            assert cand.num_pos == oracle[2]

    def test_min_examples_respected(self):
        values = np.arange(10.0)
        labels = clf_labels([0] * 1 + [1] * 9)
        cand = find_numerical_split_exact(values, labels, config(min_examples=3))
        assert cand.num_pos >= 3 and cand.num_neg >= 3

    def test_monotone_transform_preserves_partition(self):
        rng = np.random.default_rng(9)
        values = rng.normal(size=30)
        labels = clf_labels(rng.integers(0, 2, size=30))
        a = find_numerical_split_exact(values, labels, config())
        b = find_numerical_split_exact(np.exp(values), labels, config())
        assert a.score == b.score
        assert (a.num_pos, a.num_neg) == (b.num_pos, b.num_neg)

    def test_regression_split(self):
        values = np.array([1.0, 2.0, 3.0, 4.0])
        labels = NumericLabels(np.array([0.0, 0.0, 1.0, 1.0]))
        cand = find_numerical_split_exact(values, labels, config())
        assert cand.condition.threshold == 2.5
        assert cand.score == pytest.approx(0.25)

    @given(st.integers(0, 10**9))
    @settings(max_examples=40, deadline=None)
    def test_candidate_contract(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        values = rng.normal(size=n).round(1)
        labels = clf_labels(rng.integers(0, 3, size=n), n_classes=3)
        cand = find_numerical_split_exact(values, labels, config(min_examples=2))
        if cand is not None:
            assert cand.score > 0
            assert cand.num_pos >= 2 and cand.num_neg >= 2
            assert cand.num_pos + cand.num_neg == n


class TestNumericalHistogram:
    def test_grid_data_matches_exact(self):
        rng = np.random.default_rng(4)
        values = rng.integers(0, 10, size=60).astype(np.float64)
        labels = clf_labels((values > 4).astype(np.int64) ^ (rng.random(60) < 0.1))
        exact = find_numerical_split_exact(values, labels, config())
        hist = find_numerical_split_histogram(values, labels, config(histogram_bins=18))
        assert hist.condition.threshold == exact.condition.threshold
        assert hist.score == exact.score

    def test_constant_feature(self):
        assert (
            find_numerical_split_histogram(np.ones(10), clf_labels([0, 1] * 5), config())
            is None
        )

    def test_two_bins_on_integer_grid(self):
        values = np.arange(10.0)
        labels = clf_labels([0] * 5 + [1] * 5)
        cand = find_numerical_split_histogram(values, labels, config(histogram_bins=2))
        assert cand.condition.threshold == 4.5
        assert cand.score == pytest.approx(math.log(2), rel=1e-12)


class TestCategorical:
    def test_two_categories_all_algorithms_agree(self):
        codes = np.array([0, 0, 0, 1, 1, 1], dtype=np.int64)
        labels = clf_labels([0, 0, 1, 1, 1, 0])
        results = {}
        for algo in CategoricalAlgorithm:
            cand = find_categorical_split(
                codes, labels, config(categorical_algorithm=algo), vocab_size=2, seed=3
            )
            results[algo] = (cand.score, cand.num_pos)
        scores = {v[0] for v in results.values()}
        assert len(scores) == 1
        assert {v[1] for v in results.values()} <= {3}

    @pytest.mark.parametrize("seed", range(25))
    def test_cart_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(1000 + seed)
        k = int(rng.integers(3, 9))
        n = int(rng.integers(12, 60))
        codes = rng.integers(0, k, size=n).astype(np.int64)
        labels = clf_labels(rng.integers(0, 2, size=n))
        cand = find_categorical_split(
            codes, labels, config(min_examples=1), vocab_size=k, seed=0
        )
        oracle = brute_force_categorical(codes, labels, min_examples=1)
        if oracle is None:
            assert cand is None
        else:
            assert cand is not None
            assert cand.score == oracle[0]  # CART is optimal for binary labels

    def test_random_beats_or_matches_one_hot_with_enough_trials(self):
        # Data with two clear category groups, k=5: the RANDOM sampler's
        # candidate set effectively includes every one-hot partition.
        rng = np.random.default_rng(5)
        codes = rng.integers(0, 5, size=200).astype(np.int64)
        labels = clf_labels(((codes >= 2) ^ (rng.random(200) < 0.05)).astype(np.int64))
        random_cand = find_categorical_split(
            codes, labels, config(categorical_algorithm=CategoricalAlgorithm.RANDOM),
            vocab_size=5, seed=17,
        )
        onehot_cand = find_categorical_split(
            codes, labels, config(categorical_algorithm=CategoricalAlgorithm.ONE_HOT),
            vocab_size=5, seed=17,
        )
        assert random_cand.score >= onehot_cand.score

    def test_single_category_returns_none(self):
        codes = np.zeros(10, dtype=np.int64)
        assert (
            find_categorical_split(codes, clf_labels([0, 1] * 5), config(), vocab_size=1)
            is None
        )

    def test_ood_index_assignable(self):
        codes = np.array([0] * 5 + [2] * 5, dtype=np.int64)  # OOD and category 2
        labels = clf_labels([0] * 5 + [1] * 5)
        cand = find_categorical_split(codes, labels, config(), vocab_size=3, seed=0)
        assert cand.score == pytest.approx(math.log(2), rel=1e-12)

    def test_absent_categories_go_negative(self):
        codes = np.array([1, 1, 1, 2, 2, 2], dtype=np.int64)
        labels = clf_labels([0, 0, 0, 1, 1, 1])
        cand = find_categorical_split(codes, labels, config(), vocab_size=5, seed=0)
        assert not cand.condition.mask[3] and not cand.condition.mask[4]

    def test_gradient_labels(self):
        codes = np.array([0, 0, 1, 1, 2, 2], dtype=np.int64)
        g = np.array([-1.0, -1.2, 1.1, 0.9, -0.2, 0.1])
        cand = find_categorical_split(
            codes, NumericLabels(g, np.full(6, 0.25)), config(), vocab_size=3, seed=0
        )
        assert cand is not None and cand.score > 0


class TestBoolean:
    def test_single_partition(self):
        values = np.array([0, 0, 1, 1, 1], dtype=np.int64)
        labels = clf_labels([0, 0, 1, 1, 1])
        cand = find_boolean_split(values, labels, config())
        assert cand.num_pos == 3 and cand.num_neg == 2
        assert cand.score == pytest.approx(
            split_score(acc_from(labels.codes), acc_from(labels.codes[2:]), acc_from(labels.codes[:2]))
        )

    def test_min_examples(self):
        values = np.array([0] + [1] * 9, dtype=np.int64)
        assert find_boolean_split(values, clf_labels([0] + [1] * 9), config(min_examples=2)) is None


class TestOblique:
    def _labels(self, block, w):
        margin = block @ w
        return clf_labels((margin > np.median(margin)).astype(np.int64))

    def test_single_feature_degenerates_to_axis_aligned(self):
        rng = np.random.default_rng(0)
        block = rng.normal(size=(40, 1))
        labels = self._labels(block, np.array([1.0]))
        cand = find_oblique_split(block, [5], labels, config(), rng)
        assert isinstance(cand.condition, HigherCondition)
        assert cand.condition.attribute == 5

    def test_fixed_rng_is_deterministic(self):
        block = np.random.default_rng(1).normal(size=(60, 4))
        labels = self._labels(block, np.array([1.0, -2.0, 0.5, 0.0]))
        cands = [
            find_oblique_split(
                block, [0, 1, 2, 3], labels,
                config(sparse_oblique_normalization=ObliqueNormalization.MIN_MAX,
                       sparse_oblique_num_projections_exponent=1.0),
                np.random.default_rng(42),
            )
            for _ in range(2)
        ]
        a, b = cands
        assert a.condition.attributes == b.condition.attributes
        assert a.condition.weights == b.condition.weights
        assert a.condition.threshold == b.condition.threshold

    @pytest.mark.parametrize("norm", list(ObliqueNormalization))
    def test_score_matches_exact_scan_of_folded_projection(self, norm):
        # Recompute-projection oracle: applying the exact splitter to the
        # folded projection values reproduces score and partition exactly.
        rng = np.random.default_rng(11)
        block = rng.normal(size=(50, 3)) * np.array([1.0, 10.0, 0.1])
        labels = self._labels(block, np.array([0.5, 0.1, -3.0]))
        cand = find_oblique_split(
            block, [0, 1, 2], labels,
            config(sparse_oblique_normalization=norm,
                   sparse_oblique_num_projections_exponent=1.0),
            np.random.default_rng(3),
        )
        if isinstance(cand.condition, HigherCondition):
            projected = block[:, [0, 1, 2].index(cand.condition.attribute)]
        else:
            cols = [[0, 1, 2].index(a) for a in cand.condition.attributes]
            projected = block[:, cols] @ np.array(cand.condition.weights)
        recomputed = find_numerical_split_exact(projected, labels, config())
        assert recomputed.score == cand.score
        assert (recomputed.num_pos, recomputed.num_neg) == (cand.num_pos, cand.num_neg)
        assert recomputed.condition.threshold == pytest.approx(
            cand.condition.threshold, rel=1e-9, abs=1e-9
        )

    def test_constant_features_map_to_zero_weight(self):
        rng = np.random.default_rng(2)
        block = np.column_stack([rng.normal(size=50), np.full(50, 7.0)])
        labels = self._labels(block, np.array([1.0, 0.0]))
        cand = find_oblique_split(
            block, [0, 1], labels,
            config(sparse_oblique_normalization=ObliqueNormalization.MIN_MAX,
                   sparse_oblique_num_projections_exponent=2.0),
            rng,
        )
        if isinstance(cand.condition, ObliqueCondition):
            assert 1 not in cand.condition.attributes

    def test_no_numerical_features(self):
        labels = clf_labels([0, 1])
        assert (
            find_oblique_split(np.empty((2, 0)), [], labels, config(), np.random.default_rng(0))
            is None
        )


class TestImputation:
    def test_global_mean(self):
        values = np.array([1.0, 2.0, np.nan])
        missing = np.isnan(values)
        global_value = global_imputation_value(values, missing, categorical=False)
        assert global_value == 1.5
        assert impute_missing(values, missing, MissingPolicy.GLOBAL_IMPUTATION, global_value) == 1.5

    def test_local_most_frequent(self):
        values = np.array([3, 3, 0], dtype=np.int64)
        missing = np.array([False, False, True])
        out = impute_missing(values, missing, MissingPolicy.LOCAL_IMPUTATION, 7.0, categorical=True)
        assert out == 3

    def test_local_tie_breaks_to_smaller_index(self):
        values = np.array([2, 1, 1, 2], dtype=np.int64)
        missing = np.zeros(4, dtype=bool)
        out = impute_missing(values, missing, MissingPolicy.LOCAL_IMPUTATION, 0.0, categorical=True)
        assert out == 1

    def test_local_equals_global_on_whole_dataset(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=100)
        missing = rng.random(100) < 0.2
        global_value = global_imputation_value(values, missing, categorical=False)
        local = impute_missing(values, missing, MissingPolicy.LOCAL_IMPUTATION, global_value)
        assert local == global_value

    def test_local_all_missing_falls_back_to_global(self):
        values = np.array([np.nan, np.nan])
        missing = np.array([True, True])
        assert impute_missing(values, missing, MissingPolicy.LOCAL_IMPUTATION, 9.0) == 9.0


class TestSplitterConfig:
    def test_bad_histogram_bins(self):
        with pytest.raises(UsageError):
            SplitterConfig(histogram_bins=1)

    def test_bad_min_examples(self):
        with pytest.raises(UsageError):
            SplitterConfig(min_examples=0)
