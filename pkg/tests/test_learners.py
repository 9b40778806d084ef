import math

import numpy as np
import pytest

import grove
from grove.errors import TrainingError, UsageError
from grove.learners import (
    CART_DEFAULTS,
    GRADIENT_BOOSTED_TREES_DEFAULTS,
    RANDOM_FOREST_DEFAULTS,
    TrainingConfig,
    _num_candidates,
    apply_hyperparameter_template,
    build_grow_context,
    grow_tree,
    make_learner,
    require_binary_classes,
    train_cart,
    train_gbt,
    train_random_forest,
    validate_training_config,
)
from grove.splitters import ClassificationLabels, SplitterConfig
from grove.trees import InternalNode, Leaf, serialize_tree, walk

from conftest import make_dataset


def classification_config(**kw):
    base = dict(task="CLASSIFICATION", label="label", learner="RANDOM_FOREST", seed=1)
    base.update(kw)
    return TrainingConfig(**base)


def xor_dataset(copies=10):
    cells = [("0", "0", "neg"), ("0", "1", "pos"), ("1", "0", "pos"), ("1", "1", "neg")]
    rows = cells * copies
    return make_dataset(
        {
            "x": [r[0] for r in rows],
            "y": [r[1] for r in rows],
            "label": [r[2] for r in rows],
        },
        spec_overrides={
            "x": grove.ColumnSemantic.NUMERICAL,
            "y": grove.ColumnSemantic.NUMERICAL,
        },
    )


class TestTrainingConfig:
    def test_unknown_hyperparameter_lists_valid_keys(self):
        with pytest.raises(UsageError, match="num_trees"):
            classification_config(hyperparameters={"num_tress": 5})

    def test_label_cannot_be_feature(self):
        with pytest.raises(UsageError, match="label"):
            classification_config(features=["label", "x"])

    def test_enum_value_validated(self):
        with pytest.raises(UsageError, match="Valid values"):
            classification_config(hyperparameters={"categorical_algorithm": "FANCY"})

    def test_string_coercion(self):
        config = classification_config(
            hyperparameters={"num_trees": "25", "bootstrap": "false"}
        )
        hp = config.effective_hyperparameters()
        assert hp["num_trees"] == 25 and hp["bootstrap"] is False

    def test_unknown_learner(self):
        with pytest.raises(UsageError, match="RANDOM_FOREST"):
            classification_config(learner="EXTRA_TREES")


class TestFrozenDefaults:
    """Default hyper-parameter values are frozen constants."""

    def test_random_forest_defaults(self):
        assert RANDOM_FOREST_DEFAULTS["num_trees"] == 500
        assert RANDOM_FOREST_DEFAULTS["max_depth"] == 16
        assert RANDOM_FOREST_DEFAULTS["min_examples"] == 5
        assert RANDOM_FOREST_DEFAULTS["categorical_algorithm"] == "CART"
        assert RANDOM_FOREST_DEFAULTS["growing_strategy"] == "LOCAL"
        assert RANDOM_FOREST_DEFAULTS["split_axis"] == "AXIS_ALIGNED"
        assert RANDOM_FOREST_DEFAULTS["num_candidate_attributes"] == 0
        assert RANDOM_FOREST_DEFAULTS["bootstrap"] is True

    def test_gbt_defaults(self):
        d = GRADIENT_BOOSTED_TREES_DEFAULTS
        assert d["num_trees"] == 500
        assert d["shrinkage"] == 0.1
        assert d["max_depth"] == 6
        assert d["min_examples"] == 5
        assert d["num_candidate_attributes"] == -1
        assert d["early_stopping"] == "LOSS_INCREASE"
        assert d["validation_ratio"] == 0.1
        assert d["l1_regularization"] == 0.0
        assert d["l2_regularization"] == 0.0
        assert d["use_hessian_gain"] is False
        assert d["growing_strategy"] == "LOCAL"
        assert d["sampling_method"] == "NONE"
        assert d["categorical_algorithm"] == "CART"
        assert d["split_axis"] == "AXIS_ALIGNED"

    def test_cart_defaults(self):
        assert CART_DEFAULTS["max_depth"] == 16
        assert CART_DEFAULTS["min_examples"] == 5
        assert CART_DEFAULTS["validation_ratio"] == 0.1
        assert CART_DEFAULTS["num_candidate_attributes"] == -1


class TestBreimanRule:
    def test_classification_square_root(self):
        config = SplitterConfig(num_candidate_attributes=0)
        assert _num_candidates(config, -1.0, 14, "CLASSIFICATION") == math.ceil(math.sqrt(14))

    def test_regression_one_third(self):
        config = SplitterConfig(num_candidate_attributes=0)
        assert _num_candidates(config, -1.0, 14, "REGRESSION") == math.ceil(14 / 3)

    def test_minus_one_means_all(self):
        config = SplitterConfig(num_candidate_attributes=-1)
        assert _num_candidates(config, -1.0, 14, "CLASSIFICATION") == 14

    def test_ratio_overrides(self):
        config = SplitterConfig(num_candidate_attributes=-1)
        assert _num_candidates(config, 0.5, 14, "CLASSIFICATION") == 7


class TestValidation:
    def test_valid_adult_config_passes(self, adult_train):
        config = TrainingConfig(
            task="CLASSIFICATION", label="income", learner="GRADIENT_BOOSTED_TREES"
        )
        validate_training_config(config, adult_train.spec)

    def test_unknown_label(self, adult_train):
        config = classification_config(label="wages")
        with pytest.raises(TrainingError, match="Possible solutions: \\(1\\)"):
            validate_training_config(config, adult_train.spec)

    def test_numeric_label_for_classification(self, adult_train):
        config = classification_config(label="age")
        with pytest.raises(TrainingError, match="REGRESSION") as err:
            validate_training_config(config, adult_train.spec)
        assert err.value.code == "label_semantic"

    def test_numeric_looking_label_suggests_regression(self):
        rng = np.random.default_rng(0)
        values = [f"{v}" for v in rng.integers(0, 80, size=400) * 10]
        ds = make_dataset(
            {"x": ["1"] * 400, "revenue": values},
            spec_overrides={"revenue": grove.ColumnSemantic.CATEGORICAL},
        )
        config = classification_config(label="revenue")
        with pytest.raises(TrainingError) as err:
            validate_training_config(config, ds.spec)
        assert err.value.code == "classification_look_like_regression"
        assert "task=REGRESSION" in str(err.value)
        assert "disable_error.classification_look_like_regression" in str(err.value)
        # The named override suppresses the check.
        config = classification_config(
            label="revenue",
            error_overrides={"classification_look_like_regression"},
        )
        validate_training_config(config, ds.spec)

    def test_binary_only_error_names_classes(self):
        ds = make_dataset(
            {"x": ["1", "2", "3", "4"] * 3,
             "color": ["blue", "red", "green", "yellow"] * 3}
        )
        config = classification_config(label="color")
        with pytest.raises(TrainingError) as err:
            require_binary_classes(config, ds.spec, "Binary classification training")
        message = str(err.value)
        assert "4 classe(s)" in message
        for name in ("blue", "red", "green", "yellow"):
            assert name in message
        assert "Possible solutions: (1)" in message

    def test_unknown_feature(self, adult_train):
        config = TrainingConfig(
            task="CLASSIFICATION", label="income", learner="RANDOM_FOREST",
            features=["age", "nope"],
        )
        with pytest.raises(TrainingError, match="nope"):
            validate_training_config(config, adult_train.spec)

    def test_regression_needs_numerical_label(self, adult_train):
        config = TrainingConfig(task="REGRESSION", label="income", learner="RANDOM_FOREST")
        with pytest.raises(TrainingError, match="NUMERICAL"):
            validate_training_config(config, adult_train.spec)


class TestGrowTree:
    def _setup(self, n=40):
        rng = np.random.default_rng(0)
        x = np.round(rng.normal(size=n), 2)
        # Four alternating label bands: three positive-gain splits exist.
        y = (np.digitize(x, [-0.5, 0.0, 0.5]) % 2).astype(np.int64)
        ds = make_dataset(
            {"x": [f"{v}" for v in x], "label": ["pos" if v else "neg" for v in y]}
        )
        config = classification_config()
        ctx = build_grow_context(ds, config)
        codes = ds.column_values("label").astype(np.int64) - 1
        labels = ClassificationLabels(codes, 2)

        def leaf_builder(rows):
            counts = np.bincount(labels.codes[rows], minlength=2).astype(np.float64)
            return grove.ClassDistribution(counts)

        return ctx, labels, leaf_builder

    def test_both_strategies_give_identical_stump_for_one_split(self):
        ctx, labels, leaf_builder = self._setup()
        rows = np.arange(40)
        config = SplitterConfig(min_examples=1, num_candidate_attributes=-1)
        local = grow_tree(
            ctx, labels, rows, np.random.default_rng(1), config, leaf_builder,
            strategy="LOCAL", max_depth=2,
        )
        global_ = grow_tree(
            ctx, labels, rows, np.random.default_rng(1), config, leaf_builder,
            strategy="BEST_FIRST_GLOBAL", max_num_nodes=3,
        )
        assert serialize_tree(local) == serialize_tree(global_)
        assert local.num_nodes == 3

    def test_global_node_budget(self):
        # Count-expansions oracle: 2k+1 nodes = k internal nodes.
        ctx, labels, leaf_builder = self._setup()
        rows = np.arange(40)
        config = SplitterConfig(min_examples=1, num_candidate_attributes=-1)
        for k in (1, 2, 3, 5):
            tree = grow_tree(
                ctx, labels, rows, np.random.default_rng(1), config, leaf_builder,
                strategy="BEST_FIRST_GLOBAL", max_num_nodes=2 * k + 1,
            )
            internal = sum(
                1 for node, _ in walk(tree.root) if isinstance(node, InternalNode)
            )
            assert internal <= k
            if k <= 3:  # enough positive gains exist for small budgets
                assert internal == k

    def test_local_depth_budget(self):
        ctx, labels, leaf_builder = self._setup()
        rows = np.arange(40)
        config = SplitterConfig(min_examples=1, num_candidate_attributes=-1)
        stump = grow_tree(
            ctx, labels, rows, np.random.default_rng(1), config, leaf_builder,
            strategy="LOCAL", max_depth=2,
        )
        assert stump.num_nodes == 3 and stump.max_depth == 1
        root_only = grow_tree(
            ctx, labels, rows, np.random.default_rng(1), config, leaf_builder,
            strategy="LOCAL", max_depth=1,
        )
        assert root_only.num_nodes == 1

    def test_unknown_strategy(self):
        ctx, labels, leaf_builder = self._setup()
        with pytest.raises(UsageError, match="strategy"):
            grow_tree(
                ctx, labels, np.arange(40), np.random.default_rng(0),
                SplitterConfig(), leaf_builder, strategy="SPIRAL",
            )


class TestRandomForest:
    def test_memorizes_separable_data(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=60)
        ds = make_dataset(
            {"x": [f"{v:.4f}" for v in x],
             "label": ["pos" if v > 0 else "neg" for v in x]}
        )
        config = classification_config(
            hyperparameters={
                "num_trees": 1, "bootstrap": False, "max_depth": 64, "min_examples": 1,
            },
            num_threads=1,
        )
        model = train_random_forest(ds, config)
        predictions = model.predict(ds)
        accuracy = (np.argmax(predictions, 1) + 1 == ds.column_values("label")).mean()
        assert accuracy == 1.0
        assert model.self_evaluation is None  # no bootstrap, no OOB

    def test_oob_rows_disjoint_from_bootstrap(self):
        rng = np.random.default_rng(0)
        ds = make_dataset(
            {"x": [f"{v:.3f}" for v in rng.normal(size=300)],
             "label": list(rng.choice(["a", "b"], size=300))}
        )
        config = classification_config(hyperparameters={"num_trees": 1}, seed=17,
                                       num_threads=1)
        model = train_random_forest(ds, config)
        # Reconstruct the tree's bootstrap draw from the same seed path.
        seed = np.random.SeedSequence(17).spawn(1)[0]
        draw = np.random.default_rng(seed).integers(0, 300, size=300)
        oob = np.setdiff1d(np.arange(300), draw)
        assert model.self_evaluation.num_predictions == len(oob)
        assert model.self_evaluation.num_skipped == 300 - len(oob)

    def test_deterministic_and_seed_sensitive(self, iris):
        config = grove.TrainingConfig(
            task="CLASSIFICATION", label="species", learner="RANDOM_FOREST",
            hyperparameters={"num_trees": 10}, seed=5, num_threads=1,
        )
        model_a = train_random_forest(iris, config)
        model_b = train_random_forest(iris, config)
        blob = lambda m: b"".join(serialize_tree(t) for t in m.trees)
        assert blob(model_a) == blob(model_b)
        config_c = grove.TrainingConfig(
            task="CLASSIFICATION", label="species", learner="RANDOM_FOREST",
            hyperparameters={"num_trees": 10}, seed=6, num_threads=1,
        )
        assert blob(train_random_forest(iris, config_c)) != blob(model_a)

    def test_regression(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=200)
        y = 3 * x + rng.normal(scale=0.1, size=200)
        ds = make_dataset(
            {"x": [f"{v:.4f}" for v in x], "y": [f"{v:.4f}" for v in y]}
        )
        config = TrainingConfig(
            task="REGRESSION", label="y", learner="RANDOM_FOREST",
            hyperparameters={"num_trees": 30}, seed=2, num_threads=1,
        )
        model = train_random_forest(ds, config)
        predictions = model.predict(ds)
        rmse = np.sqrt(np.mean((predictions - y) ** 2))
        assert rmse < np.std(y) * 0.5
        assert model.self_evaluation.rmse is not None

    def test_empty_dataset(self, iris):
        empty = iris.take(np.array([], dtype=np.int64))
        with pytest.raises(TrainingError, match="empty"):
            train_random_forest(empty, classification_config(label="species"))


class TestGradientBoostedTrees:
    def test_zero_shrinkage_keeps_initial_prediction(self, iris):
        config = grove.TrainingConfig(
            task="CLASSIFICATION", label="species", learner="GRADIENT_BOOSTED_TREES",
            hyperparameters={"num_trees": 5, "shrinkage": 0.0}, seed=3,
        )
        model = train_gbt(iris, config)
        predictions = model.predict(iris)
        expected = np.exp(model.initial_predictions)
        expected /= expected.sum()
        assert np.abs(predictions - expected).max() < 1e-12

    def test_gradients_match_finite_differences(self):
        # Central differences of the binomial negative log-likelihood.
        rng = np.random.default_rng(0)
        F = rng.uniform(-5, 5, size=200)
        y = rng.integers(0, 2, size=200).astype(np.float64)
        h = 1e-5

        def loss(f):
            p = 1 / (1 + np.exp(-f))
            return -(y * np.log(p) + (1 - y) * np.log(1 - p))

        def gradient(f):
            return 1 / (1 + np.exp(-f)) - y

        p = 1 / (1 + np.exp(-F))
        analytic_g = p - y
        analytic_h = p * (1 - p)
        numeric_g = (loss(F + h) - loss(F - h)) / (2 * h)
        numeric_h = (gradient(F + h) - gradient(F - h)) / (2 * h)
        assert np.abs(analytic_g - numeric_g).max() < 1e-6
        assert np.abs(analytic_h - numeric_h).max() < 1e-6

    def test_early_stopping_truncates_at_loss_minimum(self, adult_gbt_model):
        model = adult_gbt_model
        assert model.validation_loss is not None
        assert model.num_trees < model.hyperparameters["num_trees"]
        # Self-evaluation logloss is the deviance minimum halved.
        assert model.self_evaluation.logloss == pytest.approx(
            model.validation_loss / 2.0, abs=1e-9
        )

    def test_binary_initial_prediction_is_log_odds(self, adult_gbt_model):
        logit = adult_gbt_model.initial_predictions[0]
        p = 1 / (1 + np.exp(-logit))
        assert 0.2 < p < 0.3  # share of the positive (">50K") class

    def test_class_lost_in_validation_split_errors(self):
        ds = make_dataset(
            {"x": [str(i) for i in range(20)],
             "label": ["rare"] + ["common"] * 19}
        )
        config = grove.TrainingConfig(
            task="CLASSIFICATION", label="label", learner="GRADIENT_BOOSTED_TREES",
            hyperparameters={"validation_ratio": 0.4}, seed=5,
        )
        with pytest.raises(TrainingError, match="Possible solutions"):
            for seed in range(40):  # some seed keeps "rare" out of training
                config.seed = seed
                train_gbt(ds, config)

    def test_regression_gbt(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-2, 2, size=300)
        y = np.sin(x) * 2
        ds = make_dataset(
            {"x": [f"{v:.5f}" for v in x], "y": [f"{v:.5f}" for v in y]}
        )
        config = TrainingConfig(
            task="REGRESSION", label="y", learner="GRADIENT_BOOSTED_TREES",
            hyperparameters={"num_trees": 80}, seed=1,
        )
        model = train_gbt(ds, config)
        rmse = np.sqrt(np.mean((model.predict(ds) - y) ** 2))
        assert rmse < 0.2

    def test_multiclass_trees_per_iteration(self, iris):
        config = grove.TrainingConfig(
            task="CLASSIFICATION", label="species", learner="GRADIENT_BOOSTED_TREES",
            hyperparameters={"num_trees": 10}, seed=2,
        )
        model = train_gbt(iris, config)
        assert model.num_trees_per_iteration == 3
        assert model.num_trees % 3 == 0


class TestCart:
    def test_pure_label_single_leaf(self):
        ds = make_dataset({"x": ["1", "2", "3", "4"] * 5, "label": ["a"] * 20})
        config = classification_config(learner="CART")
        model = train_cart(ds, config)
        assert model.trees[0].num_nodes == 1

    def test_xor_reaches_perfect_training_accuracy(self):
        # Oracle: the 4-cell truth table is representable at depth 2.
        ds = xor_dataset(copies=10)
        config = classification_config(learner="CART", seed=3)
        model = train_cart(ds, config)
        predictions = model.predict(ds)
        accuracy = (np.argmax(predictions, 1) + 1 == ds.column_values("label")).mean()
        assert accuracy == 1.0

    def test_pruned_validation_loss_not_worse(self):
        rng = np.random.default_rng(8)
        n = 400
        x = rng.normal(size=n)
        noise_label = np.where(
            (x > 0) ^ (rng.random(n) < 0.25), "pos", "neg"
        )
        ds = make_dataset(
            {"x": [f"{v:.4f}" for v in x], "label": list(noise_label)}
        )
        from grove.learners import _classification_labels, _prune, _splitter_config
        from grove.learners import build_grow_context

        config = classification_config(learner="CART", seed=9)
        model = train_cart(ds, config)

        # Rebuild the unpruned tree with the same seed path and compare
        # holdout losses.
        hp = config.effective_hyperparameters()
        ctx = build_grow_context(ds, config)
        labels, codes = _classification_labels(ds, config)
        rng2 = np.random.default_rng(config.seed)
        n_val = int(round(hp["validation_ratio"] * n))
        perm = rng2.permutation(n)
        val_rows = np.sort(perm[:n_val])
        train_rows = np.sort(perm[n_val:])

        def leaf_builder(rows):
            counts = np.bincount(labels.codes[rows], minlength=2).astype(np.float64)
            return grove.ClassDistribution(counts)

        def val_loss(payload, rows):
            if len(rows) == 0:
                return 0.0
            p = payload.probabilities()[labels.codes[rows]]
            return float(-np.sum(np.log(np.clip(p, 1e-15, None))))

        unpruned = grow_tree(
            ctx, labels, train_rows, rng2, _splitter_config(hp), leaf_builder,
            strategy="LOCAL", max_depth=hp["max_depth"],
        )

        def holdout_loss(tree):
            from grove.learners import _apply_tree

            probs = _apply_tree(tree, ctx, val_rows, lambda p: p.probabilities(), 2)
            p_true = probs[np.arange(len(val_rows)), labels.codes[val_rows]]
            return float(-np.sum(np.log(np.clip(p_true, 1e-15, None))))

        assert model.trees[0].num_nodes <= unpruned.num_nodes
        assert holdout_loss(model.trees[0]) <= holdout_loss(unpruned) + 1e-9


class TestTemplates:
    def test_rank1_gbt_overrides(self):
        merged, resolved = apply_hyperparameter_template(
            "benchmark_rank1@v1", "GRADIENT_BOOSTED_TREES"
        )
        assert resolved == "benchmark_rank1@v1"
        assert merged == {
            "growing_strategy": "BEST_FIRST_GLOBAL",
            "categorical_algorithm": "RANDOM",
            "split_axis": "SPARSE_OBLIQUE",
            "sparse_oblique_normalization": "MIN_MAX",
            "sparse_oblique_num_projections_exponent": 1.0,
        }

    def test_rank1_rf_has_no_growing_strategy_override(self):
        merged, _ = apply_hyperparameter_template("benchmark_rank1@v1", "RANDOM_FOREST")
        assert "growing_strategy" not in merged
        assert merged["split_axis"] == "SPARSE_OBLIQUE"

    def test_unversioned_resolves_to_latest(self):
        _, resolved = apply_hyperparameter_template("benchmark_rank1", "RANDOM_FOREST")
        assert resolved == "benchmark_rank1@v1"

    def test_unknown_template(self):
        with pytest.raises(UsageError, match="benchmark_rank1@v1"):
            apply_hyperparameter_template("foo@v9", "RANDOM_FOREST")

    def test_idempotent(self):
        once, _ = apply_hyperparameter_template("benchmark_rank1@v1", "RANDOM_FOREST")
        twice, _ = apply_hyperparameter_template("benchmark_rank1@v1", "RANDOM_FOREST", once)
        assert once == twice


class TestLearnerContract:
    def test_make_learner_trains(self, iris):
        config = grove.TrainingConfig(
            task="CLASSIFICATION", label="species", learner="CART", seed=1
        )
        model = make_learner(config).train(iris)
        assert model.model_kind == "CART"

    def test_with_hyperparameters_returns_new_learner(self, iris):
        config = grove.TrainingConfig(
            task="CLASSIFICATION", label="species", learner="RANDOM_FOREST",
            hyperparameters={"num_trees": 3}, num_threads=1,
        )
        learner = make_learner(config)
        other = learner.with_hyperparameters({"num_trees": 7})
        assert learner.config.hyperparameters["num_trees"] == 3
        assert other.config.hyperparameters["num_trees"] == 7
