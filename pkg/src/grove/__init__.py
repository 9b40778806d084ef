"""grove: a decision-forests training, evaluation, and serving toolkit.

Train CART, Random Forest, and Gradient Boosted Trees models on CSV data
with automated column-semantics inference, compose meta-learners (tuner,
ensembler, calibrator, feature selector), evaluate with confidence
intervals, and serve through structure-specialized inference engines.
"""

from .dataspec import (
    ColumnSemantic,
    ColumnSpec,
    DataSpec,
    build_dataspec,
    format_dataspec,
    infer_column_semantic,
)
from .dataset import (
    ColumnarDataset,
    FoldAssignment,
    assign_folds,
    read_csv,
    read_dataset,
    write_csv,
)
from .errors import (
    DataError,
    GroveError,
    SerializationError,
    TrainingError,
    UsageError,
)
from .evaluation import (
    ComparisonResult,
    ConfidenceInterval,
    EvaluationReport,
    compare_models,
    confidence_interval,
    cross_validate,
    evaluate_classification,
    evaluate_regression,
    format_evaluation,
    self_evaluate,
)
from .learners import (
    Learner,
    TrainingConfig,
    apply_hyperparameter_template,
    make_learner,
    train_cart,
    train_gbt,
    train_random_forest,
    validate_training_config,
)
from .meta import (
    CalibratedLearner,
    EnsembleLearner,
    FeatureSelectorLearner,
    SearchDimension,
    SearchSpace,
    TunedLearner,
    calibrate_train,
    default_search_space,
    ensemble_train,
    select_features,
    tune,
)
from .model import ForestModel, format_model_summary, load_model, save_model
from .engines import benchmark_inference, compile, predict_batch, predict_model
from .splitters import (
    SplitCandidate,
    SplitterConfig,
    find_categorical_split,
    find_numerical_split_exact,
    find_numerical_split_histogram,
    find_oblique_split,
    impute_missing,
    split_score,
)
from .trees import (
    BooleanIsCondition,
    ClassDistribution,
    Condition,
    ContainsBitmapCondition,
    ContainsCondition,
    DecisionTree,
    GbtLogit,
    HigherCondition,
    InternalNode,
    Leaf,
    ObliqueCondition,
    RegressionValue,
    deserialize_tree,
    eval_condition,
    predict_tree,
    serialize_tree,
    tree_statistics,
    variable_importance,
)

__version__ = "0.1.0"
