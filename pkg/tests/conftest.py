import pathlib

import numpy as np
import pytest

import grove

DATA_DIR = pathlib.Path(__file__).resolve().parent.parent / "data"

ADULT_TRAIN = DATA_DIR / "adult_train.csv"
ADULT_TEST = DATA_DIR / "adult_test.csv"
IRIS = DATA_DIR / "iris.csv"


def require_data(path: pathlib.Path):
    if not path.exists():
        pytest.skip(f"dataset {path.name} not present; run scripts/prepare_data.py")
    return path


@pytest.fixture(scope="session")
def adult_train():
    return grove.read_csv(str(require_data(ADULT_TRAIN)))


@pytest.fixture(scope="session")
def adult_test(adult_train):
    return grove.read_csv(str(require_data(ADULT_TEST)), adult_train.spec)


@pytest.fixture(scope="session")
def iris():
    return grove.read_csv(str(require_data(IRIS)))


@pytest.fixture(scope="session")
def adult_gbt_model(adult_train):
    """Default-hyperparameter GBT trained once for the whole session."""
    config = grove.TrainingConfig(
        task="CLASSIFICATION", label="income", learner="GRADIENT_BOOSTED_TREES",
        seed=123456,
    )
    return grove.train_gbt(adult_train, config)


def make_dataset(columns: dict, spec_overrides=None) -> grove.ColumnarDataset:
    """Builds a dataset from name -> list of raw string values."""
    names = list(columns)
    rows = [
        [str(columns[name][i]) for name in names]
        for i in range(len(next(iter(columns.values()))))
    ]
    spec = grove.build_dataspec(names, rows, overrides=spec_overrides or {},
                                min_vocab_frequency=1)
    from grove.dataset import ColumnarDataset, _encode_column

    encoded = [
        _encode_column(spec.columns[j], [row[j] for row in rows], "<memory>")
        for j in range(len(names))
    ]
    return ColumnarDataset(spec=spec, columns=encoded, num_rows=len(rows))


def classification_dataset(rng, n=200, informative=True):
    """Two numerical features, one categorical, binary label."""
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    color = rng.choice(["red", "green", "blue"], size=n)
    logit = 2.0 * x1 - 1.0 * (color == "blue") if informative else np.zeros(n)
    y = np.where(rng.random(n) < 1 / (1 + np.exp(-logit)), "pos", "neg")
    return make_dataset(
        {
            "x1": [f"{v:.6f}" for v in x1],
            "x2": [f"{v:.6f}" for v in x2],
            "color": list(color),
            "label": list(y),
        }
    )
