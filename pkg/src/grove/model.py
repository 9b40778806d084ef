"""Forest models: structure, prediction entry points, and model-directory IO.

A model directory holds four plain files: the dataspec, a header with
metadata and hyper-parameters, the binary trees file, and the training-time
self-evaluation. Writing is deterministic: the same model produces the same
bytes.
"""

from __future__ import annotations

import json
import pathlib
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .dataspec import DataSpec, dataspec_from_text, dataspec_to_text
from .errors import DataError, SerializationError
from .evaluation import EvaluationReport, report_from_text, report_to_text
from .trees import (
    DecisionTree,
    deserialize_tree,
    format_importances,
    format_tree_statistics,
    serialize_tree,
    tree_statistics,
    variable_importance,
)

FOREST_MAGIC = b"GRVF"
FORMAT_VERSION = 1

DATASPEC_FILENAME = "data_spec.txt"
HEADER_FILENAME = "header.txt"
TREES_FILENAME = "trees.bin"
SELF_EVALUATION_FILENAME = "self_evaluation.txt"

RANDOM_FOREST = "RANDOM_FOREST"
GRADIENT_BOOSTED_TREES = "GRADIENT_BOOSTED_TREES"
CART = "CART"


@dataclass
class ForestModel:
    model_kind: str  # RANDOM_FOREST | GRADIENT_BOOSTED_TREES | CART
    task: str  # CLASSIFICATION | REGRESSION
    label: str
    dataspec: DataSpec
    trees: list[DecisionTree]
    feature_indices: list[int]
    learner_key: str
    hyperparameters: dict
    seed: int
    num_trees_per_iteration: int = 1
    initial_predictions: np.ndarray = field(default_factory=lambda: np.zeros(0))
    self_evaluation: EvaluationReport | None = None
    validation_loss: float | None = None
    format_version: int = FORMAT_VERSION

    @property
    def label_spec(self):
        return self.dataspec.column(self.label)

    @property
    def n_classes(self) -> int:
        return self.label_spec.vocab_size - 1 if self.task == "CLASSIFICATION" else 0

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    def predict(self, dataset) -> np.ndarray:
        """Class probabilities (n, classes) or regression values (n,).

        Uses the fastest compatible inference engine.
        """
        from . import engines

        return engines.predict_model(self, dataset)

    def variable_importances(self, kind: str):
        return variable_importance(self.trees, self.dataspec, kind)


# ---------------------------------------------------------------------------
# Model directory IO.

def _hp_line(key: str, value) -> str:
    return f"hp {{ key: {json.dumps(key)} value: {json.dumps(value)} }}"


def save_model(model: ForestModel, path: str | pathlib.Path) -> None:
    directory = pathlib.Path(path)
    directory.mkdir(parents=True, exist_ok=True)

    (directory / DATASPEC_FILENAME).write_text(dataspec_to_text(model.dataspec))

    lines = [
        f"format_version: {model.format_version}",
        f"model_kind: {model.model_kind}",
        f"task: {model.task}",
        f"label: {json.dumps(model.label)}",
        f"learner: {json.dumps(model.learner_key)}",
        f"seed: {model.seed}",
        f"num_trees_per_iteration: {model.num_trees_per_iteration}",
    ]
    if model.validation_loss is not None:
        lines.append(f"validation_loss: {model.validation_loss!r}")
    for value in model.initial_predictions:
        lines.append(f"initial_prediction: {float(value)!r}")
    for index in model.feature_indices:
        lines.append(f"input_feature: {json.dumps(model.dataspec.columns[index].name)}")
    for key in sorted(model.hyperparameters):
        lines.append(_hp_line(key, model.hyperparameters[key]))
    (directory / HEADER_FILENAME).write_text("\n".join(lines) + "\n")

    blobs = [serialize_tree(tree) for tree in model.trees]
    with open(directory / TREES_FILENAME, "wb") as f:
        f.write(FOREST_MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(blobs)))
        for blob in blobs:
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)

    if model.self_evaluation is not None:
        (directory / SELF_EVALUATION_FILENAME).write_text(
            report_to_text(model.self_evaluation)
        )


_HP_RE = re.compile(r'^hp \{ key: (".*") value: (.*) \}$')


def load_model(path: str | pathlib.Path) -> ForestModel:
    directory = pathlib.Path(path)
    if not directory.is_dir():
        raise DataError(f"'{path}' is not a model directory")
    try:
        spec = dataspec_from_text((directory / DATASPEC_FILENAME).read_text())
        header_text = (directory / HEADER_FILENAME).read_text()
        trees_bytes = (directory / TREES_FILENAME).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model directory '{path}': {exc}") from exc

    fields: dict = {"initial_predictions": [], "input_features": [], "hp": {}}
    for line in header_text.splitlines():
        line = line.strip()
        if not line:
            continue
        m = _HP_RE.match(line)
        if m:
            fields["hp"][json.loads(m.group(1))] = json.loads(m.group(2))
            continue
        key, sep, value = line.partition(": ")
        if not sep:
            raise DataError(f"malformed model header line: '{line}'")
        if key == "initial_prediction":
            fields["initial_predictions"].append(float(value))
        elif key == "input_feature":
            fields["input_features"].append(json.loads(value))
        else:
            fields[key] = value

    version = int(fields.get("format_version", "0"))
    if version > FORMAT_VERSION:
        raise SerializationError(
            f"model format version {version} is newer than the supported "
            f"version {FORMAT_VERSION}; upgrade the library to read it"
        )

    if trees_bytes[: len(FOREST_MAGIC)] != FOREST_MAGIC:
        raise SerializationError("trees file has bad magic bytes")
    offset = len(FOREST_MAGIC)
    tree_version, num_trees = struct.unpack_from("<HI", trees_bytes, offset)
    offset += struct.calcsize("<HI")
    if tree_version > FORMAT_VERSION:
        raise SerializationError(
            f"trees file version {tree_version} is newer than supported"
        )
    trees = []
    for _ in range(num_trees):
        if offset + 4 > len(trees_bytes):
            raise SerializationError("truncated trees file")
        (size,) = struct.unpack_from("<I", trees_bytes, offset)
        offset += 4
        if offset + size > len(trees_bytes):
            raise SerializationError("truncated trees file")
        trees.append(deserialize_tree(trees_bytes[offset : offset + size]))
        offset += size

    self_evaluation = None
    eval_path = directory / SELF_EVALUATION_FILENAME
    if eval_path.exists():
        self_evaluation = report_from_text(eval_path.read_text())

    validation_loss = fields.get("validation_loss")
    model = ForestModel(
        model_kind=fields["model_kind"],
        task=fields["task"],
        label=json.loads(fields["label"]),
        dataspec=spec,
        trees=trees,
        feature_indices=[spec.column_index(name) for name in fields["input_features"]],
        learner_key=json.loads(fields["learner"]),
        hyperparameters=fields["hp"],
        seed=int(fields["seed"]),
        num_trees_per_iteration=int(fields["num_trees_per_iteration"]),
        initial_predictions=np.array(fields["initial_predictions"]),
        self_evaluation=self_evaluation,
        validation_loss=None if validation_loss is None else float(validation_loss),
        format_version=version,
    )
    return model


# ---------------------------------------------------------------------------
# Human-readable summary (the `show_model` body).

def _truncate(lines: list[str], full: bool) -> list[str]:
    if full or len(lines) <= 8:
        return lines
    return lines[:4] + ["    ..."] + lines[-2:]


def format_model_summary(model: ForestModel, full: bool = False) -> str:
    spec = model.dataspec
    feature_names = [spec.columns[i].name for i in model.feature_indices]
    sections = [
        "\n".join(
            [
                f"Type: {json.dumps(model.model_kind)}",
                f"Task: {model.task}",
                f"Label: {json.dumps(model.label)}",
            ]
        ),
        f"Input Features ({len(feature_names)}):\n"
        + "\n".join(_truncate([f"    {n}" for n in feature_names], full)),
    ]

    for kind in ("NUM_AS_ROOT", "NUM_NODES"):
        ranked = model.variable_importances(kind)
        text = format_importances(kind, ranked)
        if not full:
            lines = text.splitlines()
            text = "\n".join([lines[0]] + _truncate(lines[1:], full))
        sections.append(text)

    counters = [f"Number of trees: {model.num_trees}"]
    counters.append(f"Total number of nodes: {sum(t.num_nodes for t in model.trees)}")
    if model.model_kind == GRADIENT_BOOSTED_TREES:
        loss_name = (
            "BINOMIAL_LOG_LIKELIHOOD" if model.n_classes == 2 else "MULTINOMIAL_LOG_LIKELIHOOD"
        )
        if model.task == "REGRESSION":
            loss_name = "SQUARED_ERROR"
        head = [f"Loss: {loss_name}"]
        if model.validation_loss is not None:
            head.append(f"Validation loss value: {model.validation_loss:.6g}")
        head.append(f"Number of trees per iteration: {model.num_trees_per_iteration}")
        counters = head + counters
    sections.append("\n".join(counters))

    sections.append(format_tree_statistics(tree_statistics(model.trees, spec)))
    return "\n\n".join(sections) + "\n"
