"""Command-line surface: seven subcommands over model directories and
``csv:`` datasets.

Exit codes: 0 success, 2 usage error, 3 data error, 4 training error.
"""

from __future__ import annotations

import argparse
import csv as csv_module
import difflib
import io
import json
import sys

import numpy as np

from . import engines
from .dataset import read_dataset, split_dataset_path
from .dataspec import dataspec_from_text, dataspec_to_text, format_dataspec
from .errors import DataError, GroveError, SerializationError, TrainingError, UsageError
from .evaluation import evaluate_classification, evaluate_regression, format_evaluation
from .learners import DEFAULT_SEED, TrainingConfig, make_learner
from .meta import SearchDimension, SearchSpace, TunedLearner
from .model import format_model_summary, load_model, save_model

_EXIT_CODES = {
    UsageError: 2,
    DataError: 3,
    SerializationError: 3,
    TrainingError: 4,
}

_TOP_LEVEL_KEYS = ("task", "label", "learner", "features", "seed", "template")
_PREFIX_KEYS = ("hp.", "disable_error.", "tuner.")


def _unquote(value: str) -> str:
    value = value.strip()
    if value.startswith('"') and value.endswith('"') and len(value) >= 2:
        return json.loads(value)
    return value


def _parse_name_list(value: str) -> list[str]:
    return [name.strip().strip('"') for name in next(csv_module.reader([value]))]


def parse_config(path: str) -> TrainingConfig:
    """Parses a plain-text `key: value` training configuration file.

    Hyper-parameters nest under ``hp.<name>``, error-check overrides under
    ``disable_error.<code>``, and tuner settings under ``tuner.`` keys
    (``tuner.num_trials``, ``tuner.metric``, ``tuner.search.<name>``).
    """
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise DataError(f"cannot read training configuration '{path}': {exc}") from exc

    fields: dict = {"hyperparameters": {}, "error_overrides": set(), "tuner": {}}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        value = value.strip()
        if not sep or not value:
            raise UsageError(
                f"{path}:{lineno}: expected 'key: value', got '{raw_line.strip()}'"
            )
        if key.startswith("hp."):
            fields["hyperparameters"][key[3:]] = _unquote(value)
        elif key.startswith("disable_error."):
            if _unquote(value).lower() == "true":
                fields["error_overrides"].add(key[len("disable_error."):])
        elif key.startswith("tuner."):
            fields["tuner"][key[len("tuner."):]] = _unquote(value)
        elif key in _TOP_LEVEL_KEYS:
            fields[key] = _unquote(value)
        else:
            candidates = list(_TOP_LEVEL_KEYS) + [
                prefix + "<name>" for prefix in _PREFIX_KEYS
            ]
            close = difflib.get_close_matches(key, _TOP_LEVEL_KEYS, n=1)
            hint = f" Did you mean '{close[0]}'?" if close else ""
            raise UsageError(
                f"{path}:{lineno}: unknown configuration key '{key}'.{hint} "
                f"Valid keys: {candidates}"
            )

    for required in ("task", "label", "learner"):
        if required not in fields:
            raise UsageError(
                f"the training configuration '{path}' is missing the required "
                f"'{required}' key"
            )
    return TrainingConfig(
        task=fields["task"],
        label=fields["label"],
        learner=fields["learner"],
        features=_parse_name_list(fields["features"]) if "features" in fields else None,
        hyperparameters=fields["hyperparameters"],
        seed=int(fields["seed"]) if "seed" in fields else DEFAULT_SEED,
        error_overrides=fields["error_overrides"],
        template=fields.get("template"),
        tuner=fields["tuner"] or None,
    )


def format_config(config: TrainingConfig) -> str:
    """Canonical text form of a training configuration (parse round-trips)."""
    lines = [
        f"task: {config.task}",
        f"label: {json.dumps(config.label)}",
        f"learner: {json.dumps(config.learner)}",
        f"seed: {config.seed}",
    ]
    if config.features is not None:
        lines.append("features: " + ",".join(json.dumps(f) for f in config.features))
    if config.template:
        lines.append(f"template: {json.dumps(config.template)}")
    for key in sorted(config.hyperparameters):
        value = config.hyperparameters[key]
        if isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"hp.{key}: {value}")
    for code in sorted(config.error_overrides):
        lines.append(f"disable_error.{code}: true")
    for key in sorted(config.tuner or {}):
        lines.append(f"tuner.{key}: {config.tuner[key]}")
    return "\n".join(lines) + "\n"


def _tuner_space(config: TrainingConfig) -> SearchSpace | None:
    """Search dimensions from `tuner.search.<hp>` keys, None for the stock space."""
    from .learners import LEARNER_DEFAULTS

    defaults = LEARNER_DEFAULTS[config.learner]
    dims = []
    for key, value in sorted((config.tuner or {}).items()):
        if not key.startswith("search."):
            continue
        hp_name = key[len("search."):]
        if hp_name not in defaults:
            raise UsageError(
                f"tuner search key '{hp_name}' is not a hyper-parameter of "
                f"learner '{config.learner}'. Valid keys: {sorted(defaults)}"
            )
        tokens = value.split()
        if "," in value:
            dims.append(SearchDimension(hp_name, ("cat", value.split(","))))
        elif len(tokens) == 2:
            lo, hi = float(tokens[0]), float(tokens[1])
            if isinstance(defaults[hp_name], int) and not isinstance(defaults[hp_name], bool):
                dims.append(SearchDimension(hp_name, ("int", int(lo), int(hi))))
            else:
                dims.append(SearchDimension(hp_name, ("real", lo, hi)))
        else:
            raise UsageError(
                f"malformed tuner search domain '{value}' for '{hp_name}'; "
                "expected 'lo hi' or 'a,b,c'"
            )
    return SearchSpace(dims) if dims else None


# ---------------------------------------------------------------------------
# Subcommand handlers.

def _cmd_infer_dataspec(args, out) -> None:
    dataset = read_dataset(args.dataset)
    with open(args.output, "w") as f:
        f.write(dataspec_to_text(dataset.spec))
    print(
        f"Dataspec with {len(dataset.spec.columns)} columns "
        f"({dataset.spec.num_records} records) written to {args.output}",
        file=out,
    )


def _cmd_show_dataspec(args, out) -> None:
    with open(args.dataspec) as f:
        spec = dataspec_from_text(f.read())
    print(format_dataspec(spec), end="", file=out)


def _load_dataspec_or_infer(args, out):
    if args.dataspec:
        with open(args.dataspec) as f:
            return dataspec_from_text(f.read())
    dataset = read_dataset(args.dataset)
    print(
        f"No dataspec provided: column semantics were inferred from {args.dataset}:",
        file=out,
    )
    for col in dataset.spec.columns:
        print(f"    {col.name}: {col.semantic.value}", file=out)
    print(
        "Pass --dataspec to override a wrongly inferred semantic.",
        file=out,
    )
    return dataset.spec


def _cmd_train(args, out) -> None:
    config = parse_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.num_threads is not None:
        config.num_threads = args.num_threads
    spec = _load_dataspec_or_infer(args, out)
    dataset = read_dataset(args.dataset, spec)

    learner = make_learner(config)
    if config.template:
        learner, resolved = learner.with_template(config.template)
        print(f"Applied hyper-parameter template {resolved}", file=out)
    if config.tuner:
        learner = TunedLearner(
            learner,
            search_space=_tuner_space(config),
            num_trials=int(config.tuner.get("num_trials", 300)),
            metric=str(config.tuner.get("metric", "LOGLOSS")),
            seed=int(config.tuner.get("seed", config.seed)),
        )
        print(
            f"Tuning with {learner.num_trials} random trials "
            f"scored by {learner.metric}",
            file=out,
        )
    model = learner.train(dataset)
    save_model(model, args.output)
    print(
        f"Model trained on {dataset.num_rows} examples "
        f"({model.num_trees} trees) and written to {args.output}",
        file=out,
    )
    if model.self_evaluation is not None:
        report = model.self_evaluation
        if report.accuracy is not None:
            print(
                f"Self-evaluation ({report.evaluation_source}): "
                f"accuracy {report.accuracy:.6g} logloss {report.logloss:.6g}",
                file=out,
            )
        elif report.rmse is not None:
            print(
                f"Self-evaluation ({report.evaluation_source}): "
                f"rmse {report.rmse:.6g} mae {report.mae:.6g}",
                file=out,
            )


def _cmd_show_model(args, out) -> None:
    model = load_model(args.model)
    print(format_model_summary(model, full=args.full), end="", file=out)


def _cmd_evaluate(args, out) -> None:
    model = load_model(args.model)
    dataset = read_dataset(args.dataset, model.dataspec)
    predictions = model.predict(dataset)
    labels = dataset.column_values(model.label)
    if model.task == "CLASSIFICATION":
        if (labels == model.label_spec.missing_sentinel).any():
            raise DataError(
                f"the evaluation dataset has missing '{model.label}' labels; "
                "every example must be labeled to be evaluated."
            )
        report = evaluate_classification(
            predictions, labels.astype(np.int64), model.label_spec,
            num_bootstrap=args.num_bootstrap,
        )
    else:
        report = evaluate_regression(predictions, labels, model.label)
    print(format_evaluation(report), end="", file=out)


def _cmd_predict(args, out) -> None:
    from .dataset import read_csv

    model = load_model(args.model)
    # Prediction datasets may omit the label column.
    _, path = split_dataset_path(args.dataset)
    dataset = read_csv(path, model.dataspec, optional_columns={model.label})
    predictions = model.predict(dataset)

    out_prefix, out_path = split_dataset_path(args.output)
    if model.task == "CLASSIFICATION":
        header = [
            f"{model.label}_{token}" for token, _ in model.label_spec.dictionary[1:]
        ]
        rows = predictions
    else:
        header = [model.label]
        rows = predictions[:, None]
    try:
        with open(out_path, "w", newline="") as f:
            writer = csv_module.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([f"{v:.9g}" for v in row])
    except OSError as exc:
        raise DataError(f"cannot write '{out_path}': {exc}") from exc
    print(f"{len(rows)} predictions written to {args.output}", file=out)


def _cmd_benchmark_inference(args, out) -> None:
    model = load_model(args.model)
    dataset = read_dataset(args.dataset, model.dataspec)
    print(
        engines.benchmark_inference(
            model, dataset, batch_size=args.batch_size, num_runs=args.num_runs
        ),
        end="",
        file=out,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grove",
        description="Decision-forests training, evaluation, and serving toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("infer_dataspec", help="detect column semantics of a dataset")
    s.add_argument("--dataset", required=True, help="dataset path, e.g. csv:train.csv")
    s.add_argument("--output", required=True, help="output dataspec file")
    s.set_defaults(handler=_cmd_infer_dataspec)

    s = sub.add_parser("show_dataspec", help="print a dataspec in readable form")
    s.add_argument("--dataspec", required=True)
    s.set_defaults(handler=_cmd_show_dataspec)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config", required=True, help="training configuration file")
    s.add_argument("--output", required=True, help="output model directory")
    s.add_argument("--dataspec", help="dataspec file (inferred when omitted)")
    s.add_argument("--seed", type=int, help="training seed (overrides the config)")
    s.add_argument("--num_threads", type=int, help="worker processes (default: cores, max 20)")
    s.set_defaults(handler=_cmd_train)

    s = sub.add_parser("show_model", help="print model structure and importances")
    s.add_argument("--model", required=True)
    s.add_argument("--full", action="store_true", help="do not truncate long lists")
    s.set_defaults(handler=_cmd_show_model)

    s = sub.add_parser("evaluate", help="evaluate a model on a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--num_bootstrap", type=int, default=2000)
    s.set_defaults(handler=_cmd_evaluate)

    s = sub.add_parser("predict", help="write model predictions for a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--output", required=True, help="predictions path, e.g. csv:out.csv")
    s.set_defaults(handler=_cmd_predict)

    s = sub.add_parser("benchmark_inference", help="time the inference engines")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--batch_size", type=int, default=100)
    s.add_argument("--num_runs", type=int, default=20)
    s.set_defaults(handler=_cmd_benchmark_inference)
    return parser


def run(argv: list[str], out=None) -> int:
    """Runs one CLI invocation; returns the process exit code."""
    out = out if out is not None else sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.handler(args, out)
    except GroveError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        for klass, code in _EXIT_CODES.items():
            if isinstance(exc, klass):
                return code
        return 1
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
