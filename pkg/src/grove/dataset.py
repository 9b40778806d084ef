"""Example streams and the immutable column-major dataset encoding.

Storage per semantic: numerical columns are float32 with NaN as missing;
categorical columns are int32 dictionary indices (0 = out-of-dictionary,
``vocab_size`` = missing); boolean columns are int8 with 2 = missing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dataspec import (
    MISSING_MARKERS,
    ColumnSemantic,
    DataSpec,
    build_dataspec,
)
from .errors import DataError

BOOLEAN_MISSING = 2
_TRUE_TOKENS = frozenset({"1", "true"})


@dataclass
class ColumnarDataset:
    """Immutable column-major dataset encoded against a DataSpec."""

    spec: DataSpec
    columns: list[np.ndarray]  # parallel to spec.columns
    num_rows: int

    def column_values(self, name: str) -> np.ndarray:
        return self.columns[self.spec.column_index(name)]

    def take(self, rows: np.ndarray) -> "ColumnarDataset":
        """New dataset holding the given rows (in the given order)."""
        return ColumnarDataset(
            spec=self.spec,
            columns=[c[rows] for c in self.columns],
            num_rows=len(rows),
        )

    def validate(self) -> None:
        for spec, values in zip(self.spec.columns, self.columns):
            if len(values) != self.num_rows:
                raise DataError(f"column '{spec.name}' has {len(values)} values, expected {self.num_rows}")
            if spec.semantic is ColumnSemantic.CATEGORICAL and len(values):
                if values.min() < 0 or values.max() > spec.missing_sentinel:
                    raise DataError(f"column '{spec.name}' holds out-of-range categorical codes")


@dataclass
class FoldAssignment:
    """Deterministic assignment of rows to k cross-validation folds."""

    fold_of_row: np.ndarray
    k: int
    seed: int

    def rows_in_fold(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_row == fold)

    def rows_not_in_fold(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_row != fold)


def assign_folds(num_rows: int, k: int, seed: int) -> FoldAssignment:
    """Shuffled block assignment; fold sizes differ by at most one row."""
    if k <= 0:
        raise DataError(f"number of folds must be positive, got {k}")
    if k > num_rows:
        raise DataError(
            f"cannot split {num_rows} rows into {k} folds. "
            "Possible solutions: (1) reduce the number of folds, or (2) use more data."
        )
    perm = np.random.default_rng(seed).permutation(num_rows)
    fold_of_row = np.empty(num_rows, dtype=np.int32)
    for fold in range(k):
        fold_of_row[perm[fold * num_rows // k : (fold + 1) * num_rows // k]] = fold
    return FoldAssignment(fold_of_row=fold_of_row, k=k, seed=seed)


# ---------------------------------------------------------------------------
# Dataset path syntax: "<format>:<path>", as used by the CLI flags.

def split_dataset_path(path_spec: str) -> tuple[str, str]:
    prefix, sep, path = path_spec.partition(":")
    if not sep or not prefix or not path:
        raise DataError(
            f"malformed dataset path '{path_spec}'; expected '<format>:<path>' e.g. 'csv:train.csv'"
        )
    if prefix not in _READERS:
        raise DataError(
            f"unsupported dataset format '{prefix}' in '{path_spec}'. "
            f"Supported formats: {sorted(_READERS)}"
        )
    return prefix, path


def read_dataset(path_spec: str, spec: DataSpec | None = None) -> ColumnarDataset:
    prefix, path = split_dataset_path(path_spec)
    return _READERS[prefix](path, spec)


def write_dataset(dataset: ColumnarDataset, path_spec: str, extra_columns=None) -> None:
    prefix, path = split_dataset_path(path_spec)
    _WRITERS[prefix](dataset, path, extra_columns)


# ---------------------------------------------------------------------------
# CSV reader/writer.

def read_csv(
    path: str,
    spec: DataSpec | None = None,
    optional_columns: set[str] | None = None,
) -> ColumnarDataset:
    """Reads an RFC-4180 CSV with a header row, encoding values per ``spec``.

    When ``spec`` is None it is inferred from the file first; the result is
    available as ``dataset.spec``. Spec columns listed in ``optional_columns``
    may be absent from the file and are then encoded as all-missing (used to
    run prediction on unlabeled data).
    """
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"'{path}' is empty, expected a CSV header row")
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read '{path}': {exc}") from exc

    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(
                f"'{path}' record {i + 1} has {len(row)} values but the header "
                f"declares {len(header)} columns"
            )

    if spec is None:
        spec = build_dataspec(header, rows)
    else:
        optional = optional_columns or set()
        missing = [
            c.name for c in spec.columns if c.name not in header and c.name not in optional
        ]
        extra = [name for name in header if name not in {c.name for c in spec.columns}]
        if missing or extra:
            raise DataError(
                f"'{path}' does not match the dataspec: missing columns {missing}, "
                f"unexpected columns {extra}"
            )
    column_of_name = {name: j for j, name in enumerate(header)}

    columns = []
    for col in spec.columns:
        if col.name in column_of_name:
            raw = [row[column_of_name[col.name]] for row in rows]
        else:
            raw = [""] * len(rows)
        columns.append(_encode_column(col, raw, path))
    return ColumnarDataset(spec=spec, columns=columns, num_rows=len(rows))


def _encode_column(col, raw: list[str], path: str) -> np.ndarray:
    if col.semantic is ColumnSemantic.NUMERICAL:
        try:
            values = np.array(
                [np.nan if v in MISSING_MARKERS else float(v) for v in raw],
                dtype=np.float32,
            )
        except ValueError:
            for i, v in enumerate(raw):
                if v not in MISSING_MARKERS:
                    try:
                        float(v)
                    except ValueError:
                        raise DataError(
                            f"'{path}': value '{v}' at row {i + 1} of NUMERICAL column "
                            f"'{col.name}' is not a number. Possible solutions: (1) fix "
                            "the value, or (2) declare the column CATEGORICAL."
                        ) from None
            raise
        return values
    if col.semantic is ColumnSemantic.CATEGORICAL:
        sentinel = col.missing_sentinel
        lookup = col.token_to_index
        return np.array(
            [sentinel if v in MISSING_MARKERS else lookup(v) for v in raw],
            dtype=np.int32,
        )
    # Boolean.
    return np.array(
        [
            BOOLEAN_MISSING
            if v in MISSING_MARKERS
            else np.int8(v.lower() in _TRUE_TOKENS)
            for v in raw
        ],
        dtype=np.int8,
    )


def _format_numerical(value: float) -> str:
    if math.isnan(value):
        return ""
    return f"{value:.9g}"


def write_csv(dataset: ColumnarDataset, path: str, extra_columns=None) -> None:
    """Writes the dataset (plus optional named real-valued columns) as CSV."""
    extra_columns = dict(extra_columns or {})
    for name, values in extra_columns.items():
        if len(values) != dataset.num_rows:
            raise DataError(
                f"extra column '{name}' has {len(values)} values, expected {dataset.num_rows}"
            )
    decoders = []
    for col, values in zip(dataset.spec.columns, dataset.columns):
        if col.semantic is ColumnSemantic.NUMERICAL:
            decoders.append(lambda i, v=values: _format_numerical(float(v[i])))
        elif col.semantic is ColumnSemantic.CATEGORICAL:
            decoders.append(lambda i, v=values, c=col: c.index_to_token(int(v[i])))
        else:
            decoders.append(lambda i, v=values: "" if v[i] == BOOLEAN_MISSING else str(int(v[i])))
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(dataset.spec.column_names() + list(extra_columns))
            for i in range(dataset.num_rows):
                row = [decode(i) for decode in decoders]
                row += [_format_numerical(float(v[i])) for v in extra_columns.values()]
                writer.writerow(row)
    except OSError as exc:
        raise DataError(f"cannot write '{path}': {exc}") from exc


_READERS = {"csv": read_csv}
_WRITERS = {"csv": write_csv}
