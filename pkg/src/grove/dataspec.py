"""Per-column semantics, statistics, and dictionaries inferred from raw data.

The dataspec is built in one pass over the example stream and is the contract
every other stage (encoding, training, inference, reports) works against.
"""

from __future__ import annotations

import enum
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import DataError

# Cell values treated as missing for every semantic.
MISSING_MARKERS = frozenset({"", "NA"})

# Reserved token for dictionary index 0 (out-of-dictionary values).
OOD_TOKEN = "<OOD>"

_BOOL_TOKENS = frozenset({"0", "1", "true", "false"})

DEFAULT_MIN_VOCAB_FREQUENCY = 5
DEFAULT_MAX_VOCAB_COUNT = 2000


class ColumnSemantic(enum.Enum):
    NUMERICAL = "NUMERICAL"
    CATEGORICAL = "CATEGORICAL"
    BOOLEAN = "BOOLEAN"


@dataclass(frozen=True)
class NumericalStats:
    mean: float
    min: float
    max: float
    sd: float


@dataclass
class ColumnSpec:
    """Semantics plus summary statistics of a single column.

    For categorical columns, ``dictionary`` maps index -> (token, frequency)
    with index 0 reserved for out-of-dictionary values; real tokens start at
    index 1 sorted by descending frequency then token.
    """

    name: str
    semantic: ColumnSemantic
    count_values: int = 0
    count_missing: int = 0
    numerical_stats: NumericalStats | None = None
    dictionary: list[tuple[str, int]] | None = None
    count_ood: int = 0
    manually_defined: bool = False
    _token_index: dict[str, int] | None = field(default=None, repr=False, compare=False)

    @property
    def vocab_size(self) -> int:
        return len(self.dictionary) if self.dictionary is not None else 0

    @property
    def missing_sentinel(self) -> int:
        # One past the last dictionary index: missing is distinct from OOD.
        return self.vocab_size

    def token_to_index(self, token: str) -> int:
        """Dictionary index of ``token``, 0 (OOD) when absent."""
        if self._token_index is None:
            self._token_index = {t: i for i, (t, _) in enumerate(self.dictionary or [])}
        return self._token_index.get(token, 0)

    def index_to_token(self, index: int) -> str:
        if index == self.missing_sentinel:
            return ""
        return self.dictionary[index][0]

    def validate(self, num_records: int) -> None:
        if self.count_values + self.count_missing != num_records:
            raise DataError(
                f"column '{self.name}': count_values ({self.count_values}) + "
                f"count_missing ({self.count_missing}) != num_records ({num_records})"
            )
        if (self.numerical_stats is not None) != (self.semantic is ColumnSemantic.NUMERICAL):
            raise DataError(f"column '{self.name}': numerical_stats presence inconsistent with semantic")
        if (self.dictionary is not None) != (self.semantic is ColumnSemantic.CATEGORICAL):
            raise DataError(f"column '{self.name}': dictionary presence inconsistent with semantic")
        if self.numerical_stats is not None:
            s = self.numerical_stats
            if not (s.min <= s.mean <= s.max) or s.sd < 0:
                raise DataError(f"column '{self.name}': inconsistent numerical stats {s}")
        if self.dictionary is not None:
            if not self.dictionary or self.dictionary[0][0] != OOD_TOKEN:
                raise DataError(f"column '{self.name}': dictionary index 0 must be the {OOD_TOKEN} slot")
            freqs = [f for _, f in self.dictionary[1:]]
            if any(a < b for a, b in zip(freqs, freqs[1:])):
                raise DataError(f"column '{self.name}': dictionary frequencies must be non-increasing")


@dataclass
class DataSpec:
    columns: list[ColumnSpec]
    num_records: int

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate column names: {dupes}")

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column_index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise DataError(
            f"unknown column '{name}'. Available columns: {self.column_names()}"
        )

    def column(self, name: str) -> ColumnSpec:
        return self.columns[self.column_index(name)]

    def validate(self) -> None:
        for c in self.columns:
            c.validate(self.num_records)


def _parse_finite(token: str) -> float | None:
    try:
        value = float(token)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def infer_column_semantic(
    raw_values: Sequence[str | None],
    override: ColumnSemantic | None = None,
    column_name: str = "",
) -> ColumnSemantic:
    """Infers the semantic of a column from its raw string values.

    Boolean wins when every non-missing value is in {0, 1, true, false}
    (case-insensitive); otherwise Numerical when everything parses as a
    finite number; otherwise Categorical. An explicit ``override`` wins
    unconditionally.
    """
    if override is not None:
        return override
    present = [v for v in raw_values if v is not None and v not in MISSING_MARKERS]
    if not present:
        name = f" '{column_name}'" if column_name else ""
        raise DataError(
            f"column{name} has only missing values, its semantic cannot be inferred. "
            "Possible solutions: (1) remove the column from the dataset, or "
            "(2) set its semantic manually with an override."
        )
    if all(v.lower() in _BOOL_TOKENS for v in present):
        return ColumnSemantic.BOOLEAN
    if all(_parse_finite(v) is not None for v in present):
        return ColumnSemantic.NUMERICAL
    return ColumnSemantic.CATEGORICAL


class _ColumnAccumulator:
    """Single-pass accumulator: token counts plus semantic eligibility."""

    __slots__ = ("tokens", "count_missing", "all_bool", "all_numeric")

    def __init__(self):
        self.tokens: Counter[str] = Counter()
        self.count_missing = 0
        self.all_bool = True
        self.all_numeric = True

    def add(self, raw: str) -> None:
        if raw in MISSING_MARKERS:
            self.count_missing += 1
            return
        self.tokens[raw] += 1
        if self.all_bool and raw.lower() not in _BOOL_TOKENS:
            self.all_bool = False
        if self.all_numeric and _parse_finite(raw) is None:
            self.all_numeric = False


def build_dataspec(
    column_names: Sequence[str],
    rows: Iterable[Sequence[str]],
    overrides: Mapping[str, ColumnSemantic] | None = None,
    min_vocab_frequency: int = DEFAULT_MIN_VOCAB_FREQUENCY,
    max_vocab_count: int = DEFAULT_MAX_VOCAB_COUNT,
) -> DataSpec:
    """Builds a DataSpec from a stream of string-valued records.

    One full pass accumulates per-column counts; statistics and dictionaries
    are then derived from the token counts, which makes the result invariant
    to the row order of the stream.
    """
    overrides = dict(overrides or {})
    if min_vocab_frequency <= 0 or max_vocab_count <= 0:
        raise DataError("min_vocab_frequency and max_vocab_count must be positive")
    unknown = sorted(set(overrides) - set(column_names))
    if unknown:
        raise DataError(
            f"semantic overrides for unknown columns {unknown}. "
            f"Available columns: {list(column_names)}"
        )

    accs = [_ColumnAccumulator() for _ in column_names]
    num_records = 0
    for row in rows:
        if len(row) != len(column_names):
            raise DataError(
                f"record {num_records + 1} has {len(row)} values but the header "
                f"declares {len(column_names)} columns"
            )
        for acc, raw in zip(accs, row):
            acc.add(raw)
        num_records += 1
    if num_records == 0:
        raise DataError("the example stream is empty, cannot build a dataspec")

    columns = []
    for name, acc in zip(column_names, accs):
        override = overrides.get(name)
        if acc.count_missing == num_records:
            # Reuse the all-missing error message from the inference routine.
            infer_column_semantic([], override=None, column_name=name)
        if override is not None:
            semantic = override
        elif acc.all_bool:
            semantic = ColumnSemantic.BOOLEAN
        elif acc.all_numeric:
            semantic = ColumnSemantic.NUMERICAL
        else:
            semantic = ColumnSemantic.CATEGORICAL

        spec = ColumnSpec(
            name=name,
            semantic=semantic,
            count_values=num_records - acc.count_missing,
            count_missing=acc.count_missing,
            manually_defined=override is not None,
        )
        if semantic is ColumnSemantic.NUMERICAL:
            spec.numerical_stats = _numerical_stats(name, acc.tokens)
        elif semantic is ColumnSemantic.CATEGORICAL:
            spec.dictionary, spec.count_ood = _build_dictionary(
                acc.tokens, min_vocab_frequency, max_vocab_count
            )
        columns.append(spec)

    spec = DataSpec(columns=columns, num_records=num_records)
    spec.validate()
    return spec


def _numerical_stats(name: str, tokens: Counter[str]) -> NumericalStats:
    count = 0
    total = 0.0
    total_sq = 0.0
    vmin = math.inf
    vmax = -math.inf
    # Sorted iteration keeps the accumulation order independent of row order.
    for token, freq in sorted(tokens.items()):
        value = _parse_finite(token)
        if value is None:
            raise DataError(
                f"column '{name}' is declared NUMERICAL but value '{token}' is not "
                "a finite number. Possible solutions: (1) fix the offending values, "
                "or (2) override the column semantic to CATEGORICAL."
            )
        count += freq
        total += freq * value
        total_sq += freq * value * value
        vmin = min(vmin, value)
        vmax = max(vmax, value)
    mean = total / count
    variance = max(total_sq / count - mean * mean, 0.0)
    return NumericalStats(mean=mean, min=vmin, max=vmax, sd=math.sqrt(variance))


def _build_dictionary(
    tokens: Counter[str], min_vocab_frequency: int, max_vocab_count: int
) -> tuple[list[tuple[str, int]], int]:
    kept = sorted(
        ((t, f) for t, f in tokens.items() if f >= min_vocab_frequency),
        key=lambda tf: (-tf[1], tf[0]),
    )[:max_vocab_count]
    count_ood = sum(tokens.values()) - sum(f for _, f in kept)
    return [(OOD_TOKEN, count_ood)] + kept, count_ood


# ---------------------------------------------------------------------------
# Report rendering.

_TERMINOLOGY = """\
Terminology:
    nas: Number of non-available (i.e. missing) values.
    ood: Out of dictionary.
    manually-defined: Attribute which type is manually defined by the user i.e. the type was not automatically inferred.
    tokenized: The attribute value is obtained through tokenization.
    has-dict: The attribute is attached to a string dictionary e.g. a categorical attribute stored as a string.
    vocab-size: Number of unique values."""


def _g(x: float) -> str:
    return f"{x:.6g}"


def _column_line(index: int, col: ColumnSpec, num_records: int) -> str:
    parts = [f'{index}: "{col.name}" {col.semantic.value}']
    if col.manually_defined:
        parts.append("manually-defined")
    if col.semantic is ColumnSemantic.NUMERICAL:
        s = col.numerical_stats
        parts.append(f"mean:{_g(s.mean)} min:{_g(s.min)} max:{_g(s.max)} sd:{_g(s.sd)}")
    elif col.semantic is ColumnSemantic.CATEGORICAL:
        parts.append(f"has-dict vocab-size:{col.vocab_size}")
        if col.count_ood == 0:
            parts.append("zero-ood-items")
        else:
            parts.append(f"num-oods:{col.count_ood} ({_g(100.0 * col.count_ood / num_records)}%)")
        if col.vocab_size > 1:
            token, freq = col.dictionary[1]
            parts.append(f'most-frequent:"{token}" {freq} ({_g(100.0 * freq / num_records)}%)')
    if col.count_missing:
        parts.append(f"nas:{col.count_missing} ({_g(100.0 * col.count_missing / num_records)}%)")
    return "    " + " ".join(parts)


def format_dataspec(spec: DataSpec) -> str:
    """Renders the human-readable dataspec report (the `show_dataspec` body)."""
    groups: dict[ColumnSemantic, list[tuple[int, ColumnSpec]]] = {}
    for i, col in enumerate(spec.columns):
        groups.setdefault(col.semantic, []).append((i, col))
    ordered = sorted(groups.items(), key=lambda kv: kv[0].value)

    lines = [
        f"Number of records: {spec.num_records}",
        f"Number of columns: {len(spec.columns)}",
        "",
        "Number of columns by type:",
    ]
    for semantic, cols in ordered:
        pct = _g(100.0 * len(cols) / len(spec.columns))
        lines.append(f"    {semantic.value}: {len(cols)} ({pct}%)")
    lines += ["", "Columns:", ""]
    for semantic, cols in ordered:
        pct = _g(100.0 * len(cols) / len(spec.columns))
        lines.append(f"{semantic.value}: {len(cols)} ({pct}%)")
        for i, col in sorted(cols, key=lambda ic: ic[1].name):
            lines.append(_column_line(i, col, spec.num_records))
        lines.append("")
    lines.append(_TERMINOLOGY)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Disk format: plain-text key-value file stored in the model directory.

_ITEM_RE = re.compile(r'^item \{ token: (".*") frequency: (\d+) \}$')


def dataspec_to_text(spec: DataSpec) -> str:
    lines = [f"num_records: {spec.num_records}"]
    for col in spec.columns:
        lines.append("column {")
        lines.append(f"  name: {json.dumps(col.name)}")
        lines.append(f"  semantic: {col.semantic.value}")
        lines.append(f"  count_values: {col.count_values}")
        lines.append(f"  count_missing: {col.count_missing}")
        lines.append(f"  count_ood: {col.count_ood}")
        lines.append(f"  manually_defined: {str(col.manually_defined).lower()}")
        if col.numerical_stats is not None:
            s = col.numerical_stats
            lines.append(f"  mean: {s.mean!r}")
            lines.append(f"  min: {s.min!r}")
            lines.append(f"  max: {s.max!r}")
            lines.append(f"  sd: {s.sd!r}")
        if col.dictionary is not None:
            for token, freq in col.dictionary:
                lines.append(f"  item {{ token: {json.dumps(token)} frequency: {freq} }}")
        lines.append("}")
    return "\n".join(lines) + "\n"


def dataspec_from_text(text: str) -> DataSpec:
    num_records = None
    columns: list[ColumnSpec] = []
    current: dict | None = None

    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.strip()
        if not line:
            continue
        if line == "column {":
            current = {"items": [], "stats": {}}
        elif line == "}":
            if current is None:
                raise DataError(f"dataspec line {lineno}: unexpected '}}'")
            columns.append(_column_from_fields(current, lineno))
            current = None
        elif current is not None and line.startswith("item {"):
            m = _ITEM_RE.match(line)
            if not m:
                raise DataError(f"dataspec line {lineno}: malformed dictionary item")
            current["items"].append((json.loads(m.group(1)), int(m.group(2))))
        else:
            key, sep, value = line.partition(": ")
            if not sep:
                raise DataError(f"dataspec line {lineno}: expected 'key: value'")
            if current is None:
                if key != "num_records":
                    raise DataError(f"dataspec line {lineno}: unknown top-level key '{key}'")
                num_records = int(value)
            elif key in ("mean", "min", "max", "sd"):
                current["stats"][key] = float(value)
            else:
                current[key] = value

    if num_records is None:
        raise DataError("dataspec file is missing 'num_records'")
    spec = DataSpec(columns=columns, num_records=num_records)
    spec.validate()
    return spec


def _column_from_fields(fields: dict, lineno: int) -> ColumnSpec:
    try:
        semantic = ColumnSemantic(fields["semantic"])
        col = ColumnSpec(
            name=json.loads(fields["name"]),
            semantic=semantic,
            count_values=int(fields["count_values"]),
            count_missing=int(fields["count_missing"]),
            count_ood=int(fields["count_ood"]),
            manually_defined=fields["manually_defined"] == "true",
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"dataspec column ending at line {lineno}: {exc}") from exc
    if semantic is ColumnSemantic.NUMERICAL:
        col.numerical_stats = NumericalStats(**fields["stats"])
    if semantic is ColumnSemantic.CATEGORICAL:
        col.dictionary = fields["items"]
    return col
