"""Decision-tree structures, condition evaluation, and tree IO.

Conditions store ``na_value``, the branch taken when the tested value is
missing, so inference needs no imputation state. The positive branch is
taken when the condition holds.

Depth convention: edge depth, root at 0. A tree trained with ``max_depth=d``
has leaves at edge depth <= d - 1 (so at most 2**d - 1 nodes).
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from .dataspec import ColumnSemantic, DataSpec
from .errors import SerializationError, UsageError
from .dataset import BOOLEAN_MISSING, ColumnarDataset

SERIALIZATION_MAGIC = b"GRVT"
SERIALIZATION_VERSION = 1


# ---------------------------------------------------------------------------
# Conditions.

@dataclass
class HigherCondition:
    """value >= threshold on a numerical attribute."""

    attribute: int
    threshold: float
    na_value: bool = False


@dataclass
class ContainsBitmapCondition:
    """Categorical value's dictionary index is set in ``mask``."""

    attribute: int
    mask: np.ndarray  # bool, length = dictionary size
    na_value: bool = False


@dataclass
class ContainsCondition:
    """Categorical value's dictionary index is in the sorted ``items`` list."""

    attribute: int
    items: tuple[int, ...]
    na_value: bool = False


@dataclass
class ObliqueCondition:
    """sum(weights * values) >= threshold over numerical attributes."""

    attributes: tuple[int, ...]
    weights: tuple[float, ...]
    threshold: float
    na_value: bool = False

    def __post_init__(self):
        if len(self.attributes) != len(self.weights):
            raise UsageError("oblique condition attributes and weights must have the same length")


@dataclass
class BooleanIsCondition:
    """Boolean attribute is true."""

    attribute: int
    na_value: bool = False


Condition = Union[
    HigherCondition,
    ContainsBitmapCondition,
    ContainsCondition,
    ObliqueCondition,
    BooleanIsCondition,
]


def check_condition_semantics(condition: Condition, spec: DataSpec) -> None:
    """Raises when a condition variant does not match its column's semantic."""

    def expect(attribute: int, semantic: ColumnSemantic):
        actual = spec.columns[attribute].semantic
        if actual is not semantic:
            raise UsageError(
                f"{type(condition).__name__} tests column '{spec.columns[attribute].name}' "
                f"which is {actual.value}, expected {semantic.value}"
            )

    if isinstance(condition, HigherCondition):
        expect(condition.attribute, ColumnSemantic.NUMERICAL)
    elif isinstance(condition, (ContainsBitmapCondition, ContainsCondition)):
        expect(condition.attribute, ColumnSemantic.CATEGORICAL)
        if isinstance(condition, ContainsBitmapCondition):
            vocab = spec.columns[condition.attribute].vocab_size
            if len(condition.mask) != vocab:
                raise UsageError(
                    f"bitmap length {len(condition.mask)} != dictionary size {vocab} "
                    f"of column '{spec.columns[condition.attribute].name}'"
                )
    elif isinstance(condition, ObliqueCondition):
        for attribute in condition.attributes:
            expect(attribute, ColumnSemantic.NUMERICAL)
    elif isinstance(condition, BooleanIsCondition):
        expect(condition.attribute, ColumnSemantic.BOOLEAN)
    else:
        raise UsageError(f"unknown condition type {type(condition).__name__}")


# ---------------------------------------------------------------------------
# Leaf payloads.

@dataclass
class ClassDistribution:
    """Per-class training example counts at a leaf."""

    counts: np.ndarray  # float64, one entry per real class

    @property
    def count(self) -> float:
        return float(self.counts.sum())

    def probabilities(self) -> np.ndarray:
        total = self.counts.sum()
        if total <= 0:
            return np.full(len(self.counts), 1.0 / len(self.counts))
        return self.counts / total


@dataclass
class RegressionValue:
    value: float
    count: float = 0.0


@dataclass
class GbtLogit:
    value: float
    count: float = 0.0


LeafPayload = Union[ClassDistribution, RegressionValue, GbtLogit]


# ---------------------------------------------------------------------------
# Nodes and trees.

@dataclass
class Leaf:
    payload: LeafPayload


@dataclass
class InternalNode:
    condition: Condition
    positive_child: "TreeNode"
    negative_child: "TreeNode"


TreeNode = Union[Leaf, InternalNode]


class DecisionTree:
    """A tree plus cached structural counters."""

    def __init__(self, root: TreeNode):
        self.root = root
        num_nodes = 0
        num_leaves = 0
        max_depth = 0
        for node, depth in walk(root):
            num_nodes += 1
            max_depth = max(max_depth, depth)
            if isinstance(node, Leaf):
                num_leaves += 1
        self.num_nodes = num_nodes
        self.num_leaves = num_leaves
        self.max_depth = max_depth

    def leaves(self) -> list[Leaf]:
        """Leaves in canonical order (negative child first, depth first)."""
        return [node for node, _ in walk(self.root) if isinstance(node, Leaf)]


def walk(root: TreeNode) -> Iterator[tuple[TreeNode, int]]:
    """Depth-first traversal, negative child before positive child."""
    stack = [(root, 0)]
    while stack:
        node, depth = stack.pop()
        yield node, depth
        if isinstance(node, InternalNode):
            stack.append((node.positive_child, depth + 1))
            stack.append((node.negative_child, depth + 1))


# ---------------------------------------------------------------------------
# Example views and condition evaluation.

class ExampleView:
    """Read-only view of one dataset row for condition evaluation."""

    __slots__ = ("dataset", "row")

    def __init__(self, dataset: ColumnarDataset, row: int):
        self.dataset = dataset
        self.row = row

    def value(self, attribute: int):
        return self.dataset.columns[attribute][self.row]

    def is_missing(self, attribute: int) -> bool:
        col = self.dataset.spec.columns[attribute]
        v = self.dataset.columns[attribute][self.row]
        if col.semantic is ColumnSemantic.NUMERICAL:
            return bool(np.isnan(v))
        if col.semantic is ColumnSemantic.CATEGORICAL:
            return int(v) == col.missing_sentinel
        return int(v) == BOOLEAN_MISSING


class ArrayExample:
    """Example backed by a plain value list, for hand-built trees in tests."""

    def __init__(self, values, missing=None):
        self.values = values
        self.missing = missing or [False] * len(values)

    def value(self, attribute: int):
        return self.values[attribute]

    def is_missing(self, attribute: int) -> bool:
        return bool(self.missing[attribute])


def eval_condition(condition: Condition, example) -> bool:
    """Evaluates a condition on an example; missing values route to na_value."""
    if isinstance(condition, HigherCondition):
        if example.is_missing(condition.attribute):
            return condition.na_value
        return float(example.value(condition.attribute)) >= condition.threshold
    if isinstance(condition, ContainsBitmapCondition):
        if example.is_missing(condition.attribute):
            return condition.na_value
        return bool(condition.mask[int(example.value(condition.attribute))])
    if isinstance(condition, ContainsCondition):
        if example.is_missing(condition.attribute):
            return condition.na_value
        return int(example.value(condition.attribute)) in condition.items
    if isinstance(condition, ObliqueCondition):
        total = 0.0
        for attribute, weight in zip(condition.attributes, condition.weights):
            if example.is_missing(attribute):
                return condition.na_value
            total += weight * float(example.value(attribute))
        return total >= condition.threshold
    if isinstance(condition, BooleanIsCondition):
        if example.is_missing(condition.attribute):
            return condition.na_value
        return int(example.value(condition.attribute)) == 1
    raise UsageError(f"unknown condition type {type(condition).__name__}")


def predict_tree(tree: DecisionTree, example) -> LeafPayload:
    """Single-example inference: iterated condition evaluation from the root."""
    node = tree.root
    while isinstance(node, InternalNode):
        if eval_condition(node.condition, example):
            node = node.positive_child
        else:
            node = node.negative_child
    return node.payload


# ---------------------------------------------------------------------------
# Serialization: magic, version, node count, preorder records
# (node, negative subtree, positive subtree).

_LEAF_CLASSDIST = 0
_LEAF_REGRESSION = 1
_LEAF_LOGIT = 2
_COND_HIGHER = 10
_COND_BITMAP = 11
_COND_CONTAINS = 12
_COND_OBLIQUE = 13
_COND_BOOLEAN = 14


def serialize_tree(tree: DecisionTree) -> bytes:
    out = [
        SERIALIZATION_MAGIC,
        struct.pack("<HI", SERIALIZATION_VERSION, tree.num_nodes),
    ]
    _write_node(tree.root, out)
    return b"".join(out)


def _write_node(node: TreeNode, out: list[bytes]) -> None:
    if isinstance(node, Leaf):
        payload = node.payload
        if isinstance(payload, ClassDistribution):
            out.append(struct.pack("<BI", _LEAF_CLASSDIST, len(payload.counts)))
            out.append(np.asarray(payload.counts, dtype="<f8").tobytes())
        elif isinstance(payload, RegressionValue):
            out.append(struct.pack("<Bdd", _LEAF_REGRESSION, payload.value, payload.count))
        else:
            out.append(struct.pack("<Bdd", _LEAF_LOGIT, payload.value, payload.count))
        return
    cond = node.condition
    if isinstance(cond, HigherCondition):
        out.append(struct.pack("<BBId", _COND_HIGHER, cond.na_value, cond.attribute, cond.threshold))
    elif isinstance(cond, ContainsBitmapCondition):
        packed = np.packbits(np.asarray(cond.mask, dtype=bool), bitorder="little").tobytes()
        out.append(struct.pack("<BBII", _COND_BITMAP, cond.na_value, cond.attribute, len(cond.mask)))
        out.append(packed)
    elif isinstance(cond, ContainsCondition):
        out.append(struct.pack("<BBII", _COND_CONTAINS, cond.na_value, cond.attribute, len(cond.items)))
        out.append(struct.pack(f"<{len(cond.items)}I", *cond.items))
    elif isinstance(cond, ObliqueCondition):
        k = len(cond.attributes)
        out.append(struct.pack("<BBI", _COND_OBLIQUE, cond.na_value, k))
        out.append(struct.pack(f"<{k}I", *cond.attributes))
        out.append(struct.pack(f"<{k}d", *cond.weights))
        out.append(struct.pack("<d", cond.threshold))
    elif isinstance(cond, BooleanIsCondition):
        out.append(struct.pack("<BBI", _COND_BOOLEAN, cond.na_value, cond.attribute))
    else:
        raise SerializationError(f"cannot serialize condition type {type(cond).__name__}")
    _write_node(node.negative_child, out)
    _write_node(node.positive_child, out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise SerializationError(
                "truncated tree stream: expected "
                f"{size} more bytes at offset {self.offset}, have {len(self.data) - self.offset}"
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def deserialize_tree(data: bytes) -> DecisionTree:
    cursor = _Cursor(data)
    magic = cursor.read(len(SERIALIZATION_MAGIC))
    if magic != SERIALIZATION_MAGIC:
        raise SerializationError("not a serialized tree (bad magic bytes)")
    version, num_nodes = cursor.unpack("<HI")
    if version > SERIALIZATION_VERSION:
        raise SerializationError(
            f"tree format version {version} is newer than the supported "
            f"version {SERIALIZATION_VERSION}; upgrade the library to read it"
        )
    tree = DecisionTree(_read_node(cursor))
    if tree.num_nodes != num_nodes:
        raise SerializationError(
            f"corrupt tree stream: header declares {num_nodes} nodes, found {tree.num_nodes}"
        )
    return tree


def _read_node(cursor: _Cursor) -> TreeNode:
    (kind,) = cursor.unpack("<B")
    if kind == _LEAF_CLASSDIST:
        (n,) = cursor.unpack("<I")
        counts = np.frombuffer(cursor.read(8 * n), dtype="<f8").copy()
        return Leaf(ClassDistribution(counts))
    if kind == _LEAF_REGRESSION:
        value, count = cursor.unpack("<dd")
        return Leaf(RegressionValue(value, count))
    if kind == _LEAF_LOGIT:
        value, count = cursor.unpack("<dd")
        return Leaf(GbtLogit(value, count))
    if kind in (_COND_HIGHER, _COND_BITMAP, _COND_CONTAINS, _COND_OBLIQUE, _COND_BOOLEAN):
        (na_value,) = cursor.unpack("<B")
        if kind == _COND_HIGHER:
            attribute, threshold = cursor.unpack("<Id")
            cond = HigherCondition(attribute, threshold, bool(na_value))
        elif kind == _COND_BITMAP:
            attribute, nbits = cursor.unpack("<II")
            packed = np.frombuffer(cursor.read((nbits + 7) // 8), dtype=np.uint8)
            mask = np.unpackbits(packed, count=nbits, bitorder="little").astype(bool)
            cond = ContainsBitmapCondition(attribute, mask, bool(na_value))
        elif kind == _COND_CONTAINS:
            attribute, n = cursor.unpack("<II")
            items = cursor.unpack(f"<{n}I")
            cond = ContainsCondition(attribute, items, bool(na_value))
        elif kind == _COND_OBLIQUE:
            (n,) = cursor.unpack("<I")
            attributes = cursor.unpack(f"<{n}I")
            weights = cursor.unpack(f"<{n}d")
            (threshold,) = cursor.unpack("<d")
            cond = ObliqueCondition(attributes, weights, threshold, bool(na_value))
        else:
            (attribute,) = cursor.unpack("<I")
            cond = BooleanIsCondition(attribute, bool(na_value))
        negative = _read_node(cursor)
        positive = _read_node(cursor)
        return InternalNode(cond, positive_child=positive, negative_child=negative)
    raise SerializationError(
        f"unknown node kind {kind}; the stream may come from a newer format version"
    )


# ---------------------------------------------------------------------------
# Structural statistics and variable importances.

@dataclass
class StatsReport:
    nodes_per_tree: list[int]
    leaf_depths: list[int]
    leaf_example_counts: list[float]
    attribute_in_nodes: Counter
    attribute_as_root: Counter
    attribute_depth1: Counter
    condition_types: Counter
    spec: DataSpec = field(repr=False)


def _condition_attributes(condition: Condition) -> tuple[int, ...]:
    if isinstance(condition, ObliqueCondition):
        return tuple(condition.attributes)
    return (condition.attribute,)


def tree_statistics(trees: list[DecisionTree], spec: DataSpec) -> StatsReport:
    """Structural statistics over a forest, rendered by ``format_tree_statistics``."""
    if not trees:
        raise UsageError("cannot compute statistics of an empty forest")
    report = StatsReport(
        nodes_per_tree=[t.num_nodes for t in trees],
        leaf_depths=[],
        leaf_example_counts=[],
        attribute_in_nodes=Counter(),
        attribute_as_root=Counter(),
        attribute_depth1=Counter(),
        condition_types=Counter(),
        spec=spec,
    )
    for tree in trees:
        for node, depth in walk(tree.root):
            if isinstance(node, Leaf):
                report.leaf_depths.append(depth)
                report.leaf_example_counts.append(node.payload.count)
                continue
            report.condition_types[type(node.condition).__name__] += 1
            for attribute in _condition_attributes(node.condition):
                report.attribute_in_nodes[attribute] += 1
                if depth == 0:
                    report.attribute_as_root[attribute] += 1
                if depth <= 1:
                    report.attribute_depth1[attribute] += 1
    return report


IMPORTANCE_KINDS = ("NUM_AS_ROOT", "NUM_NODES")


def variable_importance(
    trees: list[DecisionTree], spec: DataSpec, kind: str
) -> list[tuple[str, float]]:
    """Ranked (column name, score) pairs; ties broken by column index."""
    if kind not in IMPORTANCE_KINDS:
        raise UsageError(f"unknown importance kind '{kind}'. Available kinds: {IMPORTANCE_KINDS}")
    scores: Counter = Counter()
    for tree in trees:
        for node, depth in walk(tree.root):
            if not isinstance(node, InternalNode):
                continue
            if kind == "NUM_AS_ROOT" and depth != 0:
                continue
            for attribute in _condition_attributes(node.condition):
                scores[attribute] += 1
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(spec.columns[a].name, float(s)) for a, s in ranked]


def _g(x: float) -> str:
    return f"{x:.6g}"


def format_histogram(title: str, values) -> str:
    """Text histogram in the report layout: header stats then bucket lines."""
    values = np.asarray(values, dtype=np.float64)
    lines = [f"{title}:"]
    lines.append(
        f"Count: {len(values)} Average: {_g(values.mean())} StdDev: {_g(values.std())}"
    )
    lines.append(f"Min: {_g(values.min())} Max: {_g(values.max())} Ignored: 0")
    lines.append("-" * 46)
    lo, hi = float(values.min()), float(values.max())
    integral = bool(np.all(values == np.round(values)))
    if integral:
        width = max(1.0, np.ceil((hi - lo) / 20.0))
        edges = np.arange(lo, hi + width, width)
        if edges[-1] <= hi:
            edges = np.append(edges, edges[-1] + width)
    else:
        edges = np.linspace(lo, hi, 21) if hi > lo else np.array([lo, lo + 1.0])
    counts, _ = np.histogram(values, bins=edges)
    # np.histogram closes the last bucket, which is also how it is displayed.
    bounds = [_g(e) for e in edges]
    if integral:
        bounds[-1] = _g(min(edges[-1], hi))
    wb = max(len(b) for b in bounds)
    wc = max(len(str(c)) for c in counts)
    for i, count in enumerate(counts):
        if count == 0 and len(counts) > 20:
            continue
        closing = "]" if i == len(counts) - 1 else ")"
        upper = bounds[i + 1] if i < len(counts) - 1 else bounds[-1]
        pct = 100.0 * count / len(values)
        lines.append(
            f"[{bounds[i]:>{wb}}, {upper:>{wb}}{closing} {count:>{wc}} {pct:>6.2f}"
        )
    return "\n".join(lines)


def format_importances(title: str, ranked: list[tuple[str, float]]) -> str:
    lines = [f"Variable Importance: {title}:"]
    if not ranked:
        return "\n".join(lines)
    width = max(len(name) for name, _ in ranked) + 2
    top = max(score for _, score in ranked)
    for i, (name, score) in enumerate(ranked, 1):
        bar = "#" * max(1, int(15 * score / top)) if top > 0 else ""
        lines.append(f'    {i}. {f_quoted(name):>{width}} {_g(score)} {bar}')
    return "\n".join(lines)


def f_quoted(name: str) -> str:
    return f'"{name}"'


def format_tree_statistics(report: StatsReport) -> str:
    """Renders the structural-statistics sections of the model report."""
    spec = report.spec

    def attr_lines(counter: Counter) -> list[str]:
        ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
        return [
            f"    {count} : {spec.columns[a].name} [{spec.columns[a].semantic.value}]"
            for a, count in ranked
        ]

    sections = [
        format_histogram("Number of nodes by tree", report.nodes_per_tree),
        format_histogram("Depth by leafs", report.leaf_depths),
        format_histogram("Number of training obs by leaf", report.leaf_example_counts),
        "Attribute in nodes:\n" + "\n".join(attr_lines(report.attribute_in_nodes)),
        "Attribute in nodes with depth <= 0:\n" + "\n".join(attr_lines(report.attribute_as_root)),
        "Attribute in nodes with depth <= 1:\n" + "\n".join(attr_lines(report.attribute_depth1)),
        "Condition type in nodes:\n"
        + "\n".join(
            f"        {count} : {name}"
            for name, count in sorted(report.condition_types.items(), key=lambda kv: (-kv[1], kv[0]))
        ),
    ]
    return "\n\n".join(sections)
