"""Inference engines: compiled predictors equivalent to generic traversal.

Three engine families cover the speed/generality trade-off:

* ``Generic slow engine``: literal one-example-at-a-time tree traversal via
  ``predict_tree``; compatible with every model and the semantics oracle for
  everything else.
* Kind-specialized generic engines (``RandomForestGeneric``,
  ``GradientBoostedTreesGeneric``, ``CartGeneric``): batch traversal.
* ``GradientBoostedTreesQuickScorer``: for boosted forests whose trees have
  at most 64 leaves and only threshold/bitmap conditions; evaluates per-node
  conditions against 64-bit leaf masks, where the lowest surviving bit is
  the reached leaf.

Every engine's predictions agree with the generic engine within 1e-6.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels as k
from .dataset import ColumnarDataset
from .errors import UsageError
from .model import CART, GRADIENT_BOOSTED_TREES, RANDOM_FOREST, ForestModel
from .trees import (
    BooleanIsCondition,
    ClassDistribution,
    ContainsBitmapCondition,
    ContainsCondition,
    DecisionTree,
    ExampleView,
    HigherCondition,
    InternalNode,
    Leaf,
    ObliqueCondition,
    predict_tree,
    walk,
)

QUICKSCORER_MAX_LEAVES = 64


def dense_matrix(dataset: ColumnarDataset) -> np.ndarray:
    """Float64 matrix view of the dataset: NaN = missing numerical, code =
    categorical (dictionary size = missing), 0/1/2 = boolean."""
    from .learners import _dense_matrix

    return _dense_matrix(dataset)


# ---------------------------------------------------------------------------
# Flattened forest representation for the compiled traversal kernel.

_KIND_LEAF = 0
_KIND_HIGHER = 1
_KIND_BITMAP = 2
_KIND_OBLIQUE = 3
_KIND_BOOLEAN = 4


class FlattenedForest:
    """Array-of-nodes encoding of a forest, shared by the fast engines."""

    def __init__(self, trees: list[DecisionTree], vocab_sizes: np.ndarray, leaf_vector_fn, leaf_dim: int):
        kinds, features, thresholds, nas = [], [], [], []
        neg, pos, leaf_row = [], [], []
        bitmap_pool, bm_off, bm_len = [], [], []
        obq_feats, obq_w, ob_off, ob_len = [], [], [], []
        leaf_vectors = []
        roots = []

        def add_node(node) -> int:
            index = len(kinds)
            kinds.append(0)
            features.append(-1)
            thresholds.append(0.0)
            nas.append(0)
            neg.append(-1)
            pos.append(-1)
            leaf_row.append(-1)
            bm_off.append(0)
            bm_len.append(0)
            ob_off.append(0)
            ob_len.append(0)
            if isinstance(node, Leaf):
                leaf_row[index] = len(leaf_vectors)
                leaf_vectors.append(np.asarray(leaf_vector_fn(node.payload), dtype=np.float64).reshape(leaf_dim))
                return index
            cond = node.condition
            nas[index] = 1 if cond.na_value else 0
            if isinstance(cond, HigherCondition):
                kinds[index] = _KIND_HIGHER
                features[index] = cond.attribute
                thresholds[index] = cond.threshold
            elif isinstance(cond, (ContainsBitmapCondition, ContainsCondition)):
                kinds[index] = _KIND_BITMAP
                features[index] = cond.attribute
                if isinstance(cond, ContainsBitmapCondition):
                    bitmap = np.asarray(cond.mask, dtype=np.uint8)
                else:
                    bitmap = np.zeros(int(vocab_sizes[cond.attribute]), dtype=np.uint8)
                    bitmap[list(cond.items)] = 1
                bm_off[index] = len(bitmap_pool)
                bm_len[index] = len(bitmap)
                bitmap_pool.extend(bitmap.tolist())
            elif isinstance(cond, ObliqueCondition):
                kinds[index] = _KIND_OBLIQUE
                ob_off[index] = len(obq_feats)
                ob_len[index] = len(cond.attributes)
                obq_feats.extend(cond.attributes)
                obq_w.extend(cond.weights)
                thresholds[index] = cond.threshold
            elif isinstance(cond, BooleanIsCondition):
                kinds[index] = _KIND_BOOLEAN
                features[index] = cond.attribute
            else:
                raise UsageError(f"cannot compile condition {type(cond).__name__}")
            neg[index] = add_node(node.negative_child)
            pos[index] = add_node(node.positive_child)
            return index

        for tree in trees:
            roots.append(add_node(tree.root))

        self.tree_roots = np.asarray(roots, dtype=np.int32)
        self.node_kind = np.asarray(kinds, dtype=np.int8)
        self.node_feature = np.asarray(features, dtype=np.int32)
        self.node_thr = np.asarray(thresholds, dtype=np.float64)
        self.node_na = np.asarray(nas, dtype=np.uint8)
        self.node_neg = np.asarray(neg, dtype=np.int32)
        self.node_pos = np.asarray(pos, dtype=np.int32)
        self.node_leaf = np.asarray(leaf_row, dtype=np.int32)
        self.bitmap_pool = np.asarray(bitmap_pool or [0], dtype=np.uint8)
        self.node_bm_off = np.asarray(bm_off, dtype=np.int64)
        self.node_bm_len = np.asarray(bm_len, dtype=np.int64)
        self.obq_feats = np.asarray(obq_feats or [0], dtype=np.int32)
        self.obq_w = np.asarray(obq_w or [0.0], dtype=np.float64)
        self.node_ob_off = np.asarray(ob_off, dtype=np.int64)
        self.node_ob_len = np.asarray(ob_len, dtype=np.int64)
        self.leaf_values = (
            np.vstack(leaf_vectors) if leaf_vectors else np.zeros((0, leaf_dim))
        )
        self.leaf_dim = leaf_dim

    def traverse(self, X: np.ndarray, tree_subset: np.ndarray | None = None) -> np.ndarray:
        out = np.zeros((X.shape[0], self.leaf_dim))
        roots = self.tree_roots if tree_subset is None else self.tree_roots[tree_subset]
        k.traverse_forest(
            np.ascontiguousarray(X),
            roots,
            self.node_kind, self.node_feature, self.node_thr, self.node_na,
            self.node_neg, self.node_pos, self.node_leaf,
            self.bitmap_pool, self.node_bm_off, self.node_bm_len,
            self.obq_feats, self.obq_w, self.node_ob_off, self.node_ob_len,
            self.leaf_values, out,
        )
        return out


def _vocab_sizes(model: ForestModel) -> np.ndarray:
    return np.asarray(
        [c.vocab_size if c.dictionary is not None else 0 for c in model.dataspec.columns],
        dtype=np.int64,
    )


def _leaf_vector_fn(model: ForestModel):
    if model.task == "CLASSIFICATION" and model.model_kind in (RANDOM_FOREST, CART):
        return (lambda p: p.probabilities()), model.n_classes
    if model.model_kind == GRADIENT_BOOSTED_TREES:
        return (lambda p: np.array([p.value])), 1
    return (lambda p: np.array([p.value])), 1


def _postprocess(model: ForestModel, raw: np.ndarray, num_trees: int) -> np.ndarray:
    """Turns summed leaf vectors into final predictions."""
    if model.model_kind in (RANDOM_FOREST, CART):
        if model.task == "CLASSIFICATION":
            return raw / max(num_trees, 1)
        return raw[:, 0] / max(num_trees, 1)
    # Gradient boosted trees: raw holds per-output logit sums.
    if model.task == "REGRESSION":
        return model.initial_predictions[0] + raw[:, 0]
    if model.n_classes == 2:
        p = 1.0 / (1.0 + np.exp(-(model.initial_predictions[0] + raw[:, 0])))
        return np.column_stack([1.0 - p, p])
    F = model.initial_predictions[None, :] + raw
    shifted = F - F.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _gbt_grouped_sums(model: ForestModel, per_tree: np.ndarray) -> np.ndarray:
    """(n, trees) per-tree logit values -> (n, outputs) sums per class."""
    n_outputs = model.num_trees_per_iteration
    n = per_tree.shape[0]
    out = np.zeros((n, n_outputs))
    for i in range(per_tree.shape[1]):
        out[:, i % n_outputs] += per_tree[:, i]
    return out


# ---------------------------------------------------------------------------
# Engines.

class GenericEngine:
    """Reference engine: per-example loop over the simple traversal."""

    name = "Generic slow engine"

    def __init__(self, model: ForestModel):
        self.model = model

    def predict_batch(self, dataset: ColumnarDataset) -> np.ndarray:
        model = self.model
        n = dataset.num_rows
        if model.model_kind == GRADIENT_BOOSTED_TREES:
            n_outputs = model.num_trees_per_iteration
            raw = np.zeros((n, n_outputs))
            for i in range(n):
                example = ExampleView(dataset, i)
                for t, tree in enumerate(model.trees):
                    raw[i, t % n_outputs] += predict_tree(tree, example).value
            return _postprocess(model, raw, model.num_trees)
        dim = model.n_classes if model.task == "CLASSIFICATION" else 1
        raw = np.zeros((n, dim))
        for i in range(n):
            example = ExampleView(dataset, i)
            for tree in model.trees:
                payload = predict_tree(tree, example)
                if isinstance(payload, ClassDistribution):
                    raw[i] += payload.probabilities()
                else:
                    raw[i, 0] += payload.value
        return _postprocess(model, raw, model.num_trees)


class FlatForestEngine:
    """Batch traversal over the flattened forest (compiled inner loop)."""

    def __init__(self, model: ForestModel, name: str):
        self.model = model
        self.name = name
        leaf_fn, leaf_dim = _leaf_vector_fn(model)
        self.flat = FlattenedForest(model.trees, _vocab_sizes(model), leaf_fn, leaf_dim)
        self._gbt = model.model_kind == GRADIENT_BOOSTED_TREES

    def predict_batch(self, dataset: ColumnarDataset) -> np.ndarray:
        X = dense_matrix(dataset)
        model = self.model
        if not self._gbt:
            raw = self.flat.traverse(X)
            return _postprocess(model, raw, model.num_trees)
        n_outputs = model.num_trees_per_iteration
        if n_outputs == 1:
            raw = self.flat.traverse(X)
        else:
            raw = np.zeros((X.shape[0], n_outputs))
            for c in range(n_outputs):
                subset = np.arange(c, model.num_trees, n_outputs)
                raw[:, c] = self.flat.traverse(X, subset)[:, 0]
        return _postprocess(model, raw, model.num_trees)


class VectorizedGbtEngine:
    """Generic batched engine for boosted trees: per-node index partition."""

    name = "GradientBoostedTreesGeneric"

    def __init__(self, model: ForestModel):
        self.model = model
        self.vocab_sizes = _vocab_sizes(model)

    def predict_batch(self, dataset: ColumnarDataset) -> np.ndarray:
        from .splitters import condition_mask

        model = self.model
        X = dense_matrix(dataset)
        n = dataset.num_rows
        n_outputs = model.num_trees_per_iteration
        raw = np.zeros((n, n_outputs))
        all_rows = np.arange(n)
        for t, tree in enumerate(model.trees):
            column = t % n_outputs
            stack = [(tree.root, all_rows)]
            while stack:
                node, rows = stack.pop()
                if len(rows) == 0:
                    continue
                if isinstance(node, Leaf):
                    raw[rows, column] += node.payload.value
                    continue
                mask = condition_mask(node.condition, X, rows, self.vocab_sizes)
                stack.append((node.positive_child, rows[mask]))
                stack.append((node.negative_child, rows[~mask]))
        return _postprocess(model, raw, model.num_trees)


class QuickScorerEngine:
    """Boosted-tree inference through per-condition 64-bit leaf masks."""

    name = "GradientBoostedTreesQuickScorer"

    def __init__(self, model: ForestModel):
        self.model = model
        entry_feature, entry_kind, entry_thr, entry_na, entry_mask = [], [], [], [], []
        entry_bm_off, entry_bm_len = [], []
        bitmap_pool: list[int] = []
        tree_start, tree_end, tree_leaf_off, tree_class = [], [], [], []
        tree_init_mask, tree_num_leaves = [], []
        leaf_values: list[float] = []
        vocabs = _vocab_sizes(model)
        n_outputs = model.num_trees_per_iteration

        for t, tree in enumerate(model.trees):
            tree_start.append(len(entry_feature))
            tree_leaf_off.append(len(leaf_values))
            tree_class.append(t % n_outputs)
            entries = []

            def leaf_span(node, first_leaf: int) -> int:
                """Assigns leaf slots in canonical order; returns leaf count."""
                if isinstance(node, Leaf):
                    leaf_values.append(node.payload.value)
                    return 1
                n_neg = leaf_span(node.negative_child, first_leaf)
                n_pos = leaf_span(node.positive_child, first_leaf + n_neg)
                # When this condition is false, the positive subtree's leaves
                # are unreachable: clear their bits.
                lo = first_leaf + n_neg
                cleared = ((1 << n_pos) - 1) << lo
                mask = np.uint64(~np.uint64(cleared))
                cond = node.condition
                if isinstance(cond, HigherCondition):
                    entries.append(
                        (cond.attribute, 1, cond.threshold, cond.na_value, mask, 0, 0)
                    )
                elif isinstance(cond, (ContainsBitmapCondition, ContainsCondition)):
                    if isinstance(cond, ContainsBitmapCondition):
                        bitmap = np.asarray(cond.mask, dtype=np.uint8)
                    else:
                        bitmap = np.zeros(int(vocabs[cond.attribute]), dtype=np.uint8)
                        bitmap[list(cond.items)] = 1
                    off = len(bitmap_pool)
                    bitmap_pool.extend(bitmap.tolist())
                    entries.append(
                        (cond.attribute, 2, 0.0, cond.na_value, mask, off, len(bitmap))
                    )
                else:
                    raise UsageError(
                        f"QuickScorer cannot compile condition {type(cond).__name__}"
                    )
                return n_neg + n_pos

            n_leaves = leaf_span(tree.root, 0)
            if n_leaves > QUICKSCORER_MAX_LEAVES:
                raise UsageError("QuickScorer requires trees with at most 64 leaves")
            tree_num_leaves.append(n_leaves)
            tree_init_mask.append(
                np.uint64(0xFFFFFFFFFFFFFFFF)
                if n_leaves == 64
                else np.uint64((1 << n_leaves) - 1)
            )
            entries.sort(key=lambda e: (e[0], e[1], e[2]))
            for feature, kind, thr, na, mask, off, ln in entries:
                entry_feature.append(feature)
                entry_kind.append(kind)
                entry_thr.append(thr)
                entry_na.append(1 if na else 0)
                entry_mask.append(mask)
                entry_bm_off.append(off)
                entry_bm_len.append(ln)
            tree_end.append(len(entry_feature))

        self.tree_entry_start = np.asarray(tree_start, dtype=np.int64)
        self.tree_entry_end = np.asarray(tree_end, dtype=np.int64)
        self.entry_feature = np.asarray(entry_feature, dtype=np.int32)
        self.entry_kind = np.asarray(entry_kind, dtype=np.int8)
        self.entry_thr = np.asarray(entry_thr, dtype=np.float64)
        self.entry_na = np.asarray(entry_na, dtype=np.uint8)
        self.entry_mask = np.asarray(entry_mask, dtype=np.uint64)
        self.entry_bm_off = np.asarray(entry_bm_off, dtype=np.int64)
        self.entry_bm_len = np.asarray(entry_bm_len, dtype=np.int64)
        self.bitmap_pool = np.asarray(bitmap_pool or [0], dtype=np.uint8)
        self.tree_init_mask = np.asarray(tree_init_mask, dtype=np.uint64)
        self.tree_num_leaves = np.asarray(tree_num_leaves, dtype=np.int64)
        self.tree_leaf_off = np.asarray(tree_leaf_off, dtype=np.int64)
        self.leaf_values = np.asarray(leaf_values, dtype=np.float64)
        self.tree_class = np.asarray(tree_class, dtype=np.int64)

    def predict_batch(self, dataset: ColumnarDataset) -> np.ndarray:
        model = self.model
        X = dense_matrix(dataset)
        out = np.zeros((X.shape[0], model.num_trees_per_iteration))
        k.quickscorer(
            np.ascontiguousarray(X),
            self.tree_entry_start, self.tree_entry_end,
            self.entry_feature, self.entry_kind, self.entry_thr, self.entry_na,
            self.entry_mask, self.entry_bm_off, self.entry_bm_len,
            self.bitmap_pool, self.tree_init_mask, self.tree_num_leaves,
            self.tree_leaf_off, self.leaf_values,
            self.tree_class, out,
        )
        return _postprocess(model, out, model.num_trees)


def quickscorer_compatible(model: ForestModel) -> bool:
    if model.model_kind != GRADIENT_BOOSTED_TREES:
        return False
    for tree in model.trees:
        if tree.num_leaves > QUICKSCORER_MAX_LEAVES:
            return False
        for node, _ in walk(tree.root):
            if isinstance(node, InternalNode) and not isinstance(
                node.condition, (HigherCondition, ContainsBitmapCondition, ContainsCondition)
            ):
                return False
    return True


def compile(model: ForestModel) -> list:
    """Every compatible engine, fastest first; the generic engine is always
    compatible and always last."""
    engines = []
    if model.model_kind == GRADIENT_BOOSTED_TREES:
        if quickscorer_compatible(model):
            engines.append(QuickScorerEngine(model))
        engines.append(VectorizedGbtEngine(model))
    elif model.model_kind == RANDOM_FOREST:
        engines.append(FlatForestEngine(model, "RandomForestGeneric"))
    elif model.model_kind == CART:
        engines.append(FlatForestEngine(model, "CartGeneric"))
    engines.append(GenericEngine(model))
    return engines


def predict_batch(engine, dataset: ColumnarDataset) -> np.ndarray:
    """Runs an engine over a dataset; empty batches yield empty outputs."""
    if dataset.num_rows == 0:
        model = engine.model
        if model.task == "CLASSIFICATION":
            return np.zeros((0, model.n_classes))
        return np.zeros(0)
    return engine.predict_batch(dataset)


def predict_model(model: ForestModel, dataset: ColumnarDataset) -> np.ndarray:
    return predict_batch(compile(model)[0], dataset)


# ---------------------------------------------------------------------------
# Inference micro-benchmark.

@dataclass
class BenchmarkRow:
    name: str
    us_per_example: float
    us_per_batch: float


def benchmark_inference(
    model: ForestModel,
    dataset: ColumnarDataset,
    batch_size: int = 100,
    num_runs: int = 20,
) -> str:
    """Times every compatible engine over the dataset and renders the
    sorted-fastest-first report."""
    if dataset.num_rows == 0:
        raise UsageError("cannot benchmark inference on an empty dataset")
    batches = [
        dataset.take(np.arange(start, min(start + batch_size, dataset.num_rows)))
        for start in range(0, dataset.num_rows, batch_size)
    ]
    rows = []
    for engine in compile(model):
        for batch in batches:  # warm-up pass
            engine.predict_batch(batch)
        started = time.perf_counter()
        for _ in range(num_runs):
            for batch in batches:
                engine.predict_batch(batch)
        elapsed = time.perf_counter() - started
        us_per_example = elapsed / (num_runs * dataset.num_rows) * 1e6
        rows.append(
            BenchmarkRow(engine.name, us_per_example, us_per_example * batch_size)
        )
    rows.sort(key=lambda r: r.us_per_example)

    lines = [
        f"batch_size : {batch_size}  num_runs : {num_runs}",
        "time/example(us)  time/batch(us)  method",
        "-" * 40,
    ]
    for row in rows:
        lines.append(f"{row.us_per_example:.5g} {row.us_per_batch:.5g} {row.name}")
    lines.append("-" * 40)
    return "\n".join(lines) + "\n"
