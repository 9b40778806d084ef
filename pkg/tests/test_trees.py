import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import grove
from grove.errors import SerializationError, UsageError
from grove.trees import (
    ArrayExample,
    BooleanIsCondition,
    ClassDistribution,
    ContainsBitmapCondition,
    ContainsCondition,
    DecisionTree,
    GbtLogit,
    HigherCondition,
    InternalNode,
    Leaf,
    ObliqueCondition,
    RegressionValue,
    check_condition_semantics,
    deserialize_tree,
    eval_condition,
    format_histogram,
    format_tree_statistics,
    predict_tree,
    serialize_tree,
    tree_statistics,
    variable_importance,
    walk,
)


def leaf(*counts):
    return Leaf(ClassDistribution(np.array(counts, dtype=np.float64)))


def stump(condition, pos=None, neg=None):
    return DecisionTree(
        InternalNode(condition, pos or leaf(0, 5), neg or leaf(5, 0))
    )


class TestEvalCondition:
    def test_higher_boundary_is_positive(self):
        cond = HigherCondition(attribute=0, threshold=40.0)
        assert eval_condition(cond, ArrayExample([40.0])) is True
        assert eval_condition(cond, ArrayExample([39.999])) is False

    def test_bitmap_ood_false_when_bit_unset(self):
        mask = np.array([False, True, False])
        cond = ContainsBitmapCondition(attribute=0, mask=mask)
        assert eval_condition(cond, ArrayExample([0])) is False
        assert eval_condition(cond, ArrayExample([1])) is True

    def test_oblique_dot_product(self):
        # Oracle: 1*3 + (-1)*5 = -2 < 0.
        cond = ObliqueCondition(attributes=(0, 1), weights=(1.0, -1.0), threshold=0.0)
        assert eval_condition(cond, ArrayExample([3.0, 5.0])) is False
        assert eval_condition(cond, ArrayExample([5.0, 3.0])) is True

    def test_contains(self):
        cond = ContainsCondition(attribute=0, items=(1, 3))
        assert eval_condition(cond, ArrayExample([3]))
        assert not eval_condition(cond, ArrayExample([2]))

    def test_boolean(self):
        cond = BooleanIsCondition(attribute=0)
        assert eval_condition(cond, ArrayExample([1]))
        assert not eval_condition(cond, ArrayExample([0]))

    @pytest.mark.parametrize("na_value", [True, False])
    def test_missing_routes_by_na_value(self, na_value):
        cond = HigherCondition(0, 1.0, na_value=na_value)
        example = ArrayExample([float("nan")], missing=[True])
        assert eval_condition(cond, example) is na_value

    def test_oblique_any_missing_component(self):
        cond = ObliqueCondition((0, 1), (1.0, 1.0), 0.0, na_value=True)
        assert eval_condition(cond, ArrayExample([1.0, 0.0], missing=[False, True]))

    def test_semantic_mismatch_rejected_at_construction_check(self, iris):
        cond = ContainsBitmapCondition(attribute=0, mask=np.ones(3, dtype=bool))
        with pytest.raises(UsageError, match="NUMERICAL"):
            check_condition_semantics(cond, iris.spec)


class TestPredictTree:
    def test_single_leaf(self):
        tree = DecisionTree(leaf(2, 3))
        payload = predict_tree(tree, ArrayExample([]))
        assert payload.counts.tolist() == [2, 3]

    def test_all_missing_routes_by_na_flags(self):
        tree = DecisionTree(
            InternalNode(
                HigherCondition(0, 0.0, na_value=True),
                positive_child=InternalNode(
                    HigherCondition(1, 0.0, na_value=False),
                    positive_child=leaf(1, 0),
                    negative_child=leaf(0, 1),
                ),
                negative_child=leaf(9, 9),
            )
        )
        example = ArrayExample([np.nan, np.nan], missing=[True, True])
        assert predict_tree(tree, example).counts.tolist() == [0, 1]

    def test_random_tree_matches_path_enumeration(self):
        rng = np.random.default_rng(7)
        depth = 4

        def build(d):
            if d == depth:
                return Leaf(RegressionValue(float(rng.normal()), 1.0))
            return InternalNode(
                HigherCondition(int(rng.integers(3)), float(rng.normal())),
                positive_child=build(d + 1),
                negative_child=build(d + 1),
            )

        tree = DecisionTree(build(0))

        def enumerate_paths(node, conditions):
            # Oracle: explicit path enumeration over all leaves.
            if isinstance(node, Leaf):
                yield conditions, node.payload
                return
            yield from enumerate_paths(
                node.positive_child, conditions + [(node.condition, True)]
            )
            yield from enumerate_paths(
                node.negative_child, conditions + [(node.condition, False)]
            )

        for _ in range(50):
            example = ArrayExample(list(rng.normal(size=3)))
            matches = [
                payload
                for conditions, payload in enumerate_paths(tree.root, [])
                if all(
                    eval_condition(c, example) is expected for c, expected in conditions
                )
            ]
            assert len(matches) == 1
            assert predict_tree(tree, example) is matches[0]


def random_tree(rng, depth=3):
    def build(d):
        if d == depth or rng.random() < 0.2:
            kind = rng.integers(3)
            if kind == 0:
                return leaf(*rng.integers(0, 10, size=3))
            if kind == 1:
                return Leaf(RegressionValue(float(rng.normal()), float(rng.integers(1, 9))))
            return Leaf(GbtLogit(float(rng.normal()), float(rng.integers(1, 9))))
        kind = rng.integers(4)
        if kind == 0:
            cond = HigherCondition(int(rng.integers(4)), float(rng.normal()), bool(rng.integers(2)))
        elif kind == 1:
            cond = ContainsBitmapCondition(
                int(rng.integers(4)), rng.integers(0, 2, size=6).astype(bool), bool(rng.integers(2))
            )
        elif kind == 2:
            cond = ContainsCondition(int(rng.integers(4)), (1, 4), bool(rng.integers(2)))
        else:
            cond = ObliqueCondition(
                (0, 2), (float(rng.normal()), float(rng.normal())), float(rng.normal())
            )
        return InternalNode(cond, positive_child=build(d + 1), negative_child=build(d + 1))

    return DecisionTree(build(0))


def trees_equal(a, b) -> bool:
    # Deep-compare oracle, independent of the serializer.
    if isinstance(a, Leaf) != isinstance(b, Leaf):
        return False
    if isinstance(a, Leaf):
        pa, pb = a.payload, b.payload
        if type(pa) is not type(pb):
            return False
        if isinstance(pa, ClassDistribution):
            return pa.counts.tolist() == pb.counts.tolist()
        return (pa.value, pa.count) == (pb.value, pb.count)
    ca, cb = a.condition, b.condition
    if type(ca) is not type(cb) or ca.na_value != cb.na_value:
        return False
    if isinstance(ca, HigherCondition):
        same = (ca.attribute, ca.threshold) == (cb.attribute, cb.threshold)
    elif isinstance(ca, ContainsBitmapCondition):
        same = ca.attribute == cb.attribute and (ca.mask == cb.mask).all()
    elif isinstance(ca, ContainsCondition):
        same = (ca.attribute, tuple(ca.items)) == (cb.attribute, tuple(cb.items))
    elif isinstance(ca, ObliqueCondition):
        same = (
            tuple(ca.attributes) == tuple(cb.attributes)
            and tuple(ca.weights) == tuple(cb.weights)
            and ca.threshold == cb.threshold
        )
    else:
        same = ca.attribute == cb.attribute
    return (
        same
        and trees_equal(a.positive_child, b.positive_child)
        and trees_equal(a.negative_child, b.negative_child)
    )


class TestSerialization:
    @pytest.mark.parametrize("seed", range(10))
    def test_roundtrip_random_trees(self, seed):
        tree = random_tree(np.random.default_rng(seed))
        restored = deserialize_tree(serialize_tree(tree))
        assert trees_equal(tree.root, restored.root)
        assert (restored.num_nodes, restored.num_leaves, restored.max_depth) == (
            tree.num_nodes, tree.num_leaves, tree.max_depth,
        )

    def test_byte_deterministic(self):
        tree = random_tree(np.random.default_rng(3))
        assert serialize_tree(tree) == serialize_tree(tree)

    def test_empty_stream_truncated(self):
        with pytest.raises(SerializationError, match="magic|truncated"):
            deserialize_tree(b"")

    def test_truncated_stream(self):
        data = serialize_tree(random_tree(np.random.default_rng(1)))
        with pytest.raises(SerializationError, match="truncated"):
            deserialize_tree(data[: len(data) // 2])

    def test_version_too_new(self):
        data = bytearray(serialize_tree(DecisionTree(leaf(1))))
        data[4] = 99  # bump the little-endian version field
        with pytest.raises(SerializationError, match="version"):
            deserialize_tree(bytes(data))

    def test_v1_bytes_read_by_v1_reader(self):
        # Backward-compat gate: the current reader accepts version-1 bytes.
        tree = DecisionTree(leaf(1, 2))
        data = serialize_tree(tree)
        assert data[4:6] == (1).to_bytes(2, "little")
        assert trees_equal(deserialize_tree(data).root, tree.root)

    def test_unknown_node_kind_rejected(self):
        data = bytearray(serialize_tree(DecisionTree(leaf(1))))
        data[10] = 77  # node kind byte of the root record
        with pytest.raises(SerializationError, match="newer"):
            deserialize_tree(bytes(data))


class TestStatistics:
    def test_single_stump_histogram(self, iris):
        tree = stump(HigherCondition(0, 5.0))
        report = tree_statistics([tree], iris.spec)
        assert report.nodes_per_tree == [3]
        text = format_tree_statistics(report)
        assert "Number of nodes by tree:" in text
        assert "Count: 1 Average: 3" in text

    def test_empty_forest_rejected(self, iris):
        with pytest.raises(UsageError):
            tree_statistics([], iris.spec)

    def test_condition_type_lines(self, iris):
        trees = [
            stump(HigherCondition(0, 5.0)),
            stump(HigherCondition(1, 3.0)),
        ]
        text = format_tree_statistics(tree_statistics(trees, iris.spec))
        assert "2 : HigherCondition" in text

    def test_histogram_totals_equal_node_count(self):
        rng = np.random.default_rng(5)
        trees = [random_tree(rng) for _ in range(20)]
        values = [t.num_nodes for t in trees]
        text = format_histogram("Number of nodes by tree", values)
        counts = [
            int(line.split()[-2])
            for line in text.splitlines()
            if line.startswith("[")
        ]
        assert sum(counts) == len(trees)
        assert f"Count: {len(trees)}" in text

    def test_leaf_depth_stats(self):
        tree = stump(HigherCondition(0, 1.0))
        report = tree_statistics([tree], _spec_with_numericals(2))
        assert report.leaf_depths == [1, 1]


def _spec_with_numericals(n):
    from grove.dataspec import build_dataspec

    rows = [[str(i + j) for j in range(n)] for i in range(4)]
    return build_dataspec([f"f{j}" for j in range(n)], rows)


class TestVariableImportance:
    def test_identical_stumps_num_as_root(self):
        spec = _spec_with_numericals(3)
        trees = [stump(HigherCondition(2, 0.5)) for _ in range(7)]
        ranked = variable_importance(trees, spec, "NUM_AS_ROOT")
        assert ranked[0] == ("f2", 7.0)

    def test_num_nodes_totals_recount(self):
        # Recount oracle over single-attribute conditions.
        rng = np.random.default_rng(11)
        spec = _spec_with_numericals(4)
        trees = []
        for _ in range(10):
            def build(d):
                if d == 3:
                    return leaf(1, 1)
                return InternalNode(
                    HigherCondition(int(rng.integers(4)), float(rng.normal())),
                    positive_child=build(d + 1),
                    negative_child=build(d + 1),
                )
            trees.append(DecisionTree(build(0)))
        ranked = variable_importance(trees, spec, "NUM_NODES")
        internal_total = sum(
            1 for t in trees for node, _ in walk(t.root) if isinstance(node, InternalNode)
        )
        assert sum(score for _, score in ranked) == internal_total

    def test_oblique_roots_credit_every_column(self):
        spec = _spec_with_numericals(3)
        tree = stump(ObliqueCondition((0, 2), (1.0, -1.0), 0.0))
        ranked = dict(variable_importance([tree], spec, "NUM_AS_ROOT"))
        assert ranked == {"f0": 1.0, "f2": 1.0}

    def test_unknown_kind(self):
        with pytest.raises(UsageError, match="NUM_AS_ROOT"):
            variable_importance([], _spec_with_numericals(1), "MEAN_MIN_DEPTH")

    def test_adult_occupation_high_num_nodes(self, adult_gbt_model):
        ranked = adult_gbt_model.variable_importances("NUM_NODES")
        top3 = [name for name, _ in ranked[:3]]
        assert "occupation" in top3


class TestTotality:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_every_prediction_reaches_exactly_one_leaf(self, seed):
        rng = np.random.default_rng(seed)
        tree = random_tree(rng)
        values = [float(rng.normal()), float(rng.integers(6)), float(rng.normal()),
                  float(rng.integers(2))]
        missing = [bool(rng.integers(2)) for _ in range(4)]
        payload = predict_tree(tree, ArrayExample(values, missing))
        assert payload is not None
