import numpy as np
import pytest

import grove
from grove.dataset import assign_folds, read_csv, write_csv
from grove.errors import DataError

from conftest import make_dataset


class TestReadCsv:
    def test_adult_test_rows(self, adult_test):
        assert adult_test.num_rows == 9769

    def test_unknown_token_encodes_ood(self, tmp_path):
        train = tmp_path / "train.csv"
        train.write_text("color,y\nred,1\nblue,2\nred,3\n")
        ds = read_csv(str(train))
        test = tmp_path / "test.csv"
        test.write_text("color,y\npurple,4\nred,5\n")
        encoded = read_csv(str(test), ds.spec)
        color = encoded.column_values("color")
        assert color[0] == 0  # out-of-dictionary
        assert color[1] == ds.spec.column("color").token_to_index("red")

    def test_missing_markers_encode_sentinel(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text('color,x\nred,1\n,\nNA,NA\nblue,4\n')
        ds = read_csv(str(path))
        color_spec = ds.spec.column("color")
        color = ds.column_values("color")
        assert color[1] == color_spec.missing_sentinel
        assert color[2] == color_spec.missing_sentinel
        assert np.isnan(ds.column_values("x")[1])

    def test_header_mismatch_lists_names(self, tmp_path, adult_train):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DataError) as err:
            read_csv(str(path), adult_train.spec)
        assert "missing columns" in str(err.value)
        assert "unexpected columns" in str(err.value)

    def test_bad_numeric_token_names_position(self, tmp_path):
        train = tmp_path / "t.csv"
        train.write_text("x\n1\n2\n")
        spec = read_csv(str(train)).spec
        bad = tmp_path / "bad.csv"
        bad.write_text("x\n1\noops\n")
        with pytest.raises(DataError) as err:
            read_csv(str(bad), spec)
        message = str(err.value)
        assert "'oops'" in message and "row 2" in message and "'x'" in message

    def test_quoted_fields(self, tmp_path):
        path = tmp_path / "q.csv"
        rows = '"a,b",1\n"say ""hi""",2\n' * 5
        path.write_text("name,x\n" + rows)
        ds = read_csv(str(path))
        tokens = [t for t, _ in ds.spec.column("name").dictionary]
        assert "a,b" in tokens and 'say "hi"' in tokens

    def test_row_order_preserved(self, tmp_path):
        path = tmp_path / "o.csv"
        path.write_text("x\n" + "\n".join(str(i) for i in range(20)) + "\n")
        ds = read_csv(str(path))
        assert list(ds.column_values("x")) == list(range(20))


class TestWriteCsv:
    def test_roundtrip_random_dataset(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = make_dataset(
            {
                "num": [f"{v:.5g}" for v in rng.normal(size=40)],
                "cat": list(rng.choice(["a", "b", "c"], size=40)),
                "flag": list(rng.choice(["0", "1"], size=40)),
            }
        )
        path = tmp_path / "out.csv"
        write_csv(ds, str(path))
        back = read_csv(str(path), ds.spec)
        for col_a, col_b, col in zip(ds.columns, back.columns, ds.spec.columns):
            np.testing.assert_array_equal(col_a, col_b, err_msg=col.name)

    def test_probability_columns_sum_to_one(self, tmp_path, iris):
        rng = np.random.default_rng(1)
        raw = rng.random((iris.num_rows, 3))
        probs = raw / raw.sum(axis=1, keepdims=True)
        path = tmp_path / "p.csv"
        write_csv(
            iris, str(path),
            extra_columns={f"p{i}": probs[:, i] for i in range(3)},
        )
        back = read_csv(str(path))
        total = sum(back.column_values(f"p{i}").astype(np.float64) for i in range(3))
        assert np.abs(total - 1.0).max() <= 1e-6

    def test_empty_extra_columns_plain_dump(self, tmp_path, iris):
        path = tmp_path / "plain.csv"
        write_csv(iris, str(path))
        header = path.read_text().splitlines()[0]
        assert header == ",".join(iris.spec.column_names())

    def test_ood_rendered_with_marker(self, tmp_path):
        train = make_dataset({"cat": ["a", "a", "b"]})
        encoded = train.columns[0].copy()
        encoded[2] = 0  # force an out-of-dictionary code
        ds = grove.ColumnarDataset(train.spec, [encoded], train.num_rows)
        path = tmp_path / "ood.csv"
        write_csv(ds, str(path))
        assert "<OOD>" in path.read_text()

    def test_extra_column_length_mismatch(self, tmp_path, iris):
        with pytest.raises(DataError, match="extra column"):
            write_csv(iris, str(tmp_path / "x.csv"), extra_columns={"p": np.ones(3)})


class TestAssignFolds:
    def test_ten_rows_ten_folds(self):
        folds = assign_folds(10, 10, seed=3)
        sizes = np.bincount(folds.fold_of_row, minlength=10)
        assert list(sizes) == [1] * 10

    def test_adult_test_sizes(self):
        # Counting oracle: 9769 = 10 * 976 + 9.
        folds = assign_folds(9769, 10, seed=5)
        sizes = sorted(np.bincount(folds.fold_of_row, minlength=10))
        assert set(sizes) == {976, 977}
        assert sum(sizes) == 9769

    def test_deterministic(self):
        a = assign_folds(100, 7, seed=11)
        b = assign_folds(100, 7, seed=11)
        np.testing.assert_array_equal(a.fold_of_row, b.fold_of_row)
        c = assign_folds(100, 7, seed=12)
        assert (a.fold_of_row != c.fold_of_row).any()

    def test_shared_assignment_gives_identical_partitions(self):
        folds = assign_folds(50, 5, seed=2)
        first = [folds.rows_in_fold(k).tolist() for k in range(5)]
        second = [folds.rows_in_fold(k).tolist() for k in range(5)]
        assert first == second

    def test_k_larger_than_rows(self):
        with pytest.raises(DataError):
            assign_folds(3, 5, seed=0)


class TestDatasetPathSyntax:
    def test_unknown_prefix(self):
        with pytest.raises(DataError, match="csv"):
            grove.read_dataset("tfrecord:foo")

    def test_malformed_path(self):
        with pytest.raises(DataError, match="format"):
            grove.read_dataset("no-prefix.csv")
