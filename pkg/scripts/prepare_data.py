#!/usr/bin/env python3
"""Builds the CSV datasets used by the test suite and the README walkthrough.

Adult (census income): starting from the classic 32,561-row UCI file, rows are
shuffled with a fixed seed and split 22,792 / 9,769 into train/test. The "?"
markers are rewritten as empty cells (the toolkit's missing-value marker).

Iris: exported from scikit-learn's bundled copy.

Usage:
    python scripts/prepare_data.py --adult-raw /path/to/adult-all.csv --out data/

The raw Adult file is the headerless UCI `adult.data` (or any concatenation
whose first 32,561 rows are `adult.data`, e.g. the widely mirrored
`adult-all.csv`).
"""

import argparse
import csv
import pathlib

import numpy as np

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num",
    "marital_status", "occupation", "relationship", "race", "sex",
    "capital_gain", "capital_loss", "hours_per_week", "native_country",
    "income",
]
ADULT_TOTAL_ROWS = 32561
ADULT_TRAIN_ROWS = 22792
SPLIT_SEED = 8274


def prepare_adult(raw_path: pathlib.Path, out_dir: pathlib.Path) -> None:
    with open(raw_path, newline="") as f:
        rows = [
            [cell.strip().replace("?", "") for cell in row]
            for row in csv.reader(f)
            if row
        ]
    rows = rows[:ADULT_TOTAL_ROWS]
    if len(rows) != ADULT_TOTAL_ROWS:
        raise SystemExit(f"expected at least {ADULT_TOTAL_ROWS} rows, got {len(rows)}")

    order = np.random.default_rng(SPLIT_SEED).permutation(ADULT_TOTAL_ROWS)
    splits = {
        "adult_train.csv": order[:ADULT_TRAIN_ROWS],
        "adult_test.csv": order[ADULT_TRAIN_ROWS:],
    }
    for name, idx in splits.items():
        with open(out_dir / name, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(ADULT_COLUMNS)
            writer.writerows(rows[i] for i in idx)
        print(f"wrote {out_dir / name} ({len(idx)} rows)")


def prepare_iris(out_dir: pathlib.Path) -> None:
    from sklearn.datasets import load_iris

    iris = load_iris()
    names = ["sepal_length", "sepal_width", "petal_length", "petal_width"]
    with open(out_dir / "iris.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(names + ["species"])
        for x, y in zip(iris.data, iris.target):
            writer.writerow([f"{v:g}" for v in x] + [iris.target_names[y]])
    print(f"wrote {out_dir / 'iris.csv'} (150 rows)")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--adult-raw", type=pathlib.Path, default=None,
                        help="headerless UCI adult csv (skip Adult if omitted)")
    parser.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data"))
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    if args.adult_raw is not None:
        prepare_adult(args.adult_raw, args.out)
    prepare_iris(args.out)


if __name__ == "__main__":
    main()
