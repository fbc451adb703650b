"""Walkthrough: declaring a schema, loading ratings, grouping, and folds.

A context-aware rating dataset is a flat delimited file: one header line,
then one record per line carrying user index, item index, one column per
context, and the rating.  Categorical contexts hold small integer codes;
real-valued contexts hold arbitrary floats that the loader z-scores.
"""

import tempfile
from pathlib import Path

import numpy as np

from gplvmf import (
    ContextSchema,
    ContextVariable,
    group_by_user,
    load_table,
    make_folds,
    save_table,
)

# ----------------------------------------------------------------------
# 1. Declare the schema: counts plus one entry per context column.
# ----------------------------------------------------------------------
schema = ContextSchema(
    user_count=6,
    item_count=8,
    contexts=(
        ContextVariable("daytype", "categorical", cardinality=2),
        ContextVariable("hunger", "categorical", cardinality=3),
        ContextVariable("price", "real"),
    ),
)
print(f"schema: {schema.user_count} users, {schema.item_count} items, "
      f"{schema.context_count} contexts")

# ----------------------------------------------------------------------
# 2. Write a small file in the expected format and load it back.
# ----------------------------------------------------------------------
rng = np.random.default_rng(0)
lines = ["user,item,daytype,hunger,price,rating"]
for _ in range(40):
    lines.append(
        f"{rng.integers(6)},{rng.integers(8)},{rng.integers(2)},"
        f"{rng.integers(3)},{rng.normal(12.0, 3.0):.2f},{rng.integers(1, 6)}"
    )
path = Path(tempfile.mkdtemp()) / "ratings.csv"
path.write_text("\n".join(lines) + "\n", encoding="utf-8")

table = load_table(path, schema)
print(f"loaded {len(table)} records; rating range {table.rating_range}")

# Real columns are standardized against the loaded data; the statistics
# ride along on the table for prediction-time reuse.
price = table.real_values[:, 0]
print(f"standardized price column: mean {price.mean():+.1e}, var {price.var():.6f}")
print(f"stored statistics: mean {table.standardization.mean[0]:.3f}, "
      f"std {table.standardization.std[0]:.3f}")

# ----------------------------------------------------------------------
# 3. Training is user-centric: regroup the flat table into per-user blocks.
# ----------------------------------------------------------------------
blocks = group_by_user(table)
print(f"{len(blocks)} user blocks; sizes {[b.count for b in blocks]}")

# ----------------------------------------------------------------------
# 4. Seeded, balanced folds for cross-validation.  Subsets refit the
#    standardization on their own rows (train side) or reuse existing
#    statistics (test side) so nothing leaks.
# ----------------------------------------------------------------------
plan = make_folds(table, k=5, seed=42)
print(f"fold sizes: {[plan.test_indices(f).size for f in range(5)]}")

train = table.subset(plan.train_indices(0), standardization="refit")
test = table.subset(plan.test_indices(0), standardization=train.standardization)
print(f"fold 0: train {len(train)} / test {len(test)}; "
      f"test rows reuse train statistics (mean {train.standardization.mean[0]:.3f})")

# Round trip: saving writes the raw (un-standardized) values back out.
out = path.with_name("roundtrip.csv")
save_table(table, out)
again = load_table(out, schema)
print(f"round trip identical: {np.array_equal(again.ratings, table.ratings)}")
