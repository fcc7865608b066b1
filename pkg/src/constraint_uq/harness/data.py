"""Dataset loading and the seeded train/validation/test split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import DataError

SPLIT = (0.8, 0.1, 0.1)


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    W: np.ndarray
    feature_names: tuple[str, ...]
    target_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.Y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.Y[idx], self.W[idx], self.feature_names, self.target_names)


@dataclass
class Split:
    train: Dataset
    val: Dataset
    test: Dataset


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(SPLIT[0] * n))
    n_val = int(round(SPLIT[1] * n))
    return n_train, n_val, n - n_train - n_val


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    a, b, _ = split_sizes(n)
    return np.sort(perm[:a]), np.sort(perm[a : a + b]), np.sort(perm[a + b :])


def split_dataset(ds: Dataset, seed: int) -> Split:
    tr, va, te = split_indices(len(ds), seed)
    return Split(ds.subset(tr), ds.subset(va), ds.subset(te))


def load_csv(
    path: str | Path,
    features: Sequence[str] | None = None,
    targets: Sequence[str] | None = None,
    weight: str | None = None,
) -> Dataset:
    """Read a headed CSV; by default ``x*`` columns are features and ``y*`` targets.

    A ``weight`` column is used when named (or when a column called ``weight``
    exists); otherwise weights are uniform.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    col = {h: k for k, h in enumerate(header)}
    feats = list(features) if features else [h for h in header if h.startswith("x")]
    targs = list(targets) if targets else [h for h in header if h.startswith("y")]
    if weight is None and "weight" in col:
        weight = "weight"
    for name in feats + targs + ([weight] if weight else []):
        if name not in col:
            raise DataError(f"{path}: missing column {name!r}")
    if not targs:
        raise DataError(f"{path}: no target columns")
    wanted = feats + targs + ([weight] if weight else [])
    data = np.empty((len(rows) - 1, len(wanted)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        for k, name in enumerate(wanted):
            cell = row[col[name]].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column {name!r}: not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {r}, column {name!r}: non-finite value")
            data[r - 2, k] = v
    nf, nt = len(feats), len(targs)
    W = data[:, nf + nt] if weight else np.ones(len(data))
    if np.any(W < 0):
        raise DataError(f"{path}: weights must be nonnegative")
    return Dataset(data[:, :nf], data[:, nf : nf + nt], W, tuple(feats), tuple(targs))


def write_csv(path: str | Path, ds: Dataset) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.feature_names) + list(ds.target_names) + ["weight"])
        for x, y, wt in zip(ds.X, ds.Y, ds.W):
            w.writerow([repr(float(v)) for v in (*x, *y, wt)])
