"""Columnar dataset container and CSV ingestion.

A Dataset is an immutable row-major float64 feature matrix plus an integer
label column.  Labels are class-ids into ``label_names``, the ordered class
table that the coordinator fixes federation-wide so that silos with missing
classes still agree on the id space.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyDataset,
    EmptyFile,
    MissingColumn,
    NonNumericFeature,
    UnknownLabelValue,
)


@dataclass(frozen=True)
class DataParams:
    """How to turn a raw CSV into a Dataset.

    ``label_names`` maps class-id -> original label text; an empty tuple means
    "infer from the file" (sorted unique label values), which is only
    acceptable for standalone use - federated runs must share one table.
    """

    target_column: str
    ignored_columns: tuple[str, ...] = ()
    positive_label: str = "1"
    label_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ignored_columns", tuple(self.ignored_columns))
        object.__setattr__(self, "label_names", tuple(self.label_names))
        if self.target_column in self.ignored_columns:
            raise ValueError("target_column must not be listed in ignored_columns")

    def positive_class_id(self) -> int:
        if self.positive_label not in self.label_names:
            raise UnknownLabelValue(
                f"positive label {self.positive_label!r} not in label table {list(self.label_names)}"
            )
        return self.label_names.index(self.positive_label)


@dataclass(frozen=True)
class Dataset:
    feature_names: tuple[str, ...]
    features: np.ndarray  # (n_samples, n_features) float64
    labels: np.ndarray    # (n_samples,) int64 class-ids
    label_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "label_names", tuple(self.label_names))
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.ndim != 1 or feats.shape[0] != labels.shape[0]:
            raise ValueError("features row count must equal labels length")
        if feats.shape[1] != len(self.feature_names):
            raise ValueError("feature_names length must equal feature column count")
        if feats.size and not np.isfinite(feats).all():
            raise ValueError("features contain NaN or infinity")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.label_names)):
            raise ValueError("label id outside label_names table")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def take(self, indices) -> "Dataset":
        """Row subset (new Dataset; self is untouched)."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.feature_names, self.features[idx], self.labels[idx], self.label_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes).astype(np.int64)


def load_dataset(path: str | os.PathLike, params: DataParams) -> Dataset:
    """Parse a headered CSV into a Dataset under ``params``.

    Ignored columns are dropped, remaining non-target columns must parse as
    floats, the target column is mapped through the label table, and row
    order is preserved.  NaN/inf feature cells are rejected.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        rows = [row for row in reader if row]

    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    if params.target_column not in header:
        raise MissingColumn(f"{path}: target column {params.target_column!r} not in header")
    for col in params.ignored_columns:
        if col not in header:
            raise MissingColumn(f"{path}: ignored column {col!r} not in header")

    target_idx = header.index(params.target_column)
    drop = {target_idx} | {header.index(c) for c in params.ignored_columns}
    feature_idx = [i for i in range(len(header)) if i not in drop]
    feature_names = tuple(header[i] for i in feature_idx)

    raw_labels = []
    features = np.empty((len(rows), len(feature_idx)), dtype=np.float64)
    for r, row in enumerate(rows):
        line = r + 2  # header is line 1
        if len(row) != len(header):
            raise NonNumericFeature(line, "<row>", f"expected {len(header)} cells, got {len(row)}")
        for j, i in enumerate(feature_idx):
            cell = row[i].strip()
            try:
                value = float(cell)
            except ValueError:
                raise NonNumericFeature(line, header[i], cell) from None
            if math.isnan(value) or math.isinf(value):
                raise NonNumericFeature(line, header[i], cell)
            features[r, j] = value
        raw_labels.append(row[target_idx].strip())

    label_names = params.label_names
    if not label_names:
        label_names = tuple(sorted(set(raw_labels)))
    table = {name: i for i, name in enumerate(label_names)}
    labels = np.empty(len(rows), dtype=np.int64)
    for r, value in enumerate(raw_labels):
        if value not in table:
            raise UnknownLabelValue(
                f"{path}: line {r + 2}: label {value!r} not in label table {list(label_names)}"
            )
        labels[r] = table[value]

    return Dataset(feature_names, features, labels, label_names)


def save_dataset(data: Dataset, path: str | os.PathLike, target_column: str = "label") -> None:
    """Write a Dataset back to CSV with round-trip-exact floats.

    ``repr`` of a Python float is the shortest string that parses back to the
    same double, so load_dataset(save_dataset(d)) reproduces d bit-for-bit.
    """
    if data.n_samples == 0:
        raise EmptyDataset("refusing to write a dataset with no rows")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(data.feature_names) + [target_column])
        for r in range(data.n_samples):
            cells = [repr(float(v)) for v in data.features[r]]
            cells.append(data.label_names[data.labels[r]])
            writer.writerow(cells)


def infer_label_names(path: str | os.PathLike, target_column: str) -> tuple[str, ...]:
    """Sorted unique label values of a CSV; used to fix the global class table."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyFile(f"{path}: file is empty") from None
        if target_column not in header:
            raise MissingColumn(f"{path}: target column {target_column!r} not in header")
        idx = header.index(target_column)
        values = {row[idx].strip() for row in reader if row}
    if not values:
        raise EmptyFile(f"{path}: no data rows")
    return tuple(sorted(values))
