"""CSV ingestion, schema inference, standardization / one-hot encoding, splits."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Malformed input data (ragged rows, empty file, constant column...)."""


@dataclass
class FeatureSpec:
    name: str
    kind: str
    cardinality: int = 1
    mean: float | None = None
    std: float | None = None
    categories: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "cardinality": self.cardinality}
        if self.kind == NUMERICAL:
            out.update(mean=self.mean, std=self.std)
        else:
            out["categories"] = dict(self.categories)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            name=d["name"],
            kind=d["kind"],
            cardinality=int(d["cardinality"]),
            mean=d.get("mean"),
            std=d.get("std"),
            categories={str(k): int(v) for k, v in d.get("categories", {}).items()},
        )


@dataclass
class FeatureSchema:
    features: list[FeatureSpec]

    @property
    def d(self) -> int:
        return len(self.features)

    @property
    def cardinalities(self) -> list[int]:
        return [f.cardinality for f in self.features]

    @property
    def kinds(self) -> list[str]:
        return [f.kind for f in self.features]

    @property
    def fitted(self) -> bool:
        return all(
            (f.std is not None) if f.kind == NUMERICAL else bool(f.categories) for f in self.features
        )

    def to_dict(self) -> dict:
        return {"features": [f.to_dict() for f in self.features]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls([FeatureSpec.from_dict(f) for f in d["features"]])

    def hash(self) -> str:
        """Content hash over names, kinds, cardinalities and category maps.

        Normalization statistics are excluded so that a checkpoint stays
        compatible with any file that shares the column layout.
        """
        layout = [
            [f.name, f.kind, f.cardinality, sorted(f.categories.items())] for f in self.features
        ]
        blob = json.dumps(layout, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TabularDataset:
    rows: list[list[str]]
    schema: FeatureSchema
    target: list[str] | None = None
    target_name: str | None = None
    split_labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def d(self) -> int:
        return self.schema.d

    def indices(self, split: str) -> np.ndarray:
        if self.split_labels is None:
            if split == "all":
                return np.arange(len(self.rows))
            raise DataError("dataset has no split labels; call split() first")
        if split == "all":
            return np.arange(len(self.rows))
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return np.flatnonzero(self.split_labels == split)


def _is_number(value: str) -> bool:
    try:
        float(value)
    except ValueError:
        return False
    return True


def load_csv(path, has_header: bool = True, target_column: str | int | None = None) -> TabularDataset:
    """Read a comma-separated file into a dataset with an inferred schema.

    A column is numerical when every entry parses as a float, otherwise
    categorical.  Missing (empty) input values are rejected.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        records = [(reader.line_num, r) for r in reader if r]
    if not records:
        raise DataError(f"{path}: empty file")
    if has_header:
        header = records[0][1]
        records = records[1:]
    else:
        header = [f"f{i}" for i in range(len(records[0][1]))]
    if not records:
        raise DataError(f"{path}: no data rows")
    width = len(header)
    for line, row in records:
        if len(row) != width:
            raise DataError(f"{path}: row {line} has {len(row)} fields, expected {width}")
    lines = [line for line, _ in records]
    body = [row for _, row in records]

    target_idx = None
    if target_column is not None:
        if isinstance(target_column, int):
            target_idx = target_column
        elif target_column in header:
            target_idx = header.index(target_column)
        else:
            raise DataError(f"{path}: target column {target_column!r} not found")

    input_cols = [i for i in range(width) if i != target_idx]
    rows = [[row[i].strip() for i in input_cols] for row in body]
    for line, row in zip(lines, rows):
        for j, value in enumerate(row):
            if value == "":
                raise DataError(
                    f"{path}: row {line} has a missing value in column "
                    f"{header[input_cols[j]]!r}"
                )

    features = []
    for j, col in enumerate(input_cols):
        numeric = all(_is_number(r[j]) for r in rows)
        features.append(FeatureSpec(name=header[col], kind=NUMERICAL if numeric else CATEGORICAL))
    target = [row[target_idx].strip() for row in body] if target_idx is not None else None
    return TabularDataset(
        rows=rows,
        schema=FeatureSchema(features),
        target=target,
        target_name=header[target_idx] if target_idx is not None else None,
    )


def split(ds: TabularDataset, seed: int, fractions=(0.8, 0.1, 0.1)) -> np.ndarray:
    """Assign every row to train/val/test by a seeded shuffle (80/10/10)."""
    n = len(ds)
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    order = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train : n_train + n_val]] = "val"
    labels[order[n_train + n_val :]] = "test"
    labels = labels.astype(str)
    ds.split_labels = labels
    return labels


def fit_preprocessor(ds: TabularDataset, split: str = "train") -> FeatureSchema:
    """Fill normalization statistics and category maps from one split.

    Population standard deviation is used.  Constant numerical columns are
    rejected since they cannot be standardized.
    """
    idx = ds.indices(split) if ds.split_labels is not None else np.arange(len(ds))
    if len(idx) == 0:
        raise DataError(f"split {split!r} is empty")
    for j, spec in enumerate(ds.schema.features):
        column = [ds.rows[i][j] for i in idx]
        if spec.kind == NUMERICAL:
            values = np.asarray([float(v) for v in column], dtype=np.float64)
            mean = float(values.mean())
            std = float(values.std())
            if not std > 0.0:
                raise DataError(f"numerical column {spec.name!r} is constant on split {split!r}")
            spec.mean, spec.std, spec.cardinality = mean, std, 1
        else:
            cats: dict[str, int] = {}
            for v in column:
                if v not in cats:
                    cats[v] = len(cats)
            spec.categories = cats
            spec.cardinality = len(cats)
    return ds.schema


@dataclass
class EncodedSample:
    """Per-feature encodings E(x_j); numerical entries have length 1."""

    values: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.values)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.values)


class Encoder:
    """Applies a fitted schema to raw rows; counts unseen categories."""

    def __init__(self, schema: FeatureSchema):
        if not schema.fitted:
            raise DataError("schema has not been fitted")
        self.schema = schema
        self.unseen = 0
        self.offsets = np.concatenate([[0], np.cumsum(schema.cardinalities)]).astype(int)

    @property
    def width(self) -> int:
        return int(self.offsets[-1])

    def encode_value(self, j: int, value: str) -> np.ndarray:
        spec = self.schema.features[j]
        if spec.kind == NUMERICAL:
            return np.asarray([(float(value) - spec.mean) / spec.std], dtype=np.float64)
        vec = np.zeros(spec.cardinality, dtype=np.float64)
        index = spec.categories.get(value)
        if index is None:
            self.unseen += 1
            logger.debug("unseen category %r in feature %r", value, spec.name)
        else:
            vec[index] = 1.0
        return vec

    def transform_row(self, row) -> EncodedSample:
        if len(row) != self.schema.d:
            raise DataError(f"row has {len(row)} features, schema expects {self.schema.d}")
        return EncodedSample([self.encode_value(j, v) for j, v in enumerate(row)])

    def transform_matrix(self, rows) -> np.ndarray:
        """Concatenated encodings, shape (n, sum of cardinalities)."""
        out = np.zeros((len(rows), self.width), dtype=np.float64)
        for i, row in enumerate(rows):
            if len(row) != self.schema.d:
                raise DataError(f"row {i} has {len(row)} features, schema expects {self.schema.d}")
            for j, v in enumerate(row):
                out[i, self.offsets[j] : self.offsets[j + 1]] = self.encode_value(j, v)
        return out


def transform(ds: TabularDataset, schema: FeatureSchema, row: int, encoder: Encoder | None = None) -> EncodedSample:
    encoder = encoder or Encoder(schema)
    return encoder.transform_row(ds.rows[row])


def encode_split(ds: TabularDataset, split: str = "train", encoder: Encoder | None = None) -> np.ndarray:
    encoder = encoder or Encoder(ds.schema)
    idx = ds.indices(split)
    return encoder.transform_matrix([ds.rows[i] for i in idx])


def load_labels(path, n_rows: int | None = None) -> list[str]:
    """Single-column label file aligned with dataset rows; header optional."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        records = [r for r in csv.reader(fh) if r]
    if not records:
        raise DataError(f"{path}: empty label file")
    if any(len(r) != 1 for r in records):
        raise DataError(f"{path}: label file must have exactly one column")
    values = [r[0].strip() for r in records]
    if n_rows is not None and len(values) == n_rows + 1:
        values = values[1:]
    if n_rows is not None and len(values) != n_rows:
        raise DataError(f"{path}: {len(values)} labels for {n_rows} rows")
    return values
