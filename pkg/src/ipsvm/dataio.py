"""Reading labelled tables, encoding features, and splitting rows across workers."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

__all__ = [
    "DataFormatError",
    "RawDataset",
    "NumericColumn",
    "CategoricalColumn",
    "FeatureCodec",
    "TrainingPartition",
    "parse_dense",
    "parse_sparse",
    "fit_codec",
    "encode_and_partition",
    "block_sizes",
    "save_partition",
    "load_partition",
]

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class DataFormatError(ValueError):
    pass


@dataclass
class RawDataset:
    """Parsed but not yet encoded rows.

    ``columns`` is column-major: numeric columns are float arrays, categorical
    columns are lists of string tokens.  ``classes`` holds the two label tokens in
    first-seen order; ``classes[0]`` maps to +1.
    """

    labels: list[str]
    columns: list
    schema: list[str]
    classes: tuple[str, str]
    feature_names: list[str] | None = None

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def raw_width(self) -> int:
        return len(self.columns)

    def signs(self, classes: Sequence[str] | None = None) -> np.ndarray:
        """Labels as +1/-1 under ``classes`` (defaults to this dataset's own map)."""
        pos, neg = classes if classes is not None else self.classes
        out = np.empty(self.n)
        for j, tok in enumerate(self.labels):
            if tok == pos:
                out[j] = 1.0
            elif tok == neg:
                out[j] = -1.0
            else:
                raise DataFormatError(f"row {j + 1}: label {tok!r} is not one of {pos!r}, {neg!r}")
        return out

    def take(self, index) -> RawDataset:
        """Row subset in the given order; the class map is kept."""
        index = np.asarray(index, dtype=np.int64)
        cols = []
        for kind, col in zip(self.schema, self.columns):
            if kind == NUMERIC:
                cols.append(np.asarray(col)[index])
            else:
                cols.append([col[i] for i in index])
        return RawDataset(
            labels=[self.labels[i] for i in index],
            columns=cols,
            schema=list(self.schema),
            classes=self.classes,
            feature_names=self.feature_names,
        )


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    return source, False


def _is_float(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def parse_dense(
    source,
    label=0,
    schema: Sequence[str] | None = None,
    *,
    delimiter: str = ",",
    header: bool = False,
    comment: str | None = None,
    classes: Sequence[str] | None = None,
    require_two_classes: bool = True,
) -> RawDataset:
    """Parse delimited text with one label column.

    ``label`` is a column index, a column name when ``header`` is set, or None
    for unlabelled input.
    ``schema`` lists the kind of each *feature* column (label excluded); when it
    is omitted a column is numeric iff every token parses as a float.  Tokens are
    whitespace-stripped and blank lines are skipped.
    """
    stream, owned = _open_text(source)
    try:
        reader = csv.reader(stream, delimiter=delimiter, skipinitialspace=True)
        names = None
        rows: list[tuple[int, list[str]]] = []
        width = len(schema) + (label is not None) if schema is not None else None
        for lineno, rec in enumerate(reader, start=1):
            if not rec or all(not t.strip() for t in rec):
                continue
            if comment is not None and rec[0].lstrip().startswith(comment):
                continue
            rec = [t.strip() for t in rec]
            if header and names is None:
                if width is not None and len(rec) != width:
                    raise DataFormatError(f"line {lineno}: expected {width} fields, found {len(rec)}")
                names = rec
                width = len(rec)
                continue
            if width is None:
                width = len(rec)
            if len(rec) != width:
                raise DataFormatError(f"line {lineno}: expected {width} fields, found {len(rec)}")
            rows.append((lineno, rec))
    finally:
        if owned:
            stream.close()

    if not rows:
        raise DataFormatError("empty input")
    if label is None:
        label_idx = None
    elif isinstance(label, str) and not label.lstrip("-").isdigit():
        if names is None:
            raise DataFormatError(f"label column {label!r} given by name but no header row")
        if label not in names:
            raise DataFormatError(f"label column {label!r} not found in header")
        label_idx = names.index(label)
    else:
        label_idx = int(label)
        if label_idx < 0:
            label_idx += width
        if not 0 <= label_idx < width:
            raise DataFormatError(f"label column {label} out of range for {width} fields")

    feat_idx = [i for i in range(width) if i != label_idx]
    if schema is not None:
        schema = list(schema)
        for kind in schema:
            if kind not in (NUMERIC, CATEGORICAL):
                raise ValueError(f"unknown column kind {kind!r}")

    if label_idx is None:
        labels = [""] * len(rows)
        classes = classes if classes is not None else ("", "")
    else:
        labels = [rec[label_idx] for _, rec in rows]
    if classes is None:
        seen: list[str] = []
        for tok in labels:
            if tok not in seen:
                seen.append(tok)
                if len(seen) > 2:
                    break
        if require_two_classes and len(seen) != 2:
            raise DataFormatError(f"expected exactly two label values, found {len(seen)}")
        classes = (seen + ["", ""])[:2]
    elif len(classes) != 2:
        raise ValueError("classes must name exactly two tokens")

    columns = []
    kinds = []
    for k, i in enumerate(feat_idx):
        toks = [rec[i] for _, rec in rows]
        kind = schema[k] if schema is not None else (
            NUMERIC if all(_is_float(t) for t in toks) else CATEGORICAL
        )
        if kind == NUMERIC:
            vals = np.empty(len(toks))
            for j, t in enumerate(toks):
                try:
                    vals[j] = float(t)
                except ValueError:
                    raise DataFormatError(
                        f"line {rows[j][0]}: column {i} value {t!r} is not numeric"
                    ) from None
            columns.append(vals)
        else:
            columns.append(toks)
        kinds.append(kind)

    fnames = [names[i] for i in feat_idx] if names is not None else None
    return RawDataset(labels=labels, columns=columns, schema=kinds,
                      classes=(classes[0], classes[1]), feature_names=fnames)


def _sparse_label(tok: str, lineno: int) -> str:
    try:
        val = float(tok)
    except ValueError:
        raise DataFormatError(f"line {lineno}: unparseable label {tok!r}") from None
    if val == 1.0:
        return "+1"
    if val == -1.0:
        return "-1"
    raise DataFormatError(f"line {lineno}: label {tok!r} is not +1 or -1")


def parse_sparse(source, m_declared: int) -> RawDataset:
    """Parse ``<label> <idx>:<val> ...`` lines with 1-based increasing indices."""
    stream, owned = _open_text(source)
    labels: list[str] = []
    rows: list[np.ndarray] = []
    try:
        for lineno, line in enumerate(stream, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            labels.append(_sparse_label(parts[0], lineno))
            x = np.zeros(m_declared)
            last = 0
            for item in parts[1:]:
                idx_s, sep, val_s = item.partition(":")
                if not sep:
                    raise DataFormatError(f"line {lineno}: malformed entry {item!r}")
                try:
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise DataFormatError(f"line {lineno}: unparseable entry {item!r}") from None
                if idx <= last:
                    raise DataFormatError(f"line {lineno}: indices not increasing")
                if idx > m_declared:
                    raise DataFormatError(f"line {lineno}: index {idx} exceeds declared width {m_declared}")
                x[idx - 1] = val
                last = idx
            rows.append(x)
    finally:
        if owned:
            stream.close()
    if not rows:
        raise DataFormatError("empty input")
    mat = np.vstack(rows)
    return RawDataset(
        labels=labels,
        columns=[mat[:, k].copy() for k in range(m_declared)],
        schema=[NUMERIC] * m_declared,
        classes=("+1", "-1"),
    )


@dataclass(frozen=True)
class NumericColumn:
    mean: float
    std: float
    width: int = field(default=1, init=False)

    def to_json(self) -> dict:
        return {"kind": NUMERIC, "mean": self.mean, "std": self.std}


@dataclass(frozen=True)
class CategoricalColumn:
    categories: tuple[str, ...]

    @property
    def width(self) -> int:
        return len(self.categories)

    def to_json(self) -> dict:
        return {"kind": CATEGORICAL, "categories": list(self.categories)}


class UnknownCategory(DataFormatError):
    pass


@dataclass(frozen=True)
class FeatureCodec:
    """Deterministic raw-column -> float-vector map fitted on training data."""

    columns: tuple

    @property
    def m(self) -> int:
        return sum(c.width for c in self.columns)

    @property
    def raw_width(self) -> int:
        return len(self.columns)

    def encode(self, data: RawDataset, unknown: str = "error") -> np.ndarray:
        """Encoded n x m matrix.  ``unknown`` is ``"error"`` or ``"zeros"`` for unseen categories."""
        if data.raw_width != self.raw_width:
            raise DataFormatError(
                f"schema mismatch: codec expects {self.raw_width} feature columns, data has {data.raw_width}"
            )
        if unknown not in ("error", "zeros"):
            raise ValueError("unknown must be 'error' or 'zeros'")
        out = np.zeros((data.n, self.m))
        pos = 0
        for k, (enc, col) in enumerate(zip(self.columns, data.columns)):
            if isinstance(enc, NumericColumn):
                try:
                    vals = np.asarray(col, dtype=np.float64)
                except ValueError:
                    raise DataFormatError(f"column {k}: expected numeric values") from None
                out[:, pos] = (vals - enc.mean) / enc.std
            else:
                lookup = {c: i for i, c in enumerate(enc.categories)}
                for j, tok in enumerate(col):
                    i = lookup.get(str(tok))
                    if i is None:
                        if unknown == "error":
                            raise UnknownCategory(f"row {j + 1}, column {k}: unseen category {tok!r}")
                        continue
                    out[j, pos + i] = 1.0
            pos += enc.width
        return out

    def to_json(self) -> list:
        return [c.to_json() for c in self.columns]

    @classmethod
    def from_json(cls, items: Iterable[dict]) -> FeatureCodec:
        cols = []
        for it in items:
            if it["kind"] == NUMERIC:
                cols.append(NumericColumn(float(it["mean"]), float(it["std"])))
            elif it["kind"] == CATEGORICAL:
                cols.append(CategoricalColumn(tuple(it["categories"])))
            else:
                raise DataFormatError(f"unknown codec column kind {it['kind']!r}")
        return cls(tuple(cols))


def fit_codec(data: RawDataset) -> FeatureCodec:
    """Population mean/std for numeric columns, first-appearance one-hot for categoricals."""
    if data.n == 0:
        raise DataFormatError("empty input")
    cols = []
    for kind, col in zip(data.schema, data.columns):
        if kind == NUMERIC:
            vals = np.asarray(col, dtype=np.float64)
            mean = float(vals.mean())
            std = float(vals.std())
            if not std > 0 or not np.isfinite(std):
                std = 1.0
            cols.append(NumericColumn(mean, std))
        else:
            cols.append(CategoricalColumn(tuple(dict.fromkeys(str(t) for t in col))))
    return FeatureCodec(tuple(cols))


@dataclass(frozen=True, eq=False)
class TrainingPartition:
    """One worker's contiguous slice: rows of ``Y`` are ``d_j * x_j``."""

    Y: np.ndarray
    d: np.ndarray
    global_offset: int

    def __post_init__(self):
        if self.Y.ndim != 2 or self.Y.shape[0] != self.d.shape[0]:
            raise ValueError("Y and d disagree on the row count")
        if not np.all(np.abs(self.d) == 1.0):
            raise ValueError("labels must be exactly -1 or +1")
        self.Y.setflags(write=False)
        self.d.setflags(write=False)

    @property
    def n_local(self) -> int:
        return self.Y.shape[0]

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    @classmethod
    def from_features(cls, X: np.ndarray, d: np.ndarray, global_offset: int = 0) -> TrainingPartition:
        X = np.asarray(X, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        return cls(X * d[:, None], d.copy(), int(global_offset))


def block_sizes(n: int, p: int) -> list[int]:
    """Contiguous block sizes; the first ``n mod p`` blocks get one extra row."""
    if p < 1:
        raise ValueError("worker count must be at least 1")
    if p > n:
        raise ValueError(f"worker count {p} exceeds row count {n}")
    q, r = divmod(n, p)
    return [q + 1 if i < r else q for i in range(p)]


def split_signed(Y: np.ndarray, d: np.ndarray, p: int) -> list[TrainingPartition]:
    """Partition an already label-signed matrix into contiguous views."""
    parts = []
    start = 0
    for size in block_sizes(Y.shape[0], p):
        parts.append(TrainingPartition(Y[start:start + size], d[start:start + size], start))
        start += size
    return parts


def encode_and_partition(
    data: RawDataset,
    codec: FeatureCodec,
    p: int,
    *,
    classes: Sequence[str] | None = None,
    unknown: str = "error",
) -> list[TrainingPartition]:
    block_sizes(data.n, p)  # validates p before the encode
    X = codec.encode(data, unknown=unknown)
    d = data.signs(classes)
    Y = X * d[:, None]
    return split_signed(Y, d, p)


def save_partition(part: TrainingPartition, path) -> None:
    """Write a slice for a worker process to load locally."""
    with open(path, "wb") as fh:
        np.savez(fh, Y=part.Y, d=part.d, global_offset=np.int64(part.global_offset))


def load_partition(path) -> TrainingPartition:
    with np.load(Path(path), allow_pickle=False) as z:
        return TrainingPartition(np.array(z["Y"]), np.array(z["d"]), int(z["global_offset"]))
