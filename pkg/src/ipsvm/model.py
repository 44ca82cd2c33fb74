"""Trained linear classifier: scoring, accuracy, and a checksummed text file format.

A model file looks like::

    IPSVM-MODEL
    version 1
    header {"classes": [...], "codec": [...], "diagnostics": {...}, "m": 3, "tau": 1.0}
    w 000000000000f03f...
    beta 0000000000000000
    sha256 <digest of every preceding byte>

The header is sorted-key JSON so the same model always serializes to the same
bytes; ``w`` and ``beta`` are little-endian float64 in hex so they round-trip
exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dataio import FeatureCodec, RawDataset

__all__ = [
    "FORMAT_VERSION",
    "ModelFormatError",
    "SvmModel",
    "Evaluation",
    "decision_values",
    "predict",
    "evaluate",
    "save",
    "load",
    "dumps",
    "loads",
]

FORMAT_VERSION = 1
_MAGIC = "IPSVM-MODEL"


class ModelFormatError(ValueError):
    """The model file is truncated, corrupted, or of an unsupported version."""


@dataclass(frozen=True, eq=False)
class SvmModel:
    """Classifier ``sign(w'x - beta)`` plus what is needed to score raw rows.

    ``classes[0]`` is the token for +1 and ``classes[1]`` the token for -1.
    ``codec`` may be None when the model was trained on already encoded features.
    """

    w: np.ndarray
    beta: float
    tau: float
    codec: FeatureCodec | None = None
    classes: tuple[str, str] = ("+1", "-1")
    diagnostics: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError(f"w must be one-dimensional, got shape {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))
        if len(self.classes) != 2 or self.classes[0] == self.classes[1]:
            raise ValueError("classes must be two distinct tokens")
        if self.codec is not None and self.codec.m != w.shape[0]:
            raise ValueError(f"codec encodes {self.codec.m} features but w has {w.shape[0]}")

    @property
    def m(self) -> int:
        return self.w.shape[0]

    def encode(self, data, unknown: str = "error") -> np.ndarray:
        """Encoded feature matrix for ``data``; an array is taken as already encoded."""
        if not isinstance(data, RawDataset):
            X = np.asarray(data, dtype=np.float64)
            return X[None, :] if X.ndim == 1 else X
        if self.codec is None:
            X = np.column_stack([np.asarray(c, dtype=np.float64) for c in data.columns]) if data.n else \
                np.zeros((0, data.raw_width))
            if X.shape[1] != self.m:
                raise ValueError(f"schema mismatch: model expects {self.m} features, data has {X.shape[1]}")
            return X
        return self.codec.encode(data, unknown=unknown)


def decision_values(model: SvmModel, X) -> np.ndarray:
    """Margins ``X w - beta`` for already encoded rows."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.m:
        raise ValueError(f"schema mismatch: model expects {model.m} features, got {X.shape[1]}")
    return X @ model.w - model.beta


def predict(model: SvmModel, data, unknown: str = "error") -> tuple[list[str], np.ndarray]:
    """Class token and margin for every row, in input order.

    ``data`` is a :class:`RawDataset` or an already encoded feature matrix.

    A margin of exactly zero is assigned the positive class.
    """
    margins = decision_values(model, model.encode(data, unknown=unknown))
    pos, neg = model.classes
    tokens = [pos if g >= 0 else neg for g in margins]
    return tokens, margins


@dataclass(frozen=True)
class Evaluation:
    n: int
    correct: int
    true_pos: int
    true_neg: int
    false_pos: int
    false_neg: int

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.n

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("accuracy", repr(self.accuracy)),
            ("n", str(self.n)),
            ("correct", str(self.correct)),
            ("true_pos", str(self.true_pos)),
            ("true_neg", str(self.true_neg)),
            ("false_pos", str(self.false_pos)),
            ("false_neg", str(self.false_neg)),
        ]


def evaluate(model: SvmModel, data: RawDataset, unknown: str = "error") -> Evaluation:
    """Accuracy in percent and confusion counts, with ``classes[0]`` as the positive class."""
    if data.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    truth = data.signs(model.classes) > 0
    _, margins = predict(model, data, unknown=unknown)
    guess = margins >= 0
    tp = int(np.sum(truth & guess))
    tn = int(np.sum(~truth & ~guess))
    return Evaluation(
        n=data.n, correct=tp + tn, true_pos=tp, true_neg=tn,
        false_pos=int(np.sum(~truth & guess)), false_neg=int(np.sum(truth & ~guess)),
    )


def _hex(values) -> str:
    return np.asarray(values, dtype="<f8").tobytes().hex()


def _unhex(text: str, count: int | None = None) -> np.ndarray:
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raise ModelFormatError("malformed hex payload") from None
    if len(raw) % 8 or (count is not None and len(raw) != 8 * count):
        raise ModelFormatError("float payload has the wrong length")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps(model: SvmModel) -> bytes:
    header = {
        "m": model.m,
        "tau": model.tau,
        "classes": list(model.classes),
        "codec": model.codec.to_json() if model.codec is not None else None,
        "diagnostics": model.diagnostics,
    }
    body = (
        f"{_MAGIC}\n"
        f"version {FORMAT_VERSION}\n"
        f"header {json.dumps(header, sort_keys=True, separators=(',', ':'), default=_jsonable)}\n"
        f"w {_hex(model.w)}\n"
        f"beta {_hex([model.beta])}\n"
    ).encode("utf-8")
    return body + f"sha256 {hashlib.sha256(body).hexdigest()}\n".encode("ascii")


def _field(line: str, key: str) -> str:
    prefix = key + " "
    if not line.startswith(prefix):
        raise ModelFormatError(f"expected a '{key}' line")
    return line[len(prefix):]


def loads(data: bytes) -> SvmModel:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise ModelFormatError("model file is not valid UTF-8") from None
    lines = text.split("\n")
    if not lines or lines[0] != _MAGIC:
        raise ModelFormatError("not a model file (bad magic line)")
    if len(lines) < 2 or lines[1] == "":
        raise ModelFormatError("model file is truncated")
    try:
        version = int(_field(lines[1], "version"))
    except ValueError:
        raise ModelFormatError("unreadable format version") from None
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    if len(lines) != 7 or lines[6] != "" or not lines[5].startswith("sha256 "):
        raise ModelFormatError("model file is truncated")
    body = "\n".join(lines[:5]) + "\n"
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != _field(lines[5], "sha256"):
        raise ModelFormatError("checksum mismatch: model file is corrupted")
    header = json.loads(_field(lines[2], "header"))
    m = int(header["m"])
    codec = FeatureCodec.from_json(header["codec"]) if header["codec"] is not None else None
    return SvmModel(
        w=_unhex(_field(lines[3], "w"), m),
        beta=float(_unhex(_field(lines[4], "beta"), 1)[0]),
        tau=header["tau"],
        codec=codec,
        classes=tuple(header["classes"]),
        diagnostics=header["diagnostics"],
        version=version,
    )


def save(model: SvmModel, path) -> None:
    """Write atomically: a crash never leaves a half-written model at ``path``."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(model))
    os.replace(tmp, path)


def load(path) -> SvmModel:
    with open(path, "rb") as fh:
        return loads(fh.read())
