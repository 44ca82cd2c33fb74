"""Loaders for the bundled benchmark files and a seeded synthetic generator."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .dataio import CATEGORICAL, NUMERIC, RawDataset, parse_dense

__all__ = ["data_dir", "load_adult", "load_mushroom", "train_test_split", "gaussian_clouds"]

# Adult: age, workclass, fnlwgt, education, education-num, marital-status,
# occupation, relationship, race, sex, capital-gain, capital-loss, hours-per-week,
# native-country
ADULT_SCHEMA = [
    NUMERIC, CATEGORICAL, NUMERIC, CATEGORICAL, NUMERIC, CATEGORICAL, CATEGORICAL,
    CATEGORICAL, CATEGORICAL, CATEGORICAL, NUMERIC, NUMERIC, NUMERIC, CATEGORICAL,
]
MUSHROOM_SCHEMA = [CATEGORICAL] * 22


def data_dir() -> Path:
    """``$IPSVM_DATA`` if set, else the ``data/`` directory of a source checkout."""
    env = os.environ.get("IPSVM_DATA")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data"


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run scripts/fetch_datasets.py or set IPSVM_DATA")
    return path


def _strip_period(data: RawDataset) -> RawDataset:
    # the test file writes its labels as ">50K." and "<=50K."
    data.labels = [t.rstrip(".") for t in data.labels]
    return data


def load_adult(root=None) -> tuple[RawDataset, RawDataset]:
    """The standard train/test files; ``>50K`` is the positive class."""
    root = Path(root) if root is not None else data_dir()
    classes = (">50K", "<=50K")
    train = parse_dense(_require(root / "adult.data"), label=-1, schema=ADULT_SCHEMA,
                        classes=classes)
    test = _strip_period(parse_dense(_require(root / "adult.test"), label=-1, schema=ADULT_SCHEMA,
                                     comment="|", classes=(">50K.", "<=50K.")))
    test.classes = classes
    return train, test


def train_test_split(data: RawDataset, test_fraction: float = 0.2, seed: int = 0):
    """Seeded random split; returns ``(train, test)`` with row order shuffled."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(data.n)
    n_test = int(round(test_fraction * data.n))
    return data.take(np.sort(perm[n_test:])), data.take(np.sort(perm[:n_test]))


def load_mushroom(root=None, seed: int = 0, test_fraction: float = 0.2) -> tuple[RawDataset, RawDataset]:
    """80/20 split of the mushroom file; edible (``e``) is the positive class."""
    root = Path(root) if root is not None else data_dir()
    data = parse_dense(_require(root / "mushroom.csv"), label=0, schema=MUSHROOM_SCHEMA,
                       classes=("e", "p"))
    return train_test_split(data, test_fraction, seed)


def gaussian_clouds(n: int, m: int, separation: float = 1.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two unit-variance clouds centred at ``+-separation * e / sqrt(m)``.

    Returns features ``X`` (n x m) and labels ``d`` in {+1, -1}, half of each
    (the extra row of an odd ``n`` goes to +1).
    """
    if n < 2 or m < 1:
        raise ValueError("need n >= 2 and m >= 1")
    rng = np.random.default_rng(seed)
    d = np.where(np.arange(n) < (n + 1) // 2, 1.0, -1.0)
    rng.shuffle(d)
    X = rng.standard_normal((n, m))
    X += (separation / np.sqrt(m)) * d[:, None]
    return X, d
