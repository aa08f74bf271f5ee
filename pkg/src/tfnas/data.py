"""Seeded Gaussian-mixture classification data and stratified splits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DataError, ParseError


@dataclass(frozen=True)
class DataSpec:
    n_samples: int = 1000
    class_count: int = 10
    dim: int = 16
    clusters_per_class: int = 2
    spread: float = 1.6
    center_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < self.class_count or self.class_count < 2:
            raise DataError("need at least two classes and one sample per class")
        if self.dim < 1 or self.clusters_per_class < 1 or self.spread < 0:
            raise DataError("invalid dataset geometry")

    @classmethod
    def load(cls, path) -> "DataSpec":
        try:
            d = json.loads(Path(path).read_text())
            return cls(**d)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: line {e.lineno}: {e.msg}") from None
        except TypeError as e:
            raise ParseError(f"{path}: {e}") from None

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    spec: DataSpec

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> Tuple[np.ndarray, np.ndarray]:
        return self.X[idx], self.y[idx]


def make_dataset(spec: DataSpec) -> Dataset:
    """Class ``c`` draws from ``clusters_per_class`` isotropic Gaussians."""
    rng = np.random.default_rng(spec.seed)
    k = spec.class_count * spec.clusters_per_class
    centers = rng.standard_normal((k, spec.dim)) * spec.center_scale * np.sqrt(spec.dim) / 2
    y = np.arange(spec.n_samples) % spec.class_count
    rng.shuffle(y)
    cluster = y * spec.clusters_per_class + rng.integers(spec.clusters_per_class,
                                                         size=spec.n_samples)
    X = centers[cluster] + spec.spread * rng.standard_normal((spec.n_samples, spec.dim))
    return Dataset(X, y.astype(np.int64), spec)


def stratified_split(y, fractions: Sequence[float], seed: int) -> List[np.ndarray]:
    """Disjoint index sets with per-class proportions ``fractions``."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise DataError("split fractions must be non-negative and sum to 1")
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    parts: List[list] = [[] for _ in fractions]
    bounds = np.cumsum(fractions)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        cuts = np.rint(bounds * len(idx)).astype(int)
        start = 0
        for p, end in zip(parts, cuts):
            p.extend(idx[start:end])
            start = end
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def split_indices(y, fraction: float = 0.8, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    a, b = stratified_split(y, [fraction, 1.0 - fraction], seed)
    return a, b
