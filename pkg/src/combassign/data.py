"""Synthetic Gaussian mixtures with class-imbalance resampling, plus CSV feature I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ContractError, Prior

# Per-class keep probabilities for ten classes.
IMBALANCE_SCHEDULES = {
    1: np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.95, 0.9, 0.85, 0.8]),
    2: np.array([1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55]),
    3: np.array([1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]),
}


class DataFormatError(ValueError):
    pass


def _stream(seed: int, tag: int) -> np.random.Generator:
    # independent child streams: 0 = means, 1 = sampling, 2 = subsampling
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[tag])


@dataclass(frozen=True)
class GmmSpec:
    means: np.ndarray
    stddev: float = 1.0
    weights: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2:
            raise ContractError("means must be a K x d matrix")
        if not self.stddev > 0:
            raise ContractError("stddev must be positive")
        w = np.full(means.shape[0], 1.0 / means.shape[0]) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (means.shape[0],) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ContractError("weights must be a probability vector with one entry per component")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @classmethod
    def desk(cls, k: int = 10, d: int = 16, sep: float = 6.0, stddev: float = 1.0, seed: int = 0) -> "GmmSpec":
        """Means at ``sep`` times random unit directions; the default collapse testbed."""
        rng = _stream(seed, 0)
        dirs = rng.standard_normal((k, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return cls(sep * dirs, stddev, None, seed)


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    k: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractError("features must be an N x d matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ContractError("need one label per row")
            if self.k is None:
                self.k = int(self.labels.max()) + 1 if self.labels.size else 0
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
                raise ContractError("labels out of range")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def class_frequencies(self) -> np.ndarray | None:
        if self.labels is None:
            return None
        return np.bincount(self.labels, minlength=self.k) / len(self)

    def subset(self, mask) -> "LabeledDataset":
        labels = None if self.labels is None else self.labels[mask]
        return LabeledDataset(self.features[mask], labels, self.k)


def gmm_generate(spec: GmmSpec, n: int) -> LabeledDataset:
    if n < 1:
        raise ContractError("n must be at least 1")
    rng = _stream(spec.seed, 1)
    labels = rng.choice(spec.k, size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.d))
    return LabeledDataset(spec.means[labels] + spec.stddev * noise, labels, spec.k)


def keep_probabilities(schedule, k: int) -> np.ndarray:
    """Keep curve for ``k`` classes; ten-class schedules are linearly resampled for other K."""
    if isinstance(schedule, (int, np.integer)) and not isinstance(schedule, bool):
        if schedule not in IMBALANCE_SCHEDULES:
            raise ContractError(f"unknown imbalance schedule {schedule}")
        base = IMBALANCE_SCHEDULES[int(schedule)]
        if k == base.size:
            return base.copy()
        return np.interp(np.linspace(0, base.size - 1, k), np.arange(base.size), base)
    keep = np.asarray(schedule, dtype=np.float64)
    if keep.shape != (k,):
        raise ContractError(f"explicit schedule has {keep.size} entries for {k} classes")
    if np.any(keep < 0) or np.any(keep > 1) or not np.any(keep > 0):
        raise ContractError("keep probabilities must lie in [0, 1] and not all be zero")
    return keep


def apply_imbalance(dataset: LabeledDataset, schedule, seed: int = 0, exact: bool = False):
    """Subsample classes by their keep probability; returns the dataset and the induced prior.

    By default every point survives an independent coin flip. ``exact=True``
    keeps round(keep * class size) points per class instead.
    """
    if dataset.labels is None:
        raise ContractError("imbalance needs class labels")
    keep = keep_probabilities(schedule, dataset.k)
    rng = _stream(seed, 2)
    if exact:
        mask = np.zeros(len(dataset), dtype=bool)
        for c in range(dataset.k):
            idx = np.flatnonzero(dataset.labels == c)
            chosen = rng.permutation(idx)[: int(round(keep[c] * idx.size))]
            mask[chosen] = True
    else:
        mask = rng.random(len(dataset)) < keep[dataset.labels]
    return dataset.subset(mask), Prior.from_weights(keep)


def save_csv(path, dataset: LabeledDataset) -> None:
    """Write features with 17 significant digits; a trailing ``label`` column if labels exist."""
    d = dataset.features.shape[1]
    header = [f"f{j}" for j in range(d)]
    if dataset.labels is not None:
        header.append("label")
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for i, row in enumerate(dataset.features):
            cells = [format(float(x), ".17g") for x in row]
            if dataset.labels is not None:
                cells.append(str(int(dataset.labels[i])))
            f.write(",".join(cells) + "\n")


def load_csv(path, k: int | None = None) -> LabeledDataset:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        has_label = bool(header) and header[-1] == "label"
        width = len(header)
        feats, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(f"{path}:{line}: expected {width} cells, found {len(row)}")
            cells = row[:-1] if has_label else row
            try:
                feats.append([float(c) for c in cells])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line}: non-numeric cell ({exc})") from None
            if has_label:
                try:
                    labels.append(int(row[-1]))
                except ValueError:
                    raise DataFormatError(f"{path}:{line}: label {row[-1]!r} is not an integer") from None
    if not feats:
        raise DataFormatError(f"{path}: no data rows")
    features = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise DataFormatError(f"{path}: non-finite feature values")
    return LabeledDataset(features, np.array(labels, dtype=np.int64) if has_label else None, k)
