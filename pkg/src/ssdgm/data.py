"""Two-moons data generation, labeled/unlabeled/test splitting, and CSV
persistence.

Geometry: class 0 sits on the upper unit arc (cos t, sin t) and class 1 on
the lower shifted arc (1 - cos t, 0.5 - sin t), t uniform on [0, pi], with
isotropic Gaussian noise added to every point. Files are plain CSV with
header ``x1,x2,label``; label -1 marks an unlabeled row. Floats are printed
with 17 significant digits so a save/load round-trip is value-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, UsageError
from .nn_core import named_rng

HEADER = "x1,x2,label"
UNLABELED = -1

SPLIT_SUFFIXES = ("labeled", "unlabeled", "test")


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    seed: int | None = None
    noise_sigma: float | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise UsageError(f"points must be (n, 2), got {self.points.shape}")
        if self.labels.shape != (self.points.shape[0],):
            raise UsageError("labels length must match points")
        if self.points.shape[0] == 0:
            raise UsageError("dataset must be non-empty")
        if not np.all(np.isfinite(self.points)):
            raise UsageError("points must be finite")
        if self.labels.min(initial=0) < UNLABELED:
            raise UsageError("labels must be >= -1")

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.labels, other.labels))


@dataclass
class DatasetSplit:
    """Labeled/unlabeled/test partition with original-index bookkeeping."""

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_y.shape[0])


def generate_two_moons(n: int, noise_sigma: float = 0.1, seed: int = 0) -> Dataset:
    """n/2 points per class on the two arcs plus isotropic noise."""
    if n < 2 or n % 2 != 0:
        raise UsageError("n must be an even integer >= 2")
    if noise_sigma < 0:
        raise UsageError("noise_sigma must be >= 0")
    half = n // 2
    t = named_rng(seed, "data.t").uniform(0.0, np.pi, size=n)
    points = np.empty((n, 2))
    points[:half, 0] = np.cos(t[:half])
    points[:half, 1] = np.sin(t[:half])
    points[half:, 0] = 1.0 - np.cos(t[half:])
    points[half:, 1] = 0.5 - np.sin(t[half:])
    if noise_sigma > 0:
        points += noise_sigma * named_rng(seed, "data.noise").standard_normal((n, 2))
    labels = np.concatenate([np.zeros(half, dtype=np.int64),
                             np.ones(half, dtype=np.int64)])
    return Dataset(points, labels, seed=seed, noise_sigma=noise_sigma)


def split_labeled(dataset: Dataset, per_class: int, seed: int = 0,
                  test_fraction: float = 0.5, labeled_indices=None) -> DatasetSplit:
    """Hold out the test split first, then pick per_class labeled points
    uniformly from each class of the remainder; the rest is unlabeled.

    labeled_indices overrides the uniform pick with hand-chosen original
    indices; the test split is then drawn from the other points only.
    """
    if np.any(dataset.labels < 0):
        raise UsageError("cannot split a dataset with unlabeled rows")
    if not (0 <= test_fraction < 1):
        raise UsageError("test_fraction must be in [0, 1)")
    n = len(dataset)
    rng = named_rng(seed, "split.perm")

    if labeled_indices is not None:
        labeled_idx = np.unique(np.asarray(labeled_indices, dtype=np.int64))
        if labeled_idx.size == 0 or labeled_idx.min() < 0 or labeled_idx.max() >= n:
            raise UsageError("labeled_indices out of range")
        rest = np.setdiff1d(np.arange(n), labeled_idx)
        perm = rest[rng.permutation(rest.size)]
        n_test = int(round(n * test_fraction))
        if n_test > perm.size:
            raise UsageError("test_fraction leaves no unlabeled points")
        test_idx = np.sort(perm[:n_test])
        unlabeled_idx = np.sort(perm[n_test:])
    else:
        if per_class < 1:
            raise UsageError("per_class must be >= 1")
        perm = rng.permutation(n)
        n_test = int(round(n * test_fraction))
        test_idx = np.sort(perm[:n_test])
        train_idx = perm[n_test:]
        pick_rng = named_rng(seed, "split.labeled")
        chosen = []
        for label in np.unique(dataset.labels):
            candidates = train_idx[dataset.labels[train_idx] == label]
            if candidates.size < per_class:
                raise UsageError(
                    f"class {label} has {candidates.size} training points, "
                    f"need {per_class}")
            chosen.append(pick_rng.choice(candidates, size=per_class,
                                          replace=False))
        labeled_idx = np.sort(np.concatenate(chosen))
        unlabeled_idx = np.sort(np.setdiff1d(train_idx, labeled_idx))

    return DatasetSplit(
        labeled_x=dataset.points[labeled_idx].copy(),
        labeled_y=dataset.labels[labeled_idx].copy(),
        unlabeled_x=dataset.points[unlabeled_idx].copy(),
        test_x=dataset.points[test_idx].copy(),
        test_y=dataset.labels[test_idx].copy(),
        labeled_idx=labeled_idx, unlabeled_idx=unlabeled_idx, test_idx=test_idx)


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------

def _write_rows(path, points, labels) -> None:
    with open(path, "w", newline="") as f:
        f.write(HEADER + "\n")
        for (x1, x2), label in zip(points, labels):
            f.write(f"{x1:.17g},{x2:.17g},{int(label)}\n")


def split_paths(stem: str) -> dict:
    return {kind: f"{stem}.{kind}.csv" for kind in SPLIT_SUFFIXES}


def save_dataset(obj, path: str) -> None:
    """Write a Dataset to one CSV, or a DatasetSplit to three files using
    path as the stem (``<stem>.labeled.csv`` etc.)."""
    if isinstance(obj, Dataset):
        _write_rows(path, obj.points, obj.labels)
    elif isinstance(obj, DatasetSplit):
        paths = split_paths(path)
        _write_rows(paths["labeled"], obj.labeled_x, obj.labeled_y)
        _write_rows(paths["unlabeled"], obj.unlabeled_x,
                    np.full(obj.unlabeled_x.shape[0], UNLABELED))
        _write_rows(paths["test"], obj.test_x, obj.test_y)
    else:
        raise UsageError(f"cannot save a {type(obj).__name__}")


def load_dataset(path: str) -> Dataset:
    """Parse one CSV; malformed content raises with its line number."""
    try:
        with open(path, "r") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e.strerror}") from e
    if not lines or lines[0].strip() != HEADER:
        raise DataFormatError(f"{path} line 1: expected header '{HEADER}'")
    points = []
    labels = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 3:
            raise DataFormatError(
                f"{path} line {lineno}: expected 3 fields, got {len(fields)}")
        try:
            x1, x2 = float(fields[0]), float(fields[1])
            label = int(fields[2])
        except ValueError as e:
            raise DataFormatError(f"{path} line {lineno}: {e}") from e
        if not (np.isfinite(x1) and np.isfinite(x2)):
            raise DataFormatError(f"{path} line {lineno}: non-finite coordinate")
        if label < UNLABELED:
            raise DataFormatError(f"{path} line {lineno}: label {label} < -1")
        points.append((x1, x2))
        labels.append(label)
    if not points:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(np.array(points), np.array(labels, dtype=np.int64))


def load_split(stem: str) -> DatasetSplit:
    """Load the three split files written by save_dataset on a split."""
    paths = split_paths(stem)
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise DataFormatError(f"missing split files: {', '.join(missing)}")
    labeled = load_dataset(paths["labeled"])
    unlabeled = load_dataset(paths["unlabeled"])
    test = load_dataset(paths["test"])
    if np.any(labeled.labels < 0) or np.any(test.labels < 0):
        raise DataFormatError("labeled/test files may not contain label -1")
    n_lab, n_unl, n_test = len(labeled), len(unlabeled), len(test)
    return DatasetSplit(
        labeled_x=labeled.points, labeled_y=labeled.labels,
        unlabeled_x=unlabeled.points, test_x=test.points, test_y=test.labels,
        labeled_idx=np.arange(n_lab),
        unlabeled_idx=np.arange(n_lab, n_lab + n_unl),
        test_idx=np.arange(n_lab + n_unl, n_lab + n_unl + n_test))


def split_from_mixed(dataset: Dataset, test_dataset: Dataset | None = None) -> DatasetSplit:
    """Build a split from one mixed CSV: rows labeled -1 become the
    unlabeled pool, the rest the labeled set. Test rows are optional."""
    mask = dataset.labels == UNLABELED
    labeled_idx = np.where(~mask)[0]
    unlabeled_idx = np.where(mask)[0]
    if test_dataset is not None:
        test_x, test_y = test_dataset.points, test_dataset.labels
        if np.any(test_y < 0):
            raise UsageError("test data may not contain unlabeled rows")
    else:
        test_x = np.zeros((0, 2))
        test_y = np.zeros(0, dtype=np.int64)
    return DatasetSplit(
        labeled_x=dataset.points[labeled_idx], labeled_y=dataset.labels[labeled_idx],
        unlabeled_x=dataset.points[unlabeled_idx],
        test_x=test_x, test_y=test_y,
        labeled_idx=labeled_idx, unlabeled_idx=unlabeled_idx,
        test_idx=np.arange(len(dataset), len(dataset) + test_x.shape[0]))
