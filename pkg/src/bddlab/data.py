"""Seeded synthetic datasets for classification and per-cell segmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import ParameterError

DATASET_VERSION = 1


@dataclass
class ClassificationDataset:
    features: np.ndarray  # [N, D]
    labels: np.ndarray  # [N]
    num_classes: int
    seed: int
    split: str = "full"

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray, split: str) -> ClassificationDataset:
        return replace(self, features=self.features[idx], labels=self.labels[idx], split=split)


@dataclass
class SegmentationGridDataset:
    features: np.ndarray  # [N, D, H, W]
    labels: np.ndarray  # [N, H, W]
    num_classes: int
    seed: int
    split: str = "full"

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray, split: str) -> SegmentationGridDataset:
        return replace(self, features=self.features[idx], labels=self.labels[idx], split=split)


def class_means(C: int, D: int, separation: float, overlap: float, rng: np.random.Generator) -> np.ndarray:
    """Means on orthogonal directions (random unit ones if D < C), twin pairs pulled together."""
    if D >= C:
        q, _ = np.linalg.qr(rng.standard_normal((D, C)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((C, D))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    for k in range(0, C - 1, 2):
        mid = 0.5 * (means[k] + means[k + 1])
        means[k] = mid + (1.0 - overlap) * (means[k] - mid)
        means[k + 1] = mid + (1.0 - overlap) * (means[k + 1] - mid)
    return means


def gen_gaussian_mixture(
    C: int = 10,
    D: int = 16,
    n_per_class: int = 500,
    overlap: float = 0.6,
    seed: int = 0,
    separation: float = 6.0,
) -> ClassificationDataset:
    """Isotropic unit-variance blobs; classes (2k, 2k+1) are deliberately confusable twins."""
    if C < 2 or D < 2 or n_per_class < 1:
        raise ParameterError(f"need C >= 2, D >= 2, n_per_class >= 1 (got C={C}, D={D}, n={n_per_class})")
    if not 0.0 <= overlap <= 1.0:
        raise ParameterError(f"overlap must lie in [0, 1], got {overlap}")
    rng = np.random.default_rng(seed)
    means = class_means(C, D, separation, overlap, rng)
    labels = np.repeat(np.arange(C), n_per_class)
    features = means[labels] + rng.standard_normal((C * n_per_class, D))
    order = rng.permutation(len(labels))
    return ClassificationDataset(features[order], labels[order], C, seed)


def gen_segmentation_grids(
    C: int = 4,
    H: int = 16,
    W: int = 16,
    n: int = 400,
    seed: int = 0,
    D: int = 8,
    noise: float = 1.0,
    separation: float = 2.5,
    full_grid_class: int | None = None,
) -> SegmentationGridDataset:
    """Background class 0 with 1-3 random rectangles of other classes per grid.

    ``full_grid_class`` replaces the random layout with one rectangle
    covering the whole grid, a degenerate layout used in tests.
    """
    if C < 2 or H < 4 or W < 4 or n < 1:
        raise ParameterError(f"need C >= 2, H, W >= 4, n >= 1 (got C={C}, H={H}, W={W}, n={n})")
    rng = np.random.default_rng(seed)
    means = class_means(C, D, separation, 0.0, rng)
    labels = np.zeros((n, H, W), dtype=np.int64)
    for i in range(n):
        if full_grid_class is not None:
            labels[i] = full_grid_class
            continue
        while True:
            grid = np.zeros((H, W), dtype=np.int64)
            for _ in range(rng.integers(1, 4)):
                rh = rng.integers(2, H // 2 + 1)
                rw = rng.integers(2, W // 2 + 1)
                top = rng.integers(0, H - rh + 1)
                left = rng.integers(0, W - rw + 1)
                grid[top : top + rh, left : left + rw] = rng.integers(1, C)
            if len(np.unique(grid)) >= 2:
                break
        labels[i] = grid
    cells = means[labels] + noise * rng.standard_normal((n, H, W, D))
    return SegmentationGridDataset(np.ascontiguousarray(cells.transpose(0, 3, 1, 2)), labels, C, seed)


def train_val_split(ds, fraction: float = 0.8, seed: int = 0):
    """Seeded disjoint split; stratified per class for classification data."""
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    if isinstance(ds, ClassificationDataset):
        train_idx, val_idx = [], []
        for c in range(ds.num_classes):
            idx = np.flatnonzero(ds.labels == c)
            idx = idx[rng.permutation(len(idx))]
            k = int(round(fraction * len(idx)))
            train_idx.append(idx[:k])
            val_idx.append(idx[k:])
        tr = np.sort(np.concatenate(train_idx))
        va = np.sort(np.concatenate(val_idx))
    else:
        perm = rng.permutation(len(ds))
        k = int(round(fraction * len(ds)))
        tr, va = np.sort(perm[:k]), np.sort(perm[k:])
    return ds.subset(tr, "train"), ds.subset(va, "val")


def save_dataset(ds, path: str | Path) -> Path:
    """Binary .npz with a header of kind, N, per-sample feature shape, C, seed and split."""
    path = Path(path)
    kind = "classification" if isinstance(ds, ClassificationDataset) else "segmentation"
    header = {
        "version": np.array(DATASET_VERSION),
        "kind": np.array(kind),
        "N": np.array(len(ds)),
        "feature_shape": np.array(ds.features.shape[1:], dtype=np.int64),
        "num_classes": np.array(ds.num_classes),
        "seed": np.array(ds.seed),
        "split": np.array(ds.split),
    }
    with open(path, "wb") as fh:
        np.savez(fh, features=ds.features, labels=ds.labels, **header)
    return path


def load_dataset(path: str | Path):
    with np.load(Path(path)) as z:
        if int(z["version"]) != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {int(z['version'])}")
        cls = ClassificationDataset if str(z["kind"]) == "classification" else SegmentationGridDataset
        ds = cls(z["features"], z["labels"], int(z["num_classes"]), int(z["seed"]), str(z["split"]))
    if len(ds) != ds.features.shape[0]:
        raise ValueError("feature and label counts disagree")
    return ds
