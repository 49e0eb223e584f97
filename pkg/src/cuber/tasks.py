"""Desk-scale task sequences.

A synthetic Gaussian-blob base dataset stands in for image benchmarks. Task
sequences are built from it either by permuting input coordinates
(single-head, shared labels) or by carving possibly overlapping class ranges
(multi-head, local labels).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class TaskDataset:
    train: tuple
    valid: tuple
    test: tuple
    task_id: int = 0
    class_map: dict = field(default_factory=dict)
    n_classes: int = 0
    # ids of the base samples in each split, used to reason about overlap
    sample_ids: dict = field(default_factory=dict)
    permutation: np.ndarray | None = None

    def __post_init__(self):
        dims = {np.asarray(s[0]).shape[1] for s in (self.train, self.valid, self.test) if len(s[0])}
        if len(dims) > 1:
            raise ValueError("feature dimension differs between splits")
        if not self.n_classes:
            self.n_classes = int(max(int(np.max(s[1])) for s in (self.train, self.valid, self.test) if len(s[1])) + 1)
        for s in (self.train, self.valid, self.test):
            if len(s[1]) and int(np.max(s[1])) >= self.n_classes:
                raise ValueError("label exceeds the number of local classes")

    @property
    def dim(self) -> int:
        return np.asarray(self.train[0]).shape[1]

    def splits(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}


def _split_by_class(x, y, rng, fractions=(0.8, 0.1, 0.1)):
    """Deterministic per-class 80/10/10 split; returns index arrays."""
    parts = ([], [], [])
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def dataset_from_arrays(x, y, seed: int = 0, task_id: int = 0) -> TaskDataset:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    tr, va, te = _split_by_class(x, y, rng)
    classes = np.unique(y)
    return TaskDataset(
        (x[tr], y[tr]), (x[va], y[va]), (x[te], y[te]),
        task_id=task_id,
        class_map={int(c): int(c) for c in classes},
        n_classes=int(y.max()) + 1,
        sample_ids={"train": tr, "valid": va, "test": te},
    )


def generate_synthetic_base(n_classes: int = 15, dim: int = 32, per_class: int = 200,
                            separation: float = 4.0, seed: int = 0, noise: float = 1.0,
                            noise_rank: int | None = None) -> TaskDataset:
    """Gaussian blobs whose class means are pairwise at least ``separation`` apart.

    With ``noise_rank`` set, each class varies only inside its own random
    ``noise_rank``-dimensional subspace, so classes (and the tasks built from
    them) occupy distinct low-dimensional input subspaces.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if per_class <= 0 or n_classes <= 0:
        raise ValueError("need at least one class and one sample per class")
    if noise_rank is not None and not 0 < noise_rank <= dim:
        raise ValueError("noise_rank must lie in [1, dim]")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, dim))
    if n_classes > 1:
        dist = np.linalg.norm(means[:, None] - means[None], axis=-1)
        closest = dist[~np.eye(n_classes, dtype=bool)].min()
        means *= separation / closest
    if noise_rank is None:
        x = np.concatenate([m + noise * rng.normal(size=(per_class, dim)) for m in means])
    else:
        parts = []
        for m in means:
            frame, _ = np.linalg.qr(rng.normal(size=(dim, noise_rank)))
            parts.append(m + noise * rng.normal(size=(per_class, noise_rank)) @ frame.T)
        x = np.concatenate(parts)
    y = np.repeat(np.arange(n_classes), per_class)
    return dataset_from_arrays(x, y, seed=seed)


def load_csv_dataset(path, seed: int = 0) -> TaskDataset:
    """Read ``n,d`` then ``n`` rows of ``d`` floats and an integer label."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    n, d = (int(v) for v in rows[0][:2])
    body = [r for r in rows[1:] if r]
    if len(body) != n:
        raise ValueError(f"header promises {n} rows, found {len(body)}")
    x = np.array([[float(v) for v in r[:d]] for r in body])
    y = np.array([int(r[d]) for r in body])
    return dataset_from_arrays(x, y, seed=seed)


def save_csv_dataset(path, x, y) -> None:
    x = np.asarray(x)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([len(x), x.shape[1]])
        for row, label in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def generate_permuted_tasks(base: TaskDataset, t_count: int, seed: int = 0) -> list[TaskDataset]:
    """Task 0 keeps the identity; task ``i`` permutes input coordinates by a seeded ``pi_i``."""
    if t_count < 1:
        raise ValueError("t_count must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(t_count):
        perm = np.arange(base.dim) if i == 0 else rng.permutation(base.dim)
        splits = {k: (np.asarray(v[0])[:, perm], np.asarray(v[1])) for k, v in base.splits().items()}
        out.append(replace(base, task_id=i, permutation=perm, **splits))
    return out


def generate_overlap_split_tasks(base: TaskDataset, task_class_ranges: Sequence[tuple], seed: int = 0) -> list[TaskDataset]:
    """One task per inclusive class range ``(lo, hi)``, relabeled to ``0..hi-lo``.

    Overlapping ranges share the underlying samples.
    """
    out = []
    for i, (lo, hi) in enumerate(task_class_ranges):
        if lo < 0 or hi < lo or hi >= base.n_classes:
            raise ValueError(f"class range {(lo, hi)} invalid for {base.n_classes} classes")
        cmap = {c: c - lo for c in range(lo, hi + 1)}
        splits, ids = {}, {}
        for name, (x, y) in base.splits().items():
            y = np.asarray(y)
            keep = np.flatnonzero((y >= lo) & (y <= hi))
            splits[name] = (np.asarray(x)[keep], y[keep] - lo)
            base_ids = base.sample_ids.get(name)
            ids[name] = base_ids[keep] if base_ids is not None else keep
        out.append(TaskDataset(splits["train"], splits["valid"], splits["test"], task_id=i,
                               class_map=cmap, n_classes=hi - lo + 1, sample_ids=ids))
    return out


def overlapping_ranges(t_count: int, width: int, stride: int) -> list[tuple]:
    """Ranges of ``width`` classes starting every ``stride`` classes."""
    return [(i * stride, i * stride + width - 1) for i in range(t_count)]


def generate_conflicting_tasks(base: TaskDataset, flip: float = 0.3, seed: int = 0) -> list[TaskDataset]:
    """Two tasks on the same inputs; the second relabels a random ``flip`` fraction.

    Fitting the shared labels first helps the old task, then only the flipped
    samples are left and the new gradient turns against it. Meant for a
    shared (single-head) classifier.
    """
    if not 0.0 < flip < 1.0:
        raise ValueError("flip must lie in (0, 1)")
    if base.n_classes < 2:
        raise ValueError("need at least two classes to relabel")
    rng = np.random.default_rng(seed)
    splits = {}
    for name, (x, y) in base.splits().items():
        y = np.asarray(y).copy()
        m = rng.random(len(y)) < flip
        # move flipped samples to a different class
        y[m] = (y[m] + rng.integers(1, base.n_classes, size=int(m.sum()))) % base.n_classes
        splits[name] = (np.asarray(x), y)
    second = replace(base, task_id=1, **splits)
    return [replace(base, task_id=0), second]
