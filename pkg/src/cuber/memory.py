"""Per-task subspace memory.

After each task the memory stores, for every projected layer, an orthonormal
basis of that task's input representations, together with a top-k pruned copy
of the task's final average weight gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .linalg import RANK_RTOL, empty_basis, is_orthonormal, orthonormalize, svd
from .network import LayerGradients, Network, forward

CHECKPOINT_VERSION = 1
DEDUP_TOL = 1e-8


def eps_threshold(task_index: int, base: float = 0.97, step: float = 0.003, cap: float = 0.999) -> float:
    """Energy threshold for the ``task_index``-th task (1-based)."""
    return min(base + step * (task_index - 1), cap)


def collect_representations(net: Network, x, task, n: int, rng: Optional[np.random.Generator] = None,
                            weights=None) -> list[np.ndarray]:
    """Stack the inputs of every projected layer for ``n`` samples (rows = samples).

    When ``n`` equals the dataset size the full dataset is used in order.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    if n > len(x):
        raise ValueError(f"requested {n} samples from a dataset of {len(x)}")
    if n == len(x) or rng is None:
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(len(x), size=n, replace=False))
    trace = forward(net, x[idx], task, weights)
    return trace.inputs[: net.n_projected]


def extract_bases(rep, old_bases: Sequence[np.ndarray], eps_th: float) -> np.ndarray:
    """Basis for a new task from its representation matrix ``rep`` (n x d).

    Old directions and new residual directions are pooled and ranked by the
    energy ``||rep @ v||^2`` they capture. The highest-ranked ones are admitted
    until the admitted energy reaches ``eps_th * ||rep||_F^2``.
    """
    if not 0.0 < eps_th < 1.0:
        raise ValueError("eps_th must lie in (0, 1)")
    r = np.asarray(rep, dtype=np.float64)
    d = r.shape[1]
    for b in old_bases:
        if b.shape[0] != d:
            raise ValueError("old basis dimension does not match the representation")
    stacked = np.column_stack(old_bases) if old_bases else empty_basis(d)
    o = orthonormalize(stacked, DEDUP_TOL) if stacked.shape[1] else stacked

    residual = r - (r @ o) @ o.T if o.shape[1] else r
    res = svd(residual.T)
    s = res.singular_values
    # rank cutoff relative to the representation itself: a residual made of
    # rounding noise must not contribute directions
    smax = float(np.linalg.norm(r, 2)) if r.size else 0.0
    live = s > RANK_RTOL * smax if smax > 0 else np.zeros(s.size, dtype=bool)
    u = res.u[:, live]

    candidates = np.column_stack([o, u]) if o.shape[1] or u.shape[1] else empty_basis(d)
    if candidates.shape[1] == 0:
        return empty_basis(d)
    energy = np.sum((r @ candidates) ** 2, axis=0)
    total = float(np.sum(r * r))
    order = np.argsort(-energy, kind="stable")
    target = eps_th * total
    admitted, acc = [], 0.0
    for i in order:
        if acc >= target:
            break
        admitted.append(i)
        acc += energy[i]
    return orthonormalize(candidates[:, sorted(admitted)], DEDUP_TOL)


@dataclass
class SparseVector:
    """Top-k entries of a flattened matrix."""

    indices: np.ndarray
    values: np.ndarray
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def dense(self) -> np.ndarray:
        out = np.zeros(self.size)
        out[self.indices] = self.values
        return out.reshape(self.shape)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def prune_top_k(matrix, sparsity: float) -> SparseVector:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    a = np.asarray(matrix, dtype=np.float64)
    flat = a.ravel()
    # round first so that e.g. 0.5 * 4 is not ceiled to 3 by float error
    k = math.ceil(round((1.0 - sparsity) * flat.size, 9))
    order = np.argsort(-np.abs(flat), kind="stable")[:k]
    idx = np.sort(order)
    return SparseVector(idx.astype(np.int64), flat[idx].copy(), a.shape)


@dataclass
class GradientSnapshot:
    layers: list[SparseVector]
    sparsity: float


def snapshot_gradient(grads: Union[LayerGradients, Sequence[np.ndarray]], sparsity: float = 0.9) -> GradientSnapshot:
    """Keep the ``ceil((1 - sparsity) * size)`` largest-magnitude weight-gradient entries per layer.

    Ties go to the lower flat index.
    """
    mats = grads.weights if isinstance(grads, LayerGradients) else list(grads)
    return GradientSnapshot([prune_top_k(g, sparsity) for g in mats], sparsity)


def sparse_cosine(snap: SparseVector, dense) -> float:
    g = np.asarray(dense, dtype=np.float64).ravel()
    if g.size != snap.size:
        raise ValueError(f"snapshot of size {snap.size} vs gradient of size {g.size}")
    ns, ng = snap.norm(), float(np.linalg.norm(g))
    if ns == 0.0 or ng == 0.0:
        return 0.0
    c = float(np.dot(snap.values, g[snap.indices])) / (ns * ng)
    return max(-1.0, min(1.0, c))


@dataclass
class SubspaceMemory:
    """Bases keyed by ``(layer, task)`` and one gradient snapshot per task."""

    bases: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)
    n_samples: int = 125
    eps_base: Union[float, Sequence[float]] = 0.97
    eps_step: float = 0.003
    eps_cap: float = 0.999

    @property
    def tasks(self) -> list:
        return sorted({t for (_, t) in self.bases})

    def basis(self, layer: int, task) -> np.ndarray:
        return self.bases[(layer, task)]

    def threshold(self, task_index: int, layer: int) -> float:
        base = self.eps_base if np.isscalar(self.eps_base) else self.eps_base[layer]
        return eps_threshold(task_index, float(base), self.eps_step, self.eps_cap)

    def add_task(self, task, reps: Sequence[np.ndarray], snapshot: GradientSnapshot, task_index: int) -> list[np.ndarray]:
        """Extract and store bases for ``task`` from its per-layer representations."""
        old = self.tasks
        new = []
        for layer, rep in enumerate(reps):
            olds = [self.bases[(layer, j)] for j in old]
            b = extract_bases(rep, olds, self.threshold(task_index, layer))
            assert is_orthonormal(b)
            new.append(b)
        for layer, b in enumerate(new):
            self.bases[(layer, task)] = b
        self.snapshots[task] = snapshot
        return new

    def union_basis(self, layer: int, tasks, dim: int) -> np.ndarray:
        mats = [self.bases[(layer, j)] for j in tasks]
        if not mats:
            return empty_basis(dim)
        return orthonormalize(np.column_stack(mats), DEDUP_TOL)

    def save(self, path) -> None:
        """Write an ``.npz`` checkpoint; see the README for the key layout."""
        arrays = {
            "format_version": np.array(CHECKPOINT_VERSION),
            "config": np.array([self.n_samples, self.eps_step, self.eps_cap], dtype=np.float64),
            "eps_base": np.atleast_1d(np.asarray(self.eps_base, dtype=np.float64)),
            "eps_base_scalar": np.array(np.isscalar(self.eps_base)),
        }
        for (layer, task), b in self.bases.items():
            arrays[f"basis/{layer}/{task}"] = b
        for task, snap in self.snapshots.items():
            arrays[f"snap/{task}/sparsity"] = np.array(snap.sparsity)
            for layer, sv in enumerate(snap.layers):
                arrays[f"snap/{task}/{layer}/indices"] = sv.indices
                arrays[f"snap/{task}/{layer}/values"] = sv.values
                arrays[f"snap/{task}/{layer}/shape"] = np.array(sv.shape, dtype=np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "SubspaceMemory":
        with np.load(Path(path), allow_pickle=False) as z:
            version = int(z["format_version"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            n_samples, step, cap = z["config"]
            eps = z["eps_base"]
            mem = cls(n_samples=int(n_samples), eps_step=float(step), eps_cap=float(cap),
                      eps_base=float(eps[0]) if bool(z["eps_base_scalar"]) else tuple(float(e) for e in eps))
            snaps: dict = {}
            for key in z.files:
                parts = key.split("/")
                if parts[0] == "basis":
                    mem.bases[(int(parts[1]), int(parts[2]))] = z[key]
                elif parts[0] == "snap" and len(parts) == 4 and parts[3] == "indices":
                    task, layer = int(parts[1]), int(parts[2])
                    pre = f"snap/{task}/{layer}/"
                    sv = SparseVector(z[pre + "indices"], z[pre + "values"], tuple(int(s) for s in z[pre + "shape"]))
                    snaps.setdefault(task, {})[layer] = sv
            for task, layers in snaps.items():
                mem.snapshots[task] = GradientSnapshot(
                    [layers[i] for i in range(len(layers))], float(z[f"snap/{task}/sparsity"]))
        return mem
