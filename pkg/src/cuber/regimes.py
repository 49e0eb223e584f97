"""Layer-wise task-correlation detection.

Before a new task is trained, every old task ``j`` is placed, per layer, in
one of three regimes:

1. the new gradient barely projects onto ``j``'s input subspace (freeze ``j``);
2. it projects strongly but conflicts with ``j``'s stored gradient
   (reuse ``j`` through scaling, still freeze it);
3. it projects strongly and agrees with ``j``'s stored gradient
   (allow a regularized update inside ``j``'s subspace).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .memory import SparseVector, SubspaceMemory, sparse_cosine


@dataclass(frozen=True)
class CorrelationThresholds:
    eps1: float = 0.5
    eps2: float = 0.0
    cap: int = 2

    def __post_init__(self):
        if not 0.0 < self.eps1 < 1.0:
            raise ValueError("eps1 must lie in (0, 1)")
        if not 0.0 <= self.eps2 < 1.0:
            raise ValueError("eps2 must lie in [0, 1)")
        if self.cap < 0:
            raise ValueError("cap must be nonnegative")


@dataclass
class LayerRegimes:
    reg1: set = field(default_factory=set)
    reg2: set = field(default_factory=set)
    reg3: set = field(default_factory=set)
    projection: dict = field(default_factory=dict)
    cosine: dict = field(default_factory=dict)
    zero_gradient: bool = False

    @property
    def reg23(self) -> set:
        return self.reg2 | self.reg3

    @property
    def reg12(self) -> set:
        return self.reg1 | self.reg2

    def regime_of(self, task) -> int:
        if task in self.reg3:
            return 3
        if task in self.reg2:
            return 2
        return 1


@dataclass
class RegimeAssignment:
    layers: list[LayerRegimes]

    def demote(self, layer: int, task) -> None:
        """Move ``task`` from regime 3 to regime 2 on ``layer``."""
        lr = self.layers[layer]
        lr.reg3.discard(task)
        lr.reg2.add(task)

    def reg3_layer_counts(self) -> dict:
        counts: dict = {}
        for lr in self.layers:
            for j in lr.reg3:
                counts[j] = counts.get(j, 0) + 1
        return counts

    def to_dict(self) -> list[dict]:
        return [
            {
                "reg1": sorted(lr.reg1),
                "reg2": sorted(lr.reg2),
                "reg3": sorted(lr.reg3),
                "projection": {str(k): v for k, v in sorted(lr.projection.items())},
                "cosine": {str(k): v for k, v in sorted(lr.cosine.items())},
                "zero_gradient": lr.zero_gradient,
            }
            for lr in self.layers
        ]


def projection_ratio(grad: np.ndarray, basis: np.ndarray) -> float:
    """``||grad B B'|| / ||grad||``, 0 for a zero gradient."""
    gn = float(np.linalg.norm(grad))
    if gn == 0.0 or basis.shape[1] == 0:
        return 0.0
    # a basis of the whole space keeps every gradient: report exactly 1 so
    # such tasks tie (and fall back to task order) instead of splitting on rounding
    if basis.shape[1] == basis.shape[0]:
        return 1.0
    # ||g B B'||_F = ||g B||_F for orthonormal B
    return min(float(np.linalg.norm(grad @ basis)) / gn, 1.0)


def detect_layer(grad: np.ndarray, bases: dict, snapshots: dict, th: CorrelationThresholds,
                 allow_reg3: bool = True) -> LayerRegimes:
    """``bases`` and ``snapshots`` map old task id -> basis / SparseVector for this layer."""
    out = LayerRegimes()
    tasks = sorted(bases)
    if float(np.linalg.norm(grad)) == 0.0:
        out.reg1.update(tasks)
        out.zero_gradient = True
        for j in tasks:
            out.projection[j] = 0.0
            out.cosine[j] = 0.0
        return out
    for j in tasks:
        out.projection[j] = projection_ratio(grad, bases[j])
        out.cosine[j] = sparse_cosine(snapshots[j], grad) if j in snapshots else 0.0
    strong = [j for j in tasks if out.projection[j] >= th.eps1]
    strong.sort(key=lambda j: (-out.projection[j], j))
    survivors = strong[: th.cap]
    for j in tasks:
        if j not in survivors:
            out.reg1.add(j)
        elif allow_reg3 and out.cosine[j] >= th.eps2:
            out.reg3.add(j)
        else:
            out.reg2.add(j)
    return out


def detect_regimes(init_grads, memory: SubspaceMemory, thresholds: CorrelationThresholds,
                   allow_reg3: bool = True) -> RegimeAssignment:
    """Assign every old task in ``memory`` to a regime on every projected layer.

    ``init_grads`` is either a ``LayerGradients`` or a list of weight gradients,
    taken at the previous task's final model on one batch of new-task data.
    """
    weights = getattr(init_grads, "weights", init_grads)
    tasks = memory.tasks
    layers = []
    for l, g in enumerate(weights):
        bases = {j: memory.basis(l, j) for j in tasks}
        snaps = {j: memory.snapshots[j].layers[l] for j in tasks if j in memory.snapshots}
        layers.append(detect_layer(np.asarray(g, dtype=np.float64), bases, snaps, thresholds, allow_reg3))
    return RegimeAssignment(layers)


def check_degeneration(snapshot_layer: SparseVector, current_grad, eps2: float) -> bool:
    """True when the old task may stay in regime 3 (cosine still >= eps2)."""
    return sparse_cosine(snapshot_layer, current_grad) >= eps2
