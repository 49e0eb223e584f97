"""Continual-learning metrics computed from the accuracy matrix.

``A[i, j]`` is the test accuracy on task ``j`` right after task ``i`` was
learnt (0-based, ``j <= i``). Every metric here is a pure function of ``A``
plus, for forward transfer, per-task accuracies of networks trained alone.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np


@dataclass
class AccuracyMatrix:
    """Lower-triangular ``T x T`` accuracies; unfilled entries are NaN."""

    values: np.ndarray

    @classmethod
    def empty(cls, t_count: int) -> "AccuracyMatrix":
        if t_count < 1:
            raise ValueError("need at least one task")
        return cls(np.full((t_count, t_count), np.nan))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        """Build from ragged rows ``[[A00], [A10, A11], ...]``."""
        m = cls.empty(len(rows))
        for i, row in enumerate(rows):
            m.set_row(i, row)
        return m

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def set_row(self, i: int, accs) -> None:
        """Fill row ``i`` from a sequence (tasks ``0..i``) or a ``{task: acc}`` map."""
        if isinstance(accs, Mapping):
            accs = [accs[j] for j in range(i + 1)]
        accs = np.asarray(accs, dtype=np.float64)
        if accs.shape != (i + 1,):
            raise ValueError(f"row {i} needs {i + 1} entries, got {accs.shape}")
        if np.any(accs < 0) or np.any(accs > 1):
            raise ValueError("accuracies must lie in [0, 1]")
        self.values[i, : i + 1] = accs

    def is_complete(self) -> bool:
        return not np.any(np.isnan(self.values[np.tril_indices(self.T)]))

    def __getitem__(self, ij) -> float:
        return float(self.values[ij])

    def to_csv(self) -> str:
        """Header ``task,0,1,...``; one row per learnt task, blanks above the diagonal."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + list(range(self.T)))
        for i in range(self.T):
            w.writerow([i] + [repr(float(self.values[i, j])) if j <= i and not np.isnan(self.values[i, j]) else ""
                              for j in range(self.T)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        t = len(rows[0]) - 1
        m = cls.empty(t)
        for r in rows[1:]:
            i = int(r[0])
            for j, v in enumerate(r[1:]):
                if v != "":
                    m.values[i, j] = float(v)
        return m


def _check(a: AccuracyMatrix) -> np.ndarray:
    if not a.is_complete():
        raise ValueError("accuracy matrix is not fully populated")
    return a.values


def compute_metrics(a: AccuracyMatrix) -> dict:
    """``acc`` is the mean of the last row; ``bwt`` the mean final-minus-just-learnt gap.

    ``bwt`` is ``None`` for a single task.
    """
    v = _check(a)
    t = a.T
    acc = float(np.mean(v[t - 1, :t]))
    bwt = float(np.mean([v[t - 1, i] - v[i, i] for i in range(t - 1)])) if t > 1 else None
    return {"acc": acc, "bwt": bwt}


def select_old_tasks(regime_logs: Mapping) -> dict:
    """``new task -> old task`` with the most regime-3 layers (ties to the smaller id).

    ``regime_logs`` maps a task to its per-layer regime dicts (each with a
    ``reg3`` list). New tasks without any regime-3 layer are left out.
    """
    out = {}
    for t, layers in regime_logs.items():
        if not layers:
            continue
        counts: dict = {}
        for lr in layers:
            for j in lr["reg3"]:
                counts[j] = counts.get(j, 0) + 1
        if counts:
            out[t] = min(counts, key=lambda j: (-counts[j], j))
    return out


def compute_bwt_s(a: AccuracyMatrix, selected: Mapping) -> dict:
    """``A[t, j] - A[t-1, j]`` for every ``t -> j`` pair, plus their mean."""
    v = a.values
    pairs = {}
    for t, j in sorted(selected.items()):
        t, j = int(t), int(j)
        if not 0 <= j < t < a.T:
            raise ValueError(f"selection {t} -> {j} does not reference an earlier learnt task")
        if np.isnan(v[t, j]) or np.isnan(v[t - 1, j]):
            raise ValueError(f"accuracies for pair {t} -> {j} are missing")
        pairs[t] = {"old_task": j, "bwt_s": float(v[t, j] - v[t - 1, j])}
    mean = float(np.mean([p["bwt_s"] for p in pairs.values()])) if pairs else None
    return {"pairs": pairs, "average": mean}


def compute_fwt(a: AccuracyMatrix, scratch_acc: Mapping) -> dict:
    """``A[i, i] - scratch[i]`` per task; the mean skips the first task."""
    v = a.values
    missing = [i for i in range(a.T) if i not in scratch_acc]
    if missing:
        raise ValueError(f"missing scratch accuracies for tasks {missing}")
    per = {i: float(v[i, i] - scratch_acc[i]) for i in range(a.T)}
    later = [per[i] for i in range(1, a.T)]
    return {"per_task": per, "mean": float(np.mean(later)) if later else None}


def relative_fwt(fwt: dict, baseline: dict) -> Optional[float]:
    """Mean forward transfer relative to a baseline mode's."""
    if fwt["mean"] is None or baseline["mean"] is None:
        return None
    return fwt["mean"] - baseline["mean"]
