"""Task-by-task training with selective backward transfer.

While task ``t`` trains, every projected layer ``l`` sees

* an *effective* weight ``w~ = w + sum_j w B_j (Q_j - I) B_j'`` over the old
  tasks in regimes 2 and 3, with learnable square scaling matrices ``Q_j``;
* a weight gradient with its components inside the regime-1/2 subspaces
  removed;
* for regime-3 tasks, a penalty ``lam * ||(w - w_prev) B_j||_F^2`` that keeps
  the in-subspace drift small.

Baseline modes reuse the same machinery with regimes forced: ``orthogonal_only``
puts every old task in regime 1, ``forward_only`` never uses regime 3,
``plain`` applies no projection at all and ``multitask`` trains once on the
union of all tasks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linalg import empty_basis, orthonormalize, project
from .memory import SubspaceMemory, collect_representations, snapshot_gradient, sparse_cosine
from .network import (
    LayerGradients,
    Network,
    Schedule,
    TrainStats,
    apply_step,
    backward,
    dataset_loss,
    early_stopping_loop,
    evaluate,
    forward,
    loss_and_logit_grad,
    mean_gradient,
    sgd_epoch,
)
from .regimes import CorrelationThresholds, LayerRegimes, RegimeAssignment, check_degeneration, detect_regimes

log = logging.getLogger(__name__)

MODES = ("cuber", "orthogonal_only", "forward_only", "plain", "multitask")
SCALING_STORAGE = ("fold", "per_task")


@dataclass
class LearnerConfig:
    mode: str = "cuber"
    lr: float = 0.01
    scaling_lr: Optional[float] = None
    reg_weight: float = 1.0
    thresholds: CorrelationThresholds = field(default_factory=CorrelationThresholds)
    batch_size: int = 64
    detect_batch_size: Optional[int] = None
    max_epochs: int = 200
    early_stopping: bool = True
    min_lr: float = 1e-5
    lr_decay: float = 2.0
    patience: int = 6
    snapshot_sparsity: float = 0.9
    loss: str = "cross_entropy"
    degeneration: bool = True
    scaling_storage: str = "per_task"
    # full-batch gradient steps fitting a freshly added head before detection
    head_warmup_steps: int = 50
    head_warmup_lr: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scaling_storage not in SCALING_STORAGE:
            raise ValueError(f"unknown scaling storage {self.scaling_storage!r}")
        if self.lr <= 0 or self.beta <= 0:
            raise ValueError("learning rates must be positive")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        if self.head_warmup_steps < 0 or self.head_warmup_lr <= 0:
            raise ValueError("head warm-up needs steps >= 0 and a positive lr")

    @property
    def beta(self) -> float:
        return self.lr if self.scaling_lr is None else self.scaling_lr

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.min_lr, self.lr_decay, self.patience, self.max_epochs)


# ---------------------------------------------------------------- primitives

def scaling_operator(dim: int, q: dict, bases: dict) -> np.ndarray:
    """``I + sum_j B_j (Q_j - I) B_j'`` so that the effective weight is ``w @ M``."""
    m = np.eye(dim)
    for j, qj in q.items():
        b = bases[j]
        m += b @ (qj - np.eye(qj.shape[0])) @ b.T
    return m


def effective_weight(w, q: dict, bases: dict) -> np.ndarray:
    """``w + sum_j [w B_j Q_j B_j' - Proj_j(w)]`` over the tasks keyed in ``q``."""
    w = np.asarray(w, dtype=np.float64)
    out = w.copy()
    for j, qj in q.items():
        if j not in bases:
            raise KeyError(f"no basis stored for task {j!r}")
        b = bases[j]
        wb = w @ b
        out += wb @ qj @ b.T - wb @ b.T
    return out


def project_out_gradient(grad, bases: Sequence[np.ndarray]) -> np.ndarray:
    """Remove the component of ``grad`` inside the union of ``bases``."""
    grad = np.asarray(grad, dtype=np.float64)
    mats = [b for b in bases if b.shape[1]]
    if not mats:
        return grad.copy()
    union = orthonormalize(np.column_stack(mats), 1e-8)
    return grad - project(grad, union)


def regime3_regularizer_grad(w, w_prev, bases: Sequence[np.ndarray], lam: float) -> tuple[float, np.ndarray]:
    """Value and gradient of ``lam * sum_j ||Proj_j(w - w_prev)||_F^2``."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    delta = np.asarray(w, dtype=np.float64) - np.asarray(w_prev, dtype=np.float64)
    value = 0.0
    grad = np.zeros_like(delta)
    for b in bases:
        p = project(delta, b)
        value += float(np.sum(p * p))
        grad += p
    return lam * value, 2.0 * lam * grad


def scaling_gradient(w, g_eff, basis) -> np.ndarray:
    """``dL/dQ = B' w' G B`` where ``G`` is the gradient w.r.t. the effective weight."""
    w = np.asarray(w, dtype=np.float64)
    g_eff = np.asarray(g_eff, dtype=np.float64)
    if g_eff.shape != w.shape:
        raise ValueError("gradient and weight shapes differ")
    return (w @ basis).T @ (g_eff @ basis)


def update_scaling(q, beta: float, grad_q) -> np.ndarray:
    if beta <= 0:
        raise ValueError("beta must be positive")
    q = np.asarray(q, dtype=np.float64)
    grad_q = np.asarray(grad_q, dtype=np.float64)
    if q.shape != grad_q.shape:
        raise ValueError("shape mismatch between Q and its gradient")
    return q - beta * grad_q


# ---------------------------------------------------------------- task state

@dataclass
class TaskResult:
    task: object
    accuracies: dict
    regimes: Optional[list] = None
    initial_regimes: Optional[list] = None
    degenerations: list = field(default_factory=list)
    epochs: int = 0
    train_losses: list = field(default_factory=list)
    valid_losses: list = field(default_factory=list)


class TaskObjective:
    """Effective weights, scaling matrices and gradient surgery for one task."""

    def __init__(self, net: Network, memory: SubspaceMemory, regimes: Optional[RegimeAssignment],
                 config: LearnerConfig):
        self.net = net
        self.memory = memory
        self.regimes = regimes
        self.config = config
        self.anchor = [w.copy() for w in net.weights()]
        self.q: list[dict] = []
        for l, layer in enumerate(net.layers):
            lr = regimes.layers[l] if regimes is not None else LayerRegimes()
            self.q.append({j: np.eye(memory.basis(l, j).shape[1]) for j in sorted(lr.reg23)})
        self._union: dict = {}
        self.reset_epoch()

    # bases of the tasks that carry a scaling matrix on layer l
    def scaled_bases(self, l: int) -> dict:
        return {j: self.memory.basis(l, j) for j in self.q[l]}

    def layer_regimes(self, l: int) -> LayerRegimes:
        return self.regimes.layers[l] if self.regimes is not None else LayerRegimes()

    def protected_basis(self, l: int) -> np.ndarray:
        if l not in self._union:
            dim = self.net.layers[l].in_dim
            tasks = sorted(self.layer_regimes(l).reg12)
            self._union[l] = self.memory.union_basis(l, tasks, dim) if tasks else empty_basis(dim)
        return self._union[l]

    def invalidate(self):
        self._union.clear()

    def effective_weights(self) -> list[np.ndarray]:
        return [
            effective_weight(layer.weight, self.q[l], self.scaled_bases(l)) if self.q[l] else layer.weight
            for l, layer in enumerate(self.net.layers)
        ]

    def raw_gradients(self, grads: LayerGradients) -> tuple[list[np.ndarray], list[dict]]:
        """Gradients of the task loss w.r.t. ``w`` and every ``Q`` from gradients w.r.t. ``w~``."""
        gw, gq = [], []
        for l, layer in enumerate(self.net.layers):
            g = grads.weights[l]
            if not self.q[l]:
                gw.append(g)
                gq.append({})
                continue
            bases = self.scaled_bases(l)
            m = scaling_operator(layer.in_dim, self.q[l], bases)
            gw.append(g @ m.T)
            gq.append({j: scaling_gradient(layer.weight, g, bases[j]) for j in self.q[l]})
        return gw, gq

    def regularizer(self, l: int) -> tuple[float, np.ndarray]:
        reg3 = sorted(self.layer_regimes(l).reg3)
        bases = [self.memory.basis(l, j) for j in reg3]
        return regime3_regularizer_grad(self.net.layers[l].weight, self.anchor[l], bases, self.config.reg_weight)

    def objective(self, x, y, task) -> tuple[float, list[np.ndarray], list[dict], LayerGradients]:
        """Task loss at ``w~`` plus the regime-3 penalty, with unprojected gradients."""
        trace = forward(self.net, x, task, self.effective_weights())
        value, grads = backward(self.net, trace, y, self.config.loss)
        gw, gq = self.raw_gradients(grads)
        for l in range(len(gw)):
            rv, rg = self.regularizer(l)
            value += rv
            gw[l] = gw[l] + rg
        return value, gw, gq, grads

    def reset_epoch(self):
        self._epoch_grad = [np.zeros_like(w) for w in self.net.weights()]
        self._epoch_count = 0

    def epoch_gradient(self) -> list[np.ndarray]:
        n = max(self._epoch_count, 1)
        return [g / n for g in self._epoch_grad]

    def transform(self, grads: LayerGradients, trace) -> LayerGradients:
        gw, gq = self.raw_gradients(grads)
        n = len(trace.logits)
        for l in range(len(gw)):
            self._epoch_grad[l] += gw[l] * n
        self._epoch_count += n
        beta = self.config.beta
        for l, per_task in enumerate(gq):
            for j, g in per_task.items():
                self.q[l][j] = update_scaling(self.q[l][j], beta, g)
        out_w = []
        for l, g in enumerate(gw):
            if self.layer_regimes(l).reg3:
                g = g + self.regularizer(l)[1]
            b = self.protected_basis(l)
            if b.shape[1]:
                g = g - project(g, b)
            out_w.append(g)
        return LayerGradients(out_w, grads.biases, grads.head_weight, grads.head_bias)

    def check_degeneration(self, epoch: int) -> list[dict]:
        """Demote regime-3 tasks whose stored gradient now disagrees with this task's."""
        events = []
        eps2 = self.config.thresholds.eps2
        avg = self.epoch_gradient()
        for l, lr in enumerate(self.regimes.layers if self.regimes else []):
            for j in sorted(lr.reg3):
                snap = self.memory.snapshots[j].layers[l]
                if not check_degeneration(snap, avg[l], eps2):
                    events.append({"epoch": epoch, "layer": l, "task": j,
                                   "cosine": sparse_cosine(snap, avg[l])})
                    self.regimes.demote(l, j)
        if events:
            self.invalidate()
        return events

    def fold(self) -> None:
        """Materialize the effective weights into the stored weights."""
        eff = self.effective_weights()
        for l, layer in enumerate(self.net.layers):
            if self.q[l]:
                layer.weight = eff[l]


# ---------------------------------------------------------------- driver

def _force_regimes(assign: RegimeAssignment, mode: str) -> RegimeAssignment:
    if mode in ("orthogonal_only", "plain"):
        for lr in assign.layers:
            lr.reg1 |= lr.reg2 | lr.reg3
            lr.reg2.clear()
            lr.reg3.clear()
    return assign


class ContinualLearner:
    """Owns the network, the subspace memory and per-task scaling state."""

    def __init__(self, net: Network, config: LearnerConfig, rng: np.random.Generator,
                 memory: Optional[SubspaceMemory] = None):
        self.net = net
        self.config = config
        self.rng = rng
        self.memory = memory if memory is not None else SubspaceMemory()
        self.seen: list = []
        self.scalings: dict = {}
        self.weight_history: list[list[np.ndarray]] = []

    def task_weights(self, task) -> Optional[list[np.ndarray]]:
        """Weights used to evaluate ``task`` (its own scaling in per-task mode)."""
        if self.config.scaling_storage != "per_task" or task not in self.scalings:
            return None
        out = []
        for l, layer in enumerate(self.net.layers):
            q = self.scalings[task][l]
            bases = {j: self.memory.basis(l, j) for j in q}
            out.append(effective_weight(layer.weight, q, bases) if q else layer.weight)
        return out

    def evaluate(self, data, split="test") -> float:
        x, y = getattr(data, split)
        return evaluate(self.net, x, y, data.task_id if self.net.multi_head else None,
                        self.task_weights(data.task_id))

    def _head_task(self, data):
        return data.task_id if self.net.multi_head else None

    def _warm_up_head(self, data) -> None:
        """Fit a new head on frozen features so the detection gradient is not random."""
        cfg = self.config
        if cfg.head_warmup_steps == 0:
            return
        x, y = data.train
        head = self.net.heads[data.task_id]
        # the body is frozen, so its output can be computed once
        feats = forward(self.net, x, data.task_id).inputs[-1]
        for _ in range(cfg.head_warmup_steps):
            logits = feats @ head.weight.T + head.bias
            _, dz = loss_and_logit_grad(logits, y, cfg.loss)
            head.weight -= cfg.head_warmup_lr * (dz.T @ feats)
            head.bias -= cfg.head_warmup_lr * dz.sum(axis=0)

    def _detect(self, data) -> Optional[RegimeAssignment]:
        if not self.memory.tasks or self.config.mode == "plain":
            return None
        x, y = data.train
        size = min(self.config.detect_batch_size or self.config.batch_size, len(x))
        idx = np.sort(self.rng.choice(len(x), size=size, replace=False))
        trace = forward(self.net, x[idx], self._head_task(data))
        _, grads = backward(self.net, trace, y[idx], self.config.loss)
        assign = detect_regimes(grads, self.memory, self.config.thresholds,
                                allow_reg3=self.config.mode == "cuber")
        return _force_regimes(assign, self.config.mode)

    def _train(self, data, objective: Optional[TaskObjective]) -> tuple[TrainStats, list]:
        cfg = self.config
        x, y = data.train
        task = self._head_task(data)
        events: list = []
        transform = objective.transform if objective is not None else None
        weights_fn = objective.effective_weights if objective is not None else None
        epoch = [0]

        def run_epoch(lr):
            if objective is not None:
                objective.reset_epoch()
            value = sgd_epoch(self.net, x, y, lr, cfg.batch_size, self.rng, task, cfg.loss, transform, weights_fn)
            if objective is not None and cfg.degeneration and objective.regimes is not None:
                events.extend(objective.check_degeneration(epoch[0]))
            epoch[0] += 1
            return value

        if cfg.early_stopping:
            vx, vy = data.valid

            def vloss():
                ws = weights_fn() if weights_fn is not None else None
                return dataset_loss(self.net, vx, vy, task, cfg.loss, ws)

            stats = early_stopping_loop(run_epoch, vloss, cfg.schedule)
        else:
            stats = TrainStats()
            for _ in range(cfg.max_epochs):
                stats.lrs.append(cfg.lr)
                stats.train_losses.append(run_epoch(cfg.lr))
                stats.epochs += 1
        return stats, events

    def learn_task(self, data, eval_tasks: Sequence = ()) -> TaskResult:
        """Learn ``data`` and evaluate it together with ``eval_tasks`` afterwards."""
        cfg = self.config
        if cfg.mode == "multitask":
            raise ValueError("multitask mode trains jointly; use train_multitask")
        if self.net.multi_head and data.task_id not in self.net.heads:
            self.net.add_head(data.task_id, data.n_classes, self.rng)
            self._warm_up_head(data)
        self.weight_history.append([w.copy() for w in self.net.weights()])

        assign = self._detect(data)
        initial = assign.to_dict() if assign is not None else None
        objective = None
        if assign is not None:
            objective = TaskObjective(self.net, self.memory, assign, cfg)
        stats, events = self._train(data, objective)

        task = self._head_task(data)
        self.pre_fold_weights = [w.copy() for w in self.net.weights()]
        if objective is not None:
            if cfg.scaling_storage == "fold":
                objective.fold()
            else:
                self.scalings[data.task_id] = [dict(q) for q in objective.q]

        x, y = data.train
        eval_w = self.task_weights(data.task_id)
        g = mean_gradient(self.net, x, y, task, cfg.loss, eval_w)
        snap = snapshot_gradient(g, cfg.snapshot_sparsity)
        n = min(self.memory.n_samples, len(x))
        reps = collect_representations(self.net, x, task, n, self.rng, eval_w)
        self.memory.add_task(data.task_id, reps, snap, len(self.seen) + 1)
        self.seen.append(data.task_id)

        accs = {d.task_id: self.evaluate(d) for d in list(eval_tasks) + [data]}
        return TaskResult(
            task=data.task_id,
            accuracies=accs,
            regimes=assign.to_dict() if assign is not None else None,
            initial_regimes=initial,
            degenerations=events,
            epochs=stats.epochs,
            train_losses=stats.train_losses,
            valid_losses=stats.valid_losses,
        )


def train_multitask(net: Network, tasks: Sequence, config: LearnerConfig, rng: np.random.Generator) -> dict:
    """Train once on the union of all tasks; returns test accuracy per task."""
    if net.multi_head:
        for d in tasks:
            if d.task_id not in net.heads:
                net.add_head(d.task_id, d.n_classes, rng)
    xs = [np.asarray(d.train[0]) for d in tasks]
    ys = [np.asarray(d.train[1]) for d in tasks]
    owner = np.concatenate([np.full(len(x), i) for i, x in enumerate(xs)])
    local = np.concatenate([np.arange(len(x)) for x in xs])
    n = len(owner)

    def run_epoch(lr):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            body = None
            heads = []
            for i in np.unique(owner[idx]):
                sel = local[idx[owner[idx] == i]]
                task = tasks[i].task_id if net.multi_head else None
                tr = forward(net, xs[i][sel], task)
                value, g = backward(net, tr, ys[i][sel], config.loss)
                g = g.scaled(len(sel) / len(idx))
                total += value * len(sel)
                heads.append((task, g.head_weight, g.head_bias))
                body = g if body is None else body.add_(g)
            # one joint step: the body gradient is the batch mean over all tasks
            apply_step(net, LayerGradients(body.weights, body.biases), lr)
            for task, hw, hb in heads:
                if hw is not None:
                    head = net.heads[task]
                    head.weight -= lr * hw
                    head.bias -= lr * hb
        return total / n

    def vloss():
        total, count = 0.0, 0
        for d in tasks:
            vx, vy = d.valid
            total += dataset_loss(net, vx, vy, d.task_id if net.multi_head else None, config.loss) * len(vx)
            count += len(vx)
        return total / count

    if config.early_stopping:
        early_stopping_loop(run_epoch, vloss, config.schedule)
    else:
        for _ in range(config.max_epochs):
            run_epoch(config.lr)
    return {d.task_id: evaluate(net, d.test[0], d.test[1], d.task_id if net.multi_head else None) for d in tasks}
