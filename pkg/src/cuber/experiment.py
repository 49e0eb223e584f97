"""Experiment configuration, full runs across modes and seeds, and persistence.

A run directory holds one sub-directory per ``(mode, seed)``::

    <out>/<mode>/seed<k>/config.json    effective configuration
                        metrics.json   ACC, BWT, BWT-S, FWT, degeneration count
                        accuracy.csv   accuracy matrix (one row per learnt task)
                        events.jsonl   regimes, degenerations, per-task summaries
                        timing.json    wall time (kept apart so the rest is reproducible)
                        memory.npz     subspace memory checkpoint (if requested)
    <out>/scratch/seed<k>.json         single-task accuracies used for forward transfer
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .learner import MODES, SCALING_STORAGE, ContinualLearner, LearnerConfig, train_multitask
from .linalg import orthonormalize
from .memory import SubspaceMemory
from .metrics import AccuracyMatrix, compute_bwt_s, compute_fwt, compute_metrics, select_old_tasks
from .network import Network, evaluate
from .regimes import CorrelationThresholds
from .tasks import (
    generate_conflicting_tasks,
    generate_overlap_split_tasks,
    generate_permuted_tasks,
    generate_synthetic_base,
    load_csv_dataset,
    overlapping_ranges,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
GENERATORS = ("overlap", "permuted")


@dataclass
class ExperimentConfig:
    """Flat configuration; every field is a documented key of the JSON config file."""

    # task sequence
    generator: str = "overlap"
    csv_path: Optional[str] = None
    n_classes: Optional[int] = None
    dim: int = 32
    per_class: int = 200
    separation: float = 4.0
    noise: float = 1.0
    noise_rank: Optional[int] = None
    ranges: Optional[list] = None
    t_count: int = 5
    width: int = 4
    stride: int = 2
    # network
    hidden: list = field(default_factory=lambda: [100, 100])
    multi_head: Optional[bool] = None
    # learner
    loss: str = "cross_entropy"
    lr: float = 0.01
    scaling_lr: Optional[float] = None
    reg_weight: float = 1.0
    eps1: float = 0.5
    eps2: float = 0.0
    cap: int = 2
    sparsity: float = 0.9
    epochs: Optional[int] = None  # 5 for permuted tasks, else 200 with early stopping
    early_stopping: bool = True
    batch_size: int = 64
    detect_batch_size: Optional[int] = None
    patience: int = 6
    lr_decay: float = 2.0
    min_lr: float = 1e-5
    scaling_storage: str = "per_task"
    degeneration: bool = True
    head_warmup_steps: int = 50
    head_warmup_lr: float = 0.1
    n_samples: Optional[int] = None  # 300 for permuted tasks, else 125
    eps_th: float = 0.97
    eps_th_step: float = 0.003
    # run
    modes: list = field(default_factory=lambda: ["cuber"])
    seeds: list = field(default_factory=lambda: [0])
    fwt: bool = False
    checkpoint: bool = False
    out: Optional[str] = None

    def __post_init__(self):
        permuted = self.generator == "permuted"
        if self.epochs is None:
            self.epochs = 5 if permuted else 200
        if self.n_samples is None:
            self.n_samples = 300 if permuted else 125
        self.validate()

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ValueError(f"unknown or missing modes {bad}")
        if not self.seeds or any(int(s) != s for s in self.seeds):
            raise ValueError("seeds must be a nonempty list of integers")
        if self.scaling_storage not in SCALING_STORAGE:
            raise ValueError(f"scaling_storage must be one of {SCALING_STORAGE}")
        if self.t_count < 1 or self.epochs < 1 or self.batch_size < 1 or self.n_samples < 1:
            raise ValueError("t_count, epochs, batch_size and n_samples must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if not 0 < self.eps_th < 1:
            raise ValueError("eps_th must lie in (0, 1)")
        # delegate the remaining checks to the component constructors
        self.thresholds()
        self.learner_config("cuber")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known - {"format_version"})
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        if d.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported config format_version {d['format_version']}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **dataclasses.asdict(self)}

    def thresholds(self) -> CorrelationThresholds:
        return CorrelationThresholds(self.eps1, self.eps2, self.cap)

    def learner_config(self, mode: str) -> LearnerConfig:
        return LearnerConfig(
            mode=mode, lr=self.lr, scaling_lr=self.scaling_lr, reg_weight=self.reg_weight,
            thresholds=self.thresholds(), batch_size=self.batch_size,
            detect_batch_size=self.detect_batch_size, max_epochs=self.epochs,
            early_stopping=self.early_stopping, min_lr=self.min_lr, lr_decay=self.lr_decay,
            patience=self.patience, snapshot_sparsity=self.sparsity, loss=self.loss,
            degeneration=self.degeneration, scaling_storage=self.scaling_storage,
            head_warmup_steps=self.head_warmup_steps, head_warmup_lr=self.head_warmup_lr,
        )

    @property
    def is_multi_head(self) -> bool:
        if self.multi_head is not None:
            return self.multi_head
        return self.generator == "overlap"


def build_tasks(cfg: ExperimentConfig, seed: int) -> list:
    """The task sequence for ``seed`` (the seed drives both data and splits)."""
    if cfg.csv_path:
        base = load_csv_dataset(cfg.csv_path, seed=seed)
    else:
        n_classes = cfg.n_classes
        if n_classes is None:
            if cfg.generator == "overlap" and cfg.ranges is None:
                n_classes = cfg.stride * (cfg.t_count - 1) + cfg.width
            elif cfg.generator == "overlap":
                n_classes = max(hi for _, hi in cfg.ranges) + 1
            else:
                n_classes = 10
        base = generate_synthetic_base(n_classes, cfg.dim, cfg.per_class, cfg.separation, seed,
                                       cfg.noise, cfg.noise_rank)
    if cfg.generator == "permuted":
        return generate_permuted_tasks(base, cfg.t_count, seed)
    ranges = cfg.ranges if cfg.ranges is not None else overlapping_ranges(cfg.t_count, cfg.width, cfg.stride)
    return generate_overlap_split_tasks(base, [tuple(r) for r in ranges], seed)


def _network(cfg: ExperimentConfig, tasks, rng) -> Network:
    dims = [tasks[0].dim] + list(cfg.hidden)
    n_out = None if cfg.is_multi_head else max(t.n_classes for t in tasks)
    return Network.build(dims, rng, multi_head=cfg.is_multi_head, n_out=n_out)


def scratch_accuracies(cfg: ExperimentConfig, seed: int) -> dict:
    """Test accuracy of each task learnt alone by a freshly initialized network."""
    tasks = build_tasks(cfg, seed)
    out = {}
    for i, d in enumerate(tasks):
        rng = np.random.default_rng([seed, 1, i])
        learner = ContinualLearner(_network(cfg, tasks, rng), cfg.learner_config("plain"), rng,
                                   SubspaceMemory(n_samples=cfg.n_samples))
        out[i] = learner.learn_task(d).accuracies[d.task_id]
    return out


def subspace_overlap(memory: SubspaceMemory, layer: int = 0) -> dict:
    """Normalized overlap ``||Bi' Bj||_F^2 / min(ki, kj)`` for every task pair on ``layer``."""
    tasks = memory.tasks
    out = {}
    for a in tasks:
        for b in tasks:
            if a < b:
                ba, bb = memory.basis(layer, a), memory.basis(layer, b)
                k = min(ba.shape[1], bb.shape[1])
                out[f"{a}-{b}"] = float(np.sum((ba.T @ bb) ** 2) / k) if k else 0.0
    return out


class _EventLog:
    """Line-delimited JSON, flushed per event so a crash keeps what ran."""

    def __init__(self, path: Optional[Path]):
        self.path = path
        self.fh = open(path, "w") if path is not None else None
        self.events: list = []

    def __call__(self, kind: str, **payload) -> None:
        event = {"event": kind, **payload}
        self.events.append(event)
        if self.fh is not None:
            self.fh.write(json.dumps(event, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_single(cfg: ExperimentConfig, mode: str, seed: int, out_dir=None, scratch: Optional[dict] = None) -> dict:
    """Learn the whole sequence once; returns (and optionally persists) the results."""
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", {**cfg.to_dict(), "modes": [mode], "seeds": [seed]})
    events = _EventLog(out / "events.jsonl" if out is not None else None)
    tasks = build_tasks(cfg, seed)
    rng = np.random.default_rng(seed)
    net = _network(cfg, tasks, rng)
    lcfg = cfg.learner_config(mode)
    result: dict = {"mode": mode, "seed": seed}
    try:
        if mode == "multitask":
            accs = train_multitask(net, tasks, lcfg, rng)
            row = [accs[d.task_id] for d in tasks]
            events("joint", accuracies=row)
            result["joint_accuracy"] = row
            metrics = {"acc": float(np.mean(row)), "bwt": None}
            csv_text = "after_task," + ",".join(str(i) for i in range(len(tasks))) + "\n" + \
                "joint," + ",".join(repr(float(a)) for a in row) + "\n"
            learner = None
        else:
            memory = SubspaceMemory(n_samples=cfg.n_samples, eps_base=cfg.eps_th, eps_step=cfg.eps_th_step)
            learner = ContinualLearner(net, lcfg, rng, memory)
            a = AccuracyMatrix.empty(len(tasks))
            regimes = {}
            n_deg = 0
            for t, d in enumerate(tasks):
                res = learner.learn_task(d, tasks[:t])
                a.set_row(t, [res.accuracies[tasks[j].task_id] for j in range(t + 1)])
                if res.initial_regimes is not None:
                    regimes[t] = res.initial_regimes
                    events("regimes", task=t, initial=res.initial_regimes, final=res.regimes)
                for ev in res.degenerations:
                    events("degeneration", during_task=t, **ev)
                n_deg += len(res.degenerations)
                events("task_end", task=t, epochs=res.epochs, accuracies=a.values[t, : t + 1].tolist(),
                       train_losses=res.train_losses, valid_losses=res.valid_losses)
            if cfg.generator == "permuted":
                events("subspace_overlap", layer=0, overlap=subspace_overlap(memory))
            metrics = compute_metrics(a)
            metrics["bwt_s"] = compute_bwt_s(a, select_old_tasks(regimes))
            metrics["degenerations"] = n_deg
            if scratch is not None:
                metrics["fwt"] = compute_fwt(a, scratch)
            result["accuracy"] = a
            result["regimes"] = regimes
            csv_text = a.to_csv()
        metrics = {"format_version": FORMAT_VERSION, "mode": mode, "seed": seed, **metrics}
        result["metrics"] = metrics
        result["events"] = events.events
        if out is not None:
            _write_json(out / "metrics.json", metrics)
            (out / "accuracy.csv").write_text(csv_text)
            if cfg.checkpoint and learner is not None:
                learner.memory.save(out / "memory.npz")
    except Exception as exc:
        events("error", message=f"{type(exc).__name__}: {exc}")
        log.error("run %s seed %s failed: %s", mode, seed, exc)
        raise
    finally:
        events.close()
        wall = time.perf_counter() - start
        result["wall_time"] = wall
        if out is not None:
            _write_json(out / "timing.json", {"wall_time_s": wall})
    return result


def _job(args):
    cfg_dict, mode, seed, out_dir, scratch = args
    res = run_single(ExperimentConfig.from_dict(cfg_dict), mode, seed, out_dir, scratch)
    # keep the payload small and picklable
    return {k: res[k] for k in ("mode", "seed", "metrics", "wall_time")}


def _scratch_job(args):
    cfg_dict, seed = args
    return seed, scratch_accuracies(ExperimentConfig.from_dict(cfg_dict), seed)


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> list[dict]:
    """Every ``(mode, seed)`` pair of ``cfg``; seeds and modes run in parallel when ``threads > 1``."""
    out = Path(out_dir or cfg.out) if (out_dir or cfg.out) else None
    d = cfg.to_dict()
    scratch: dict = {}
    if cfg.fwt:
        jobs = [(d, s) for s in cfg.seeds]
        done = _map(_scratch_job, jobs, threads)
        for seed, accs in done:
            scratch[seed] = accs
            if out is not None:
                (out / "scratch").mkdir(parents=True, exist_ok=True)
                _write_json(out / "scratch" / f"seed{seed}.json", {str(k): v for k, v in accs.items()})
    jobs = [(d, m, s, (out / m / f"seed{s}") if out is not None else None, scratch.get(s))
            for m in cfg.modes for s in cfg.seeds]
    return _map(_job, jobs, threads)


def _map(fn, jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def run_conflict_pair(seed: int, degeneration: bool = True, n_classes: int = 3, flip: float = 0.3,
                      first_epochs: int = 1, first_lr: float = 0.01, second_epochs: int = 20,
                      second_lr: float = 0.05) -> dict:
    """Learn a task, then a relabeled copy that first agrees with it and later conflicts.

    The first task is deliberately underfit so the second task's early
    gradient still helps it. Returns the old task's accuracy before and after
    the second task, the detected regimes and the degeneration events.
    """
    base = generate_synthetic_base(n_classes=n_classes, dim=16, per_class=200, separation=2.0, seed=seed)
    tasks = generate_conflicting_tasks(base, flip, seed)
    rng = np.random.default_rng(seed)
    net = Network.build((16, 32, 32), rng, multi_head=False, n_out=n_classes)
    cfg = LearnerConfig(mode="cuber", lr=first_lr, max_epochs=first_epochs, batch_size=32,
                        early_stopping=False, degeneration=degeneration)
    learner = ContinualLearner(net, cfg, rng)
    first = learner.learn_task(tasks[0], [])
    learner.config = dataclasses.replace(cfg, lr=second_lr, max_epochs=second_epochs)
    second = learner.learn_task(tasks[1], tasks[:1])
    return {
        "seed": seed,
        "degeneration": degeneration,
        "old_before": first.accuracies[0],
        "old_after": second.accuracies[0],
        "initial_regimes": second.initial_regimes,
        "degenerations": second.degenerations,
    }


# ---------------------------------------------------------------- reading results

def load_accuracy(path) -> tuple[Optional[AccuracyMatrix], Optional[list]]:
    """Matrix for continual runs, or the single joint row for multitask runs."""
    text = Path(path).read_text()
    lines = text.strip().splitlines()
    if len(lines) == 2 and lines[1].startswith("joint,"):
        return None, [float(v) for v in lines[1].split(",")[1:]]
    return AccuracyMatrix.from_csv(text), None


def recompute_metrics(run_dir) -> dict:
    """Metrics recomputed from the persisted matrix, events and scratch accuracies."""
    run_dir = Path(run_dir)
    stored = json.loads((run_dir / "metrics.json").read_text())
    a, joint = load_accuracy(run_dir / "accuracy.csv")
    out = {"format_version": FORMAT_VERSION, "mode": stored["mode"], "seed": stored["seed"]}
    if joint is not None:
        out.update({"acc": float(np.mean(joint)), "bwt": None})
        return out
    out.update(compute_metrics(a))
    regimes, n_deg = {}, 0
    with open(run_dir / "events.jsonl") as fh:
        for line in fh:
            ev = json.loads(line)
            if ev["event"] == "regimes":
                regimes[ev["task"]] = ev["initial"]
            elif ev["event"] == "degeneration":
                n_deg += 1
    bwt_s = compute_bwt_s(a, select_old_tasks(regimes))
    # JSON keys are strings; match the persisted form
    out["bwt_s"] = {"pairs": {str(k): v for k, v in bwt_s["pairs"].items()}, "average": bwt_s["average"]}
    out["degenerations"] = n_deg
    scratch_file = run_dir.parent.parent / "scratch" / f"seed{stored['seed']}.json"
    if "fwt" in stored and scratch_file.exists():
        scratch = {int(k): v for k, v in json.loads(scratch_file.read_text()).items()}
        fwt = compute_fwt(a, scratch)
        out["fwt"] = {"per_task": {str(k): v for k, v in fwt["per_task"].items()}, "mean": fwt["mean"]}
    return out


def collect_runs(root) -> list[dict]:
    """Every persisted ``metrics.json`` below ``root``."""
    return [json.loads(p.read_text()) for p in sorted(Path(root).rglob("metrics.json"))]


def compare(root, baseline: str = "orthogonal_only") -> dict:
    """Per-mode mean and standard deviation of ACC and BWT over seeds.

    When forward transfer was measured, the mean FWT is also given relative to
    ``baseline``.
    """
    by_mode: dict = {}
    for m in collect_runs(root):
        by_mode.setdefault(m["mode"], []).append(m)
    table = {}
    for mode, runs in sorted(by_mode.items()):
        row = {"seeds": sorted(r["seed"] for r in runs)}
        for key in ("acc", "bwt"):
            vals = [r[key] for r in runs if r.get(key) is not None]
            row[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))} if vals else None
        fwts = [r["fwt"]["mean"] for r in runs if r.get("fwt") and r["fwt"]["mean"] is not None]
        row["fwt"] = float(np.mean(fwts)) if fwts else None
        table[mode] = row
    base = table.get(baseline, {}).get("fwt")
    for row in table.values():
        row["fwt_vs_baseline"] = row["fwt"] - base if row["fwt"] is not None and base is not None else None
    return table
