"""Numerical checks of the two-task convergence and transfer guarantees.

Two smooth tasks ``L1`` and ``L2`` share a parameter vector ``w``. Task 1 has
been learnt (``w0``); task 2 is now trained either with the orthogonally
projected step (rule 1) or the plain gradient step (rule 2). The functions here
build such instances, measure every hypothesis as a signed margin (``>= 0``
means satisfied) and only assert a conclusion when all margins are
nonnegative.
"""
from __future__ import annotations

import math
from functools import cached_property
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import empty_basis, orthonormalize

DIVERGENCE = 1e12
# step sizes below this count as a rejected instance rather than a test of anything
MIN_ALPHA = 1e-12
KINDS = ("quadratic_convex", "quartic_nonconvex")


# ---------------------------------------------------------------- tasks

@dataclass
class SmoothTask:
    """``kind`` selects the loss.

    * ``quadratic_convex``: ``L(w) = 1/2 (w - c)' A (w - c)`` with ``A`` PSD.
    * ``quartic_nonconvex``: ``L(w) = sum_i s_i ((w_i - c_i)^2 - a_i)^2 / 4``,
      a double well per coordinate (``a_i > 0``, ``s_i > 0``).
    """

    kind: str
    center: np.ndarray
    hessian: Optional[np.ndarray] = None
    wells: Optional[np.ndarray] = None
    scales: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.kind == "quadratic_convex":
            a = np.asarray(self.hessian, dtype=np.float64)
            if a.shape != (self.dim, self.dim) or not np.allclose(a, a.T, atol=1e-12):
                raise ValueError("hessian must be a symmetric d x d matrix")
            if np.linalg.eigvalsh(a)[0] < -1e-10:
                raise ValueError("hessian must be positive semidefinite")
            self.hessian = (a + a.T) / 2
        else:
            self.wells = np.asarray(self.wells, dtype=np.float64)
            self.scales = np.ones(self.dim) if self.scales is None else np.asarray(self.scales, dtype=np.float64)
            if np.any(self.wells <= 0) or np.any(self.scales <= 0):
                raise ValueError("quartic wells and scales must be positive")

    @classmethod
    def quadratic(cls, hessian, center) -> "SmoothTask":
        return cls("quadratic_convex", center, hessian=hessian)

    @classmethod
    def quartic(cls, wells, center=None, scales=None) -> "SmoothTask":
        wells = np.asarray(wells, dtype=np.float64)
        center = np.zeros_like(wells) if center is None else center
        return cls("quartic_nonconvex", center, wells=wells, scales=scales)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def convex(self) -> bool:
        return self.kind == "quadratic_convex"

    def loss(self, w) -> float:
        r = np.asarray(w, dtype=np.float64) - self.center
        if self.convex:
            return 0.5 * float(r @ self.hessian @ r)
        return float(np.sum(self.scales * (r * r - self.wells) ** 2) / 4)

    def grad(self, w) -> np.ndarray:
        r = np.asarray(w, dtype=np.float64) - self.center
        if self.convex:
            return self.hessian @ r
        return self.scales * (r * r - self.wells) * r

    def half_smoothness(self, w0, radius: float) -> float:
        """Bound on the gradient's Lipschitz constant (``H/2``) over a ball around ``w0``."""
        if self.convex:
            return float(max(np.linalg.eigvalsh(self.hessian)[-1], 0.0))
        far = np.abs(np.asarray(w0) - self.center) + radius
        # the diagonal Hessian s (3 r^2 - a) ranges over [-s a, s (3 far^2 - a)]
        return float(np.max(self.scales * np.maximum(3 * far * far - self.wells, self.wells)))

    def lipschitz(self, w0, radius: float) -> float:
        """Bound on ``||grad L||`` over the ball of ``radius`` around ``w0``."""
        w0 = np.asarray(w0, dtype=np.float64)
        if self.convex:
            return float(np.linalg.norm(self.grad(w0)) + self.half_smoothness(w0, radius) * radius)
        # per coordinate, max |s (t^3 - a t)| over t in [t0 - r, t0 + r]: check the
        # interval ends and the interior critical points +-sqrt(a/3)
        t0 = w0 - self.center
        crit = np.sqrt(self.wells / 3)
        cands = np.stack([t0 - radius, t0 + radius, -crit, crit])
        inside = np.ones_like(cands, dtype=bool)
        inside[2:] = np.abs(cands[2:] - t0) < radius
        vals = np.abs(self.scales * (cands ** 3 - self.wells * cands))
        peak = np.max(np.where(inside, vals, 0.0), axis=0)
        # sup of a sum of squares is at most the sum of the per-coordinate sups
        return float(np.linalg.norm(peak))


def joint_minimizer(task1: SmoothTask, task2: SmoothTask) -> np.ndarray:
    """Global minimizer of ``F = L1 + L2``.

    Quadratics: ``(A1 + A2)^+ (A1 c1 + A2 c2)``. Quartics separate by
    coordinate, so each coordinate minimizes a univariate quartic exactly.
    """
    if task1.convex and task2.convex:
        a = task1.hessian + task2.hessian
        return np.linalg.lstsq(a, task1.hessian @ task1.center + task2.hessian @ task2.center, rcond=None)[0]
    if task1.convex or task2.convex:
        raise ValueError("joint minimizer needs two tasks of the same kind")
    out = np.empty(task1.dim)
    for i in range(task1.dim):
        # derivative of sum_k s_k ((x - c_k)^2 - a_k)^2 / 4 is sum_k s_k (x - c_k)^3 - s_k a_k (x - c_k)
        coeffs = np.zeros(4)
        for t in (task1, task2):
            s, c, a = t.scales[i], t.center[i], t.wells[i]
            # (x - c)^3 = x^3 - 3c x^2 + 3c^2 x - c^3
            coeffs += s * np.array([1.0, -3 * c, 3 * c * c - a, -c ** 3 + a * c])
        roots = np.roots(coeffs)
        real = roots[np.abs(roots.imag) < 1e-9].real

        def f(x):
            return sum(t.scales[i] * ((x - t.center[i]) ** 2 - t.wells[i]) ** 2 / 4 for t in (task1, task2))

        out[i] = min(real, key=f)
    return out


# ---------------------------------------------------------------- rules

def _proj(v, basis) -> np.ndarray:
    return basis @ (basis.T @ v) if basis.shape[1] else np.zeros_like(v)


def rule1_step(w, alpha: float, g2_fn: Callable, b1) -> np.ndarray:
    """Gradient step with the component inside ``span(b1)`` removed."""
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g2_fn(w), dtype=np.float64)
    return w - alpha * (g - _proj(g, np.asarray(b1, dtype=np.float64)))


def rule2_step(w, alpha: float, g2_fn: Callable) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return w - alpha * np.asarray(g2_fn(w), dtype=np.float64)


# ---------------------------------------------------------------- instances

@dataclass
class TheoremInstance:
    task1: SmoothTask
    task2: SmoothTask
    b1: np.ndarray
    w0: np.ndarray
    gamma: float
    K: int
    alpha: float
    eps1: float
    eps2: float

    def __post_init__(self):
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(self.w0.size, -1)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.task1.dim != self.task2.dim or self.task1.dim != self.w0.size:
            raise ValueError("task and w0 dimensions differ")

    @property
    def radius(self) -> float:
        return 2.0 * (float(np.linalg.norm(self.w0 - self.task1.center)) + float(np.linalg.norm(self.w0 - self.task2.center)))

    # H and B depend only on the tasks and w0, which are fixed once built
    @cached_property
    def H(self) -> float:
        """Smoothness of ``F``: twice the larger per-task half constant."""
        r = self.radius
        return 2.0 * max(self.task1.half_smoothness(self.w0, r), self.task2.half_smoothness(self.w0, r))

    @cached_property
    def B(self) -> float:
        r = self.radius
        return max(self.task1.lipschitz(self.w0, r), self.task2.lipschitz(self.w0, r))

    def F(self, w) -> float:
        return self.task1.loss(w) + self.task2.loss(w)

    def grad_F(self, w) -> np.ndarray:
        return self.task1.grad(w) + self.task2.grad(w)

    def alpha_cap(self) -> float:
        """``min(1/H, gamma ||g1(w0)|| / (H B K))``."""
        h, b = self.H, self.B
        return min(1.0 / h, self.gamma * float(np.linalg.norm(self.task1.grad(self.w0))) / (h * b * self.K))

    def trajectory(self, steps: int) -> np.ndarray:
        """Rule-2 iterates ``w_0 .. w_steps`` (stops early on divergence)."""
        ws = [self.w0.copy()]
        for _ in range(steps):
            w = rule2_step(ws[-1], self.alpha, self.task2.grad)
            ws.append(w)
            if not np.all(np.isfinite(w)) or float(np.max(np.abs(w))) > DIVERGENCE:
                break
        return np.array(ws)


@dataclass
class VerificationReport:
    which: str
    hypotheses: dict = field(default_factory=dict)
    applicable: bool = False
    conclusion_holds: Optional[bool] = None
    losses: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"which": self.which, "hypotheses": self.hypotheses, "applicable": self.applicable,
                "conclusion_holds": self.conclusion_holds, "losses": self.losses, "details": self.details}


def _cos(a, b) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    return float(a @ b) / (na * nb) if na > 0 and nb > 0 else 0.0


def check_hypotheses(inst: TheoremInstance, which: str, k: Optional[int] = None, w=None) -> dict:
    """Signed margins (``>= 0`` is satisfied) for ``which`` in ``thm1``, ``thm2_1``, ``thm2_2``.

    ``w`` is the evaluation point for ``thm2_1`` (default ``w0``); ``k`` the
    step count for ``thm2_2``.
    """
    if which not in ("thm1", "thm2_1", "thm2_2"):
        raise ValueError(f"unknown theorem part {which!r}")
    g1 = inst.task1.grad(inst.w0)
    g2 = inst.task2.grad(inst.w0)
    n1, n2 = float(np.linalg.norm(g1)), float(np.linalg.norm(g2))
    h, b = inst.H, inst.B
    m: dict = {}
    # realized positive correlation at w0: <g1, g2> >= eps2 ||g1|| ||g2||
    m["positive_correlation"] = float(g1 @ g2) - inst.eps2 * n1 * n2
    if which in ("thm1", "thm2_1"):
        m["alpha_below_cap"] = inst.alpha_cap() - inst.alpha
        m["alpha_usable"] = inst.alpha - MIN_ALPHA
        rhs = (2 + inst.gamma ** 2) * n1 / (4 * n2) if n2 > 0 else math.inf
        m["eps2_bound"] = inst.eps2 - rhs
    if which == "thm2_1":
        w = inst.w0 if w is None else np.asarray(w, dtype=np.float64)
        gw = inst.task2.grad(w)
        gn = float(np.linalg.norm(gw))
        m["eps1_bound"] = inst.eps1 - math.sqrt((1 + 2 * inst.alpha * h) / (2 + inst.alpha * h))
        # realized sufficient projection at w: ||Proj g2(w)|| >= eps1 ||g2(w)||
        m["sufficient_projection"] = float(np.linalg.norm(_proj(gw, inst.b1))) - inst.eps1 * gn
        # the argument needs g1(w) inside span(B1) and w close to w0
        g1w = inst.task1.grad(w)
        m["g1_in_subspace"] = 1e-10 * max(1.0, float(np.linalg.norm(g1w))) - float(np.linalg.norm(g1w - _proj(g1w, inst.b1)))
        m["near_w0"] = inst.gamma * n1 / h - float(np.linalg.norm(w - inst.w0)) if h > 0 else 0.0
    if which == "thm2_2":
        k = inst.K if k is None else k
        m["alpha_bound"] = (4 * inst.eps2 * n1 / (h * b * k ** 1.5) - inst.alpha) if k > 0 else 0.0
        ws = inst.trajectory(max(k, 0))
        align = [float(g1 @ inst.task2.grad(wi)) - inst.eps2 * n1 * float(np.linalg.norm(inst.task2.grad(wi)))
                 for wi in ws[:k]]
        m["alignment"] = min(align) if align else 0.0
        norms = [float(np.linalg.norm(inst.task2.grad(wi))) for wi in ws[:k]]
        m["lipschitz_along_path"] = b - max(norms) if norms else 0.0
    return m


def _all_hold(margins: dict) -> bool:
    return all(v >= 0 for v in margins.values())


def verify_theorem2_part1(inst: TheoremInstance, w=None) -> VerificationReport:
    """One step of each rule from ``w`` (default ``w0``); rule 2 must not be worse on ``F``."""
    w = inst.w0 if w is None else np.asarray(w, dtype=np.float64)
    rep = VerificationReport("thm2_1", check_hypotheses(inst, "thm2_1", w=w))
    rep.applicable = _all_hold(rep.hypotheses)
    wc = rule1_step(w, inst.alpha, inst.task2.grad, inst.b1)
    wr = rule2_step(w, inst.alpha, inst.task2.grad)
    fc, fr = inst.F(wc), inst.F(wr)
    rep.details = {"F_rule1": fc, "F_rule2": fr, "gap": fc - fr}
    rep.losses = [inst.F(w), fr]
    if rep.applicable:
        rep.conclusion_holds = bool(fr <= fc + 1e-12 * max(1.0, abs(fc)))
    return rep


def verify_theorem2_part2(inst: TheoremInstance, k: int, horizon: Optional[int] = None) -> VerificationReport:
    """``k`` rule-2 steps must not increase ``L1``.

    When ``horizon`` exceeds ``k`` the trajectory is continued to find the
    first iterate at which the alignment condition breaks.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    rep = VerificationReport("thm2_2", check_hypotheses(inst, "thm2_2", k=k))
    rep.applicable = _all_hold(rep.hypotheses)
    ws = inst.trajectory(max(k, horizon or 0))
    l1 = [inst.task1.loss(w) for w in ws]
    rep.losses = l1[: k + 1]
    g1 = inst.task1.grad(inst.w0)
    n1 = float(np.linalg.norm(g1))
    first = None
    for i, w in enumerate(ws):
        g2 = inst.task2.grad(w)
        if float(g1 @ g2) < inst.eps2 * n1 * float(np.linalg.norm(g2)):
            first = i
            break
    rep.details = {"L1_w0": l1[0], "L1_wk": l1[min(k, len(l1) - 1)], "first_violation": first}
    if rep.applicable:
        rep.conclusion_holds = bool(l1[k] <= l1[0] + 1e-12)
    return rep


def verify_theorem1(inst: TheoremInstance, tol: float = 1e-3) -> VerificationReport:
    """Run ``K`` rule-2 steps and check the joint-objective conclusions.

    Nonconvex: the stationarity bound is asserted. Convex: the per-step
    sufficient decrease ``F(w_{k+1}) <= F(w_k) - (alpha/2 - alpha^2 H/2) ||g2(w_k)||^2``
    is asserted; the distance to the joint minimizer is reported together with
    the lower bound ``||w0 - w*|| - alpha sum ||g2(w_i)||`` that the step-size
    cap imposes on it.
    """
    rep = VerificationReport("thm1", check_hypotheses(inst, "thm1"))
    rep.applicable = _all_hold(rep.hypotheses)
    if not rep.applicable:
        return rep
    ws = inst.trajectory(inst.K)
    fs = [inst.F(w) for w in ws]
    rep.losses = fs
    diverged = len(ws) < inst.K + 1 or not np.isfinite(fs[-1]) or abs(fs[-1]) > DIVERGENCE
    w_star = joint_minimizer(inst.task1, inst.task2)
    f_star = inst.F(w_star)
    g1n = float(np.linalg.norm(inst.task1.grad(inst.w0)))
    h, a = inst.H, inst.alpha
    travelled = a * sum(float(np.linalg.norm(inst.task2.grad(w))) for w in ws[:-1])
    rep.details = {
        "distance_to_optimum": float(np.linalg.norm(ws[-1] - w_star)),
        "distance_lower_bound": max(0.0, float(np.linalg.norm(inst.w0 - w_star)) - travelled),
        "reached_tol": bool(np.linalg.norm(ws[-1] - w_star) <= tol),
        "F_star": f_star,
        "diverged": bool(diverged),
    }
    if diverged:
        rep.conclusion_holds = False
        return rep
    if inst.task1.convex:
        slack = 1e-12 * max(1.0, abs(fs[0]))
        ok = all(
            fs[i + 1] <= fs[i] - (a / 2 - a * a * h / 2) * float(np.linalg.norm(inst.task2.grad(ws[i]))) ** 2 + slack
            for i in range(len(ws) - 1)
        )
        rep.conclusion_holds = bool(ok)
    else:
        best = min(float(np.linalg.norm(inst.grad_F(w))) ** 2 for w in ws[:-1]) if inst.K > 0 else math.inf
        bound = 2.0 / (a * inst.K) * (fs[0] - f_star) + (4 + inst.gamma ** 2) / 2 * g1n ** 2
        rep.details.update({"min_grad_sq": best, "bound": bound})
        rep.conclusion_holds = bool(best < bound)
    return rep


def measured_smoothness(task: SmoothTask, points) -> float:
    """Largest ``||grad(x) - grad(y)|| / ||x - y||`` over consecutive ``points``."""
    out = 0.0
    for x, y in zip(points[:-1], points[1:]):
        d = float(np.linalg.norm(x - y))
        if d > 0:
            out = max(out, float(np.linalg.norm(task.grad(x) - task.grad(y))) / d)
    return out


# ---------------------------------------------------------------- sampling

def _random_basis(rng, d, k) -> np.ndarray:
    if k == 0:
        return empty_basis(d)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q[:, :k]


def _learn_task1(task: SmoothTask, rng, steps: int) -> np.ndarray:
    """``w0`` from a few gradient steps on ``L1`` so ``g1(w0)`` is small but nonzero."""
    w = rng.normal(size=task.dim) * 2
    h = 2.0 * task.half_smoothness(w, 0.0) if task.convex else None
    for _ in range(steps):
        lr = 0.5 / max(h, 1e-12) if task.convex else 0.5 / max(task.half_smoothness(w, 0.0), 1e-12)
        w = w - lr * task.grad(w)
    return w


def sample_quadratic_pair(rng: np.random.Generator, d: int = 6, k: Optional[int] = None, steps: int = 3,
                          kappa: float = 1.0, noise: float = 0.3, leak: float = 0.05):
    """Two quadratics sharing the input subspace of task 1.

    ``A1`` has range exactly ``span(B1)`` so ``g1`` always lies in it; ``A2``
    is mostly inside ``span(B1)`` with a ``leak`` outside it, and ``c2`` is
    placed so that ``g2(w0)`` roughly follows ``g1(w0)``.
    """
    k = int(rng.integers(1, d)) if k is None else k
    b1 = _random_basis(rng, d, k)
    d1 = rng.uniform(0.5, 2.0, size=k)
    a1 = b1 @ np.diag(d1) @ b1.T
    c1 = rng.normal(size=d)
    t1 = SmoothTask.quadratic(a1, c1)
    w0 = _learn_task1(t1, rng, steps)
    m = np.diag(d1 * rng.uniform(0.5, 1.5, size=k))
    rest = _random_basis(rng, d, d)
    comp = rest - b1 @ (b1.T @ rest)
    comp = orthonormalize(comp, 1e-8)
    a2 = b1 @ m @ b1.T + leak * comp @ comp.T
    c2 = w0 - kappa * rng.uniform(1.0, 4.0) * (w0 - c1) + noise * rng.normal(size=d)
    return SmoothTask.quadratic(a2, c2), t1, b1, w0


def sample_quartic_pair(rng: np.random.Generator, d: int = 4, steps: int = 3):
    """Two double-well tasks with nearby centres; task 2 pulls the same way as task 1."""
    wells = rng.uniform(0.5, 1.5, size=d)
    c1 = rng.normal(size=d) * 0.5
    t1 = SmoothTask.quartic(wells, c1, rng.uniform(0.5, 1.5, size=d))
    w0 = _learn_task1(t1, rng, steps)
    g1 = t1.grad(w0)
    c2 = c1 + rng.uniform(0.0, 0.3) * rng.normal(size=d)
    t2 = SmoothTask.quartic(rng.uniform(0.5, 1.5, size=d), c2, rng.uniform(0.5, 1.5, size=d))
    # shift task 2 so its gradient at w0 has a component along g1
    t2.center = t2.center + 0.5 * g1 / max(float(np.linalg.norm(g1)), 1e-12)
    b1 = orthonormalize(g1[:, None], 1e-12) if np.linalg.norm(g1) > 0 else empty_basis(d)
    return t2, t1, b1, w0


def _measured_instance(t1, t2, b1, w0, gamma, K, u) -> TheoremInstance:
    """Instance whose eps1/eps2 are the values realized at ``w0``, with ``alpha = u * cap``."""
    g1, g2 = t1.grad(w0), t2.grad(w0)
    eps1 = float(np.linalg.norm(_proj(g2, b1))) / max(float(np.linalg.norm(g2)), 1e-300)
    eps2 = max(_cos(g1, g2), 0.0)
    inst = TheoremInstance(t1, t2, b1, w0, gamma, K, alpha=0.0, eps1=eps1, eps2=eps2)
    inst.alpha = u * inst.alpha_cap()
    return inst


def sample_instance(rng: np.random.Generator, which: str, kind: str = "quadratic_convex", d: int = 6,
                    K: int = 50, k: int = 10) -> TheoremInstance:
    """One candidate instance for ``which``; the caller filters on hypotheses."""
    gamma = float(rng.uniform(0.2, 0.9))
    if kind == "quadratic_convex":
        t2, t1, b1, w0 = sample_quadratic_pair(rng, d=d, steps=int(rng.integers(1, 6)))
    else:
        t2, t1, b1, w0 = sample_quartic_pair(rng, d=d, steps=int(rng.integers(1, 6)))
    u = float(rng.uniform(0.05, 0.95))
    if which == "thm2_2":
        inst = _measured_instance(t1, t2, b1, w0, gamma, k, u)
        # ask for a bit less alignment than measured so it can persist along the path
        inst.eps2 *= float(rng.uniform(0.3, 0.9))
        n1 = float(np.linalg.norm(t1.grad(w0)))
        inst.alpha = u * 4 * inst.eps2 * n1 / (inst.H * inst.B * k ** 1.5)
        return inst
    return _measured_instance(t1, t2, b1, w0, gamma, K, u)


def sweep(which: str, n_accept: int, seed: int = 0, kind: str = "quadratic_convex", d: int = 6,
          K: int = 50, k: int = 10, max_tries: Optional[int] = None) -> dict:
    """Sample until ``n_accept`` instances satisfy all hypotheses; verify each.

    Returns the accepted reports, the attempt count and the acceptance rate.
    """
    rng = np.random.default_rng(seed)
    max_tries = max_tries or 200 * n_accept
    reports, tries = [], 0
    while len(reports) < n_accept and tries < max_tries:
        tries += 1
        inst = sample_instance(rng, which, kind, d, K, k)
        if which == "thm1":
            rep = verify_theorem1(inst)
        elif which == "thm2_1":
            rep = verify_theorem2_part1(inst)
        else:
            rep = verify_theorem2_part2(inst, k, horizon=5 * k)
        if rep.applicable:
            reports.append(rep)
    return {
        "which": which,
        "kind": kind,
        "accepted": len(reports),
        "attempts": tries,
        "acceptance_rate": len(reports) / tries if tries else 0.0,
        "passed": sum(1 for r in reports if r.conclusion_holds),
        "reports": reports,
    }
