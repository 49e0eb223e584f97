import math

import numpy as np
import pytest

from cuber.theory import (
    SmoothTask,
    TheoremInstance,
    check_hypotheses,
    joint_minimizer,
    measured_smoothness,
    rule1_step,
    rule2_step,
    sample_instance,
    sample_quadratic_pair,
    sweep,
    verify_theorem1,
    verify_theorem2_part1,
    verify_theorem2_part2,
)

E1 = np.array([[1.0], [0.0]])


def _quad(a, c):
    return SmoothTask.quadratic(np.asarray(a, dtype=float), np.asarray(c, dtype=float))


def test_task_validation():
    with pytest.raises(ValueError):
        _quad([[1.0, 2.0], [0.0, 1.0]], [0, 0])
    with pytest.raises(ValueError):
        _quad([[-1.0, 0.0], [0.0, 1.0]], [0, 0])
    with pytest.raises(ValueError):
        SmoothTask.quartic([0.0, 1.0])
    with pytest.raises(ValueError):
        SmoothTask("cubic", np.zeros(2))


def test_quartic_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    t = SmoothTask.quartic(rng.uniform(0.5, 1.5, 3), rng.normal(size=3), rng.uniform(0.5, 1.5, 3))
    w = rng.normal(size=3)
    h = 1e-6
    num = np.array([(t.loss(w + h * e) - t.loss(w - h * e)) / (2 * h) for e in np.eye(3)])
    assert np.allclose(t.grad(w), num, rtol=1e-6, atol=1e-8)


def test_rule1_examples():
    g2 = lambda w: np.array([1.0, 1.0])
    assert np.allclose(rule1_step(np.zeros(2), 0.1, g2, E1), [0.0, -0.1])
    inside = lambda w: np.array([3.0, 0.0])
    assert np.array_equal(rule1_step(np.ones(2), 0.5, inside, E1), np.ones(2))
    empty = np.zeros((2, 0))
    assert np.array_equal(rule1_step(np.ones(2), 0.1, g2, empty), rule2_step(np.ones(2), 0.1, g2))


def test_rule1_step_orthogonal_to_subspace():
    rng = np.random.default_rng(1)
    b, _ = np.linalg.qr(rng.normal(size=(5, 2)))
    w = rng.normal(size=5)
    g = lambda v: rng.normal(size=5)
    dw = rule1_step(w, 0.3, g, b) - w
    assert np.linalg.norm(b.T @ dw) <= 1e-12


def test_rule2_examples():
    t = _quad([[2.0]], [1.0])  # L = (w - 1)^2
    assert rule2_step(np.zeros(1), 0.25, t.grad)[0] == pytest.approx(0.5)
    assert np.array_equal(rule2_step(np.zeros(1), 0.0, t.grad), np.zeros(1))
    assert np.array_equal(rule2_step(np.ones(1), 0.3, t.grad), np.ones(1))


def test_joint_minimizer_quadratic_example():
    eps = 0.1
    w = joint_minimizer(_quad(np.eye(2), [0, 0]), _quad(np.eye(2), [eps, 0]))
    assert np.allclose(w, [eps / 2, 0.0])


def test_joint_minimizer_quartic_is_global():
    rng = np.random.default_rng(2)
    t1 = SmoothTask.quartic(rng.uniform(0.5, 1.5, 2), rng.normal(size=2), rng.uniform(0.5, 1.5, 2))
    t2 = SmoothTask.quartic(rng.uniform(0.5, 1.5, 2), rng.normal(size=2), rng.uniform(0.5, 1.5, 2))
    w = joint_minimizer(t1, t2)
    grid = np.linspace(-4, 4, 401)
    for i in range(2):
        f = lambda x: sum(t.scales[i] * ((x - t.center[i]) ** 2 - t.wells[i]) ** 2 / 4 for t in (t1, t2))
        assert f(w[i]) <= min(f(x) for x in grid) + 1e-12
    with pytest.raises(ValueError):
        joint_minimizer(t1, _quad(np.eye(2), [0, 0]))


def test_measured_smoothness_below_H():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t2, t1, b1, w0 = sample_quadratic_pair(rng)
        inst = TheoremInstance(t1, t2, b1, w0, 0.5, 30, 0.0, 0.5, 0.0)
        inst.alpha = 0.5 / inst.H
        pts = inst.trajectory(30)
        assert measured_smoothness(t2, pts) <= inst.H + 1e-9


def test_zero_g1_example_is_rejected_by_alpha_cap():
    # w0 optimal for task 1 makes the eps2 bound vacuous but also the alpha cap 0
    eps = 0.1
    inst = TheoremInstance(_quad(np.eye(2), [0, 0]), _quad(np.eye(2), [eps, 0]), E1, np.zeros(2),
                           gamma=0.5, K=10, alpha=1e-3, eps1=0.5, eps2=0.0)
    m = check_hypotheses(inst, "thm1")
    assert m["eps2_bound"] >= 0
    assert inst.alpha_cap() == 0.0 and m["alpha_below_cap"] < 0
    rep = verify_theorem1(inst)
    assert not rep.applicable and rep.conclusion_holds is None


def test_vanishing_step_size_is_rejected():
    inst = sample_instance(np.random.default_rng(6), "thm1")
    inst.alpha = 1e-13
    assert check_hypotheses(inst, "thm1")["alpha_usable"] < 0
    assert not verify_theorem1(inst).applicable


def test_identical_tasks_positive_correlation_margin():
    t = _quad(np.eye(2), [1.0, -1.0])
    inst = TheoremInstance(t, t, np.eye(2), np.array([0.5, 0.5]), 0.5, 5, 0.01, 0.5, 0.3)
    m = check_hypotheses(inst, "thm2_2", k=3)
    n1 = np.linalg.norm(t.grad(inst.w0))
    assert m["positive_correlation"] == pytest.approx((1 - 0.3) * n1 ** 2)


def test_hypothesis_margins_against_direct_evaluation():
    rng = np.random.default_rng(4)
    inst = sample_instance(rng, "thm2_1")
    g1, g2 = inst.task1.grad(inst.w0), inst.task2.grad(inst.w0)
    h, b, a, gam = inst.H, inst.B, inst.alpha, inst.gamma
    m = check_hypotheses(inst, "thm2_1")
    cap = min(1 / h, gam * np.linalg.norm(g1) / (h * b * inst.K))
    assert m["alpha_below_cap"] == pytest.approx(cap - a)
    assert m["eps1_bound"] == pytest.approx(inst.eps1 - math.sqrt((1 + 2 * a * h) / (2 + a * h)))
    assert m["eps2_bound"] == pytest.approx(inst.eps2 - (2 + gam ** 2) * np.linalg.norm(g1) / (4 * np.linalg.norm(g2)))
    k = 4
    m2 = check_hypotheses(inst, "thm2_2", k=k)
    assert m2["alpha_bound"] == pytest.approx(4 * inst.eps2 * np.linalg.norm(g1) / (h * b * k ** 1.5) - a)


def test_unknown_part_rejected():
    inst = sample_instance(np.random.default_rng(0), "thm1")
    with pytest.raises(ValueError):
        check_hypotheses(inst, "thm3")


def test_thm2_1_gate_on_orthogonal_gradient():
    # g2 orthogonal to span(B1): the eps1 hypothesis fails, nothing is asserted
    t1 = _quad(np.diag([1.0, 0.0]), [1.0, 0.0])
    t2 = _quad(np.diag([0.0, 1.0]), [0.0, 1.0])
    inst = TheoremInstance(t1, t2, E1, np.zeros(2), 0.5, 5, 0.01, 0.9, 0.0)
    rep = verify_theorem2_part1(inst)
    assert not rep.applicable and rep.conclusion_holds is None


def test_thm2_1_aligned_inside_subspace_strict():
    t1 = _quad(np.diag([1.0, 0.0]), [1.0, 0.0])
    t2 = _quad(np.diag([1.0, 0.0]), [2.0, 0.0])
    inst = TheoremInstance(t1, t2, E1, np.array([0.5, 0.0]), 0.9, 1, 0.0, 0.99, 0.99)
    inst.alpha = 0.5 * inst.alpha_cap()
    rep = verify_theorem2_part1(inst)
    assert rep.details["F_rule1"] > rep.details["F_rule2"]


def test_thm2_2_k0_equality():
    inst = sample_instance(np.random.default_rng(5), "thm2_2", k=3)
    rep = verify_theorem2_part2(inst, 0)
    assert rep.losses == [rep.details["L1_w0"]]
    assert rep.details["L1_wk"] == rep.details["L1_w0"]
    with pytest.raises(ValueError):
        verify_theorem2_part2(inst, -1)


def test_thm2_2_identical_tasks_decrease_L1():
    t = _quad(np.diag([1.0, 2.0]), [1.0, -1.0])
    inst = TheoremInstance(t, t, np.eye(2), np.array([0.9, -0.8]), 0.5, 5, 0.0, 0.5, 0.9)
    inst.alpha = 0.1 / inst.H
    ls = [t.loss(w) for w in inst.trajectory(5)]
    assert all(b < a for a, b in zip(ls, ls[1:]))


def test_theorem1_convex_reports_distance():
    res = sweep("thm1", 20, seed=1)
    assert res["accepted"] == 20 and res["passed"] == 20
    for r in res["reports"]:
        d = r.details
        # the step-size cap keeps the iterate away from the joint optimum
        assert d["distance_to_optimum"] >= d["distance_lower_bound"] - 1e-12


def test_theorem1_nonconvex_bound():
    res = sweep("thm1", 20, seed=2, kind="quartic_nonconvex", d=4)
    assert res["passed"] == res["accepted"] == 20
    for r in res["reports"]:
        assert r.details["min_grad_sq"] < r.details["bound"]


def test_trajectory_stops_on_divergence():
    # alpha * 100 = 5 > 2, so every step multiplies the error by -4
    t1 = _quad(np.eye(1), [1.0])
    t2 = _quad(np.eye(1) * 100, [0.0])
    inst = TheoremInstance(t1, t2, np.eye(1), np.ones(1), 0.5, 200, 0.05, 0.5, 0.0)
    ws = inst.trajectory(200)
    assert len(ws) < 201 and abs(ws[-1, 0]) > 1e12


def test_sweep_reports_acceptance():
    res = sweep("thm2_1", 30, seed=3)
    assert res["accepted"] == 30 and res["attempts"] >= 30
    assert 0 < res["acceptance_rate"] <= 1
    assert all(r.applicable for r in res["reports"])
    assert res["reports"][0].to_dict()["which"] == "thm2_1"


def test_sweep_logs_first_violation():
    res = sweep("thm2_2", 50, seed=4, k=5)
    assert res["passed"] == 50
    firsts = [r.details["first_violation"] for r in res["reports"]]
    assert all(f is None or f >= 5 for f in firsts)
