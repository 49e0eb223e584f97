import numpy as np
import pytest

from cuber.learner import (
    ContinualLearner,
    LearnerConfig,
    TaskObjective,
    effective_weight,
    project_out_gradient,
    regime3_regularizer_grad,
    scaling_gradient,
    scaling_operator,
    train_multitask,
    update_scaling,
)
from cuber.linalg import project
from cuber.memory import SubspaceMemory
from cuber.network import Layer, Network, backward, forward
from cuber.regimes import LayerRegimes, RegimeAssignment
from cuber.tasks import dataset_from_arrays, generate_synthetic_base

from .checks import numeric_grad, random_basis, random_objective, rel_err

E1 = np.array([[1.0], [0.0]])


def test_config_validation():
    with pytest.raises(ValueError):
        LearnerConfig(mode="bogus")
    with pytest.raises(ValueError):
        LearnerConfig(lr=0.0)
    with pytest.raises(ValueError):
        LearnerConfig(reg_weight=-1.0)
    with pytest.raises(ValueError):
        LearnerConfig(scaling_storage="nowhere")
    assert LearnerConfig(lr=0.3).beta == 0.3
    assert LearnerConfig(scaling_lr=0.1).beta == 0.1


def test_effective_weight_identity_scaling():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 4))
    b = random_basis(rng, 4, 2)
    assert np.allclose(effective_weight(w, {0: np.eye(2)}, {0: b}), w)


def test_effective_weight_zero_scaling_strips_projection():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 4))
    b = random_basis(rng, 4, 2)
    assert np.allclose(effective_weight(w, {0: np.zeros((2, 2))}, {0: b}), w - project(w, b))


def test_effective_weight_hand_example():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = effective_weight(w, {0: np.array([[2.0]])}, {0: E1})
    assert np.allclose(out, [[2.0, 2.0], [6.0, 4.0]])


def test_effective_weight_missing_basis():
    with pytest.raises(KeyError):
        effective_weight(np.eye(2), {3: np.eye(1)}, {})


def test_scaling_operator_matches_effective_weight():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 5))
    bases = {0: random_basis(rng, 5, 2), 1: random_basis(rng, 5, 3)}
    q = {j: rng.normal(size=(b.shape[1],) * 2) for j, b in bases.items()}
    assert np.allclose(w @ scaling_operator(5, q, bases), effective_weight(w, q, bases))


def test_project_out_examples():
    g = np.array([[1.0, 1.0]])
    assert np.array_equal(project_out_gradient(g, []), g)
    assert np.allclose(project_out_gradient(g, [E1]), [[0.0, 1.0]])
    assert np.allclose(project_out_gradient(g, [np.eye(2)]), 0.0)


def test_project_out_overlapping_bases():
    rng = np.random.default_rng(3)
    b = random_basis(rng, 5, 3)
    g = rng.normal(size=(2, 5))
    # a repeated basis must not be subtracted twice
    assert np.allclose(project_out_gradient(g, [b, b]), g - project(g, b))


def test_regularizer_examples():
    w = np.array([[1.0, 2.0]])
    v, g = regime3_regularizer_grad(w, w, [E1], 1.0)
    assert v == 0.0 and np.all(g == 0)
    v, _ = regime3_regularizer_grad(w + np.array([[0.0, 1.0]]), w, [E1], 1.0)
    assert v == 0.0
    v, g = regime3_regularizer_grad(w + np.array([[1.0, 0.0]]), w, [E1], 1.0)
    assert v == 1.0 and np.allclose(g, [[2.0, 0.0]])
    with pytest.raises(ValueError):
        regime3_regularizer_grad(w, w, [E1], -1.0)


def test_update_scaling_examples():
    q = np.array([[1.5]])
    assert np.array_equal(update_scaling(q, 0.1, np.zeros((1, 1))), q)
    with pytest.raises(ValueError):
        update_scaling(q, 0.0, q)
    with pytest.raises(ValueError):
        update_scaling(q, 0.1, np.zeros((2, 2)))


def test_scalar_scaling_chain_rule():
    # one linear layer, 1-dim basis: dL/dq = b' w' G b
    rng = np.random.default_rng(4)
    w = rng.normal(size=(2, 3))
    b = random_basis(rng, 3, 1)
    x = rng.normal(size=(4, 3))
    y = rng.integers(0, 2, size=4)
    net = Network([Layer(w, np.zeros(2), "identity")], {}, multi_head=False)
    q = np.array([[0.7]])

    def loss():
        return backward(net, forward(net, x, None, [effective_weight(w, {0: q}, {0: b})]), y)[0]

    _, g = backward(net, forward(net, x, None, [effective_weight(w, {0: q}, {0: b})]), y)
    analytic = scaling_gradient(w, g.weights[0], b)
    assert analytic.shape == (1, 1)
    assert rel_err(analytic, numeric_grad(loss, q, 1e-5)) < 1e-4
    with pytest.raises(ValueError):
        scaling_gradient(w, g.weights[0][:1], b)


@pytest.mark.parametrize("seed", range(10))
def test_step_is_projected_total_gradient(seed):
    obj, x, y, task = random_objective(seed)
    net = obj.net

    def value():
        return obj.objective(x, y, task)[0]

    numeric = [numeric_grad(value, layer.weight) for layer in net.layers]
    trace = forward(net, x, task, obj.effective_weights())
    _, grads = backward(net, trace, y, obj.config.loss)
    step = obj.transform(grads, trace)
    for l, g in enumerate(numeric):
        expected = g - project(g, obj.protected_basis(l))
        assert rel_err(step.weights[l], expected) < 1e-4


def test_identity_fold_is_bit_identical():
    rng = np.random.default_rng(5)
    net = Network.build((4, 5, 3), rng)
    mem = SubspaceMemory()
    layers = []
    for l, layer in enumerate(net.layers):
        mem.bases[(l, 0)] = random_basis(rng, layer.in_dim, 2)
        layers.append(LayerRegimes(reg3={0}))
    before = [w.copy() for w in net.weights()]
    obj = TaskObjective(net, mem, RegimeAssignment(layers), LearnerConfig())
    obj.fold()
    assert all(np.array_equal(a, b) for a, b in zip(before, net.weights()))


def _blob_task(seed, task_id, n_classes=3, dim=6, per_class=60):
    base = generate_synthetic_base(n_classes=n_classes, dim=dim, per_class=per_class, separation=3.0, seed=seed)
    x = np.concatenate([base.train[0], base.valid[0], base.test[0]])
    y = np.concatenate([base.train[1], base.valid[1], base.test[1]])
    return dataset_from_arrays(x, y, seed=seed, task_id=task_id)


def _learner(mode, seed=0, dims=(6, 16, 16), **kw):
    rng = np.random.default_rng(seed)
    cfg = dict(mode=mode, lr=0.05, batch_size=16, early_stopping=False, max_epochs=5)
    cfg.update(kw)
    return ContinualLearner(Network.build(dims, rng), LearnerConfig(**cfg), rng)


def test_plain_equals_cuber_on_first_task():
    data = _blob_task(0, 0)
    a, b = _learner("plain"), _learner("cuber")
    ra, rb = a.learn_task(data), b.learn_task(data)
    assert ra.accuracies == rb.accuracies
    assert all(np.array_equal(p, q) for p, q in zip(a.net.weights(), b.net.weights()))


def test_identical_tasks_do_not_forget():
    t0, t1 = _blob_task(1, 0), _blob_task(1, 1)
    learner = _learner("cuber", seed=1)
    r0 = learner.learn_task(t0)
    r1 = learner.learn_task(t1, [t0])
    assert r1.accuracies[0] >= r0.accuracies[0] - 0.01


def test_orthogonal_only_freezes_old_input_span():
    rng = np.random.default_rng(2)
    # task 1 lives in a 3-dim subspace of R^6; task 2 in the same subspace
    frame = random_basis(rng, 6, 3)
    x1 = rng.normal(size=(150, 3)) @ frame.T
    x2 = rng.normal(size=(150, 3)) @ frame.T
    t1 = dataset_from_arrays(x1, (x1 @ frame[:, 0] > 0).astype(int), 0, 0)
    t2 = dataset_from_arrays(x2, (x2 @ frame[:, 1] > 0).astype(int), 0, 1)
    net = Network([Layer.init(6, 2, rng, "identity")], {}, multi_head=False)
    cfg = LearnerConfig(mode="orthogonal_only", lr=0.1, batch_size=16, early_stopping=False, max_epochs=3)
    learner = ContinualLearner(net, cfg, rng)
    learner.learn_task(t1)
    w_old = net.layers[0].weight.copy()
    learner.learn_task(t2, [t1])
    dw = net.layers[0].weight - w_old
    probe = rng.normal(size=(20, 3)) @ frame.T
    assert np.all(np.linalg.norm(probe @ dw.T, axis=1) <= 1e-6 * np.linalg.norm(probe, axis=1))


def _three_task_run(mode):
    learner = _learner(mode, seed=3, max_epochs=3)
    tasks = [_blob_task(10 + i, i) for i in range(3)]
    results = [learner.learn_task(t, tasks[:i]) for i, t in enumerate(tasks)]
    learner.weight_history.append([w.copy() for w in learner.net.weights()])
    return learner, results


def test_orthogonal_only_no_interference():
    learner, _ = _three_task_run("orthogonal_only")
    hist = learner.weight_history
    for t in range(1, len(hist) - 1):
        for l, (after, before) in enumerate(zip(hist[t + 1], hist[t])):
            for j in range(t):
                assert np.linalg.norm((after - before) @ learner.memory.basis(l, j)) <= 1e-6


def test_degeneration_events_never_repeat():
    learner, results = _three_task_run("cuber")
    for r in results:
        keys = [(e["layer"], e["task"]) for e in r.degenerations]
        assert len(keys) == len(set(keys))
        for l, j in keys:
            assert j not in r.regimes[l]["reg3"]


def test_per_task_storage_keeps_scalings():
    learner, results = _three_task_run("cuber")
    assert set(learner.scalings) == {1, 2}
    assert learner.task_weights(0) is None
    assert len(learner.task_weights(1)) == len(learner.net.layers)


def test_fold_storage_discards_scalings():
    learner = _learner("cuber", seed=4, max_epochs=2, scaling_storage="fold")
    t0, t1 = _blob_task(4, 0), _blob_task(5, 1)
    learner.learn_task(t0)
    learner.learn_task(t1, [t0])
    assert learner.scalings == {}
    assert learner.task_weights(1) is None


def test_forward_only_never_uses_regime3():
    learner, results = _three_task_run("forward_only")
    for r in results[1:]:
        assert all(not lr["reg3"] for lr in r.regimes)


def test_head_warm_up_fits_new_head():
    data = _blob_task(6, 0)
    cold = _learner("cuber", seed=6, head_warmup_steps=0, max_epochs=1, lr=1e-9)
    warm = _learner("cuber", seed=6, max_epochs=1, lr=1e-9)
    assert warm.learn_task(data).accuracies[0] > cold.learn_task(data).accuracies[0]


def test_multitask_mode_rejected_by_learner():
    with pytest.raises(ValueError):
        _learner("multitask").learn_task(_blob_task(0, 0))


def test_train_multitask_learns_all_tasks():
    rng = np.random.default_rng(7)
    tasks = [_blob_task(20 + i, i) for i in range(2)]
    net = Network.build((6, 16, 16), rng)
    accs = train_multitask(net, tasks, LearnerConfig(mode="multitask", lr=0.05, batch_size=16,
                                                     early_stopping=False, max_epochs=30), rng)
    assert set(accs) == {0, 1}
    assert min(accs.values()) > 0.8
