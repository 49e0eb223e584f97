import numpy as np
import pytest

from cuber.network import Network, evaluate, sgd_epoch
from cuber.tasks import (
    dataset_from_arrays,
    generate_conflicting_tasks,
    generate_overlap_split_tasks,
    generate_permuted_tasks,
    generate_synthetic_base,
    load_csv_dataset,
    overlapping_ranges,
    save_csv_dataset,
)


def test_synthetic_base_deterministic_and_split():
    a = generate_synthetic_base(n_classes=4, dim=5, per_class=50, seed=3)
    b = generate_synthetic_base(n_classes=4, dim=5, per_class=50, seed=3)
    for (xa, ya), (xb, yb) in zip(a.splits().values(), b.splits().values()):
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    assert [len(s[0]) for s in a.splits().values()] == [160, 20, 20]
    assert a.n_classes == 4 and a.dim == 5


def test_synthetic_base_separation():
    base = generate_synthetic_base(n_classes=5, dim=8, per_class=10, separation=7.0, seed=0, noise=0.0)
    x, y = base.train
    means = np.array([x[y == c].mean(axis=0) for c in range(5)])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert d[~np.eye(5, dtype=bool)].min() >= 7.0 - 1e-9


def test_synthetic_base_errors():
    with pytest.raises(ValueError):
        generate_synthetic_base(per_class=0)
    with pytest.raises(ValueError):
        generate_synthetic_base(separation=0.0)
    with pytest.raises(ValueError):
        generate_synthetic_base(dim=4, noise_rank=5)


def test_low_rank_noise_stays_in_class_subspace():
    base = generate_synthetic_base(n_classes=3, dim=10, per_class=40, seed=1, noise_rank=2)
    x, y = base.train
    for c in range(3):
        centred = x[y == c] - x[y == c].mean(axis=0)
        s = np.linalg.svd(centred, compute_uv=False)
        assert s[2] <= 1e-10 * s[0]


def test_well_separated_blobs_are_linearly_separable():
    base = generate_synthetic_base(n_classes=3, dim=6, per_class=100, separation=12.0, seed=0)
    rng = np.random.default_rng(0)
    net = Network.build((6, 3), rng, multi_head=False, n_out=3)
    net.layers[-1].activation = "identity"
    for _ in range(20):
        sgd_epoch(net, *base.train, 0.05, 16, rng)
    assert evaluate(net, *base.test) >= 0.99


def test_permuted_single_task_is_base():
    base = generate_synthetic_base(n_classes=2, dim=4, per_class=10)
    (t,) = generate_permuted_tasks(base, 1)
    assert np.array_equal(t.train[0], base.train[0])


def test_permutations_are_invertible_bijections():
    base = generate_synthetic_base(n_classes=2, dim=6, per_class=10)
    tasks = generate_permuted_tasks(base, 3, seed=4)
    for t in tasks:
        assert sorted(t.permutation) == list(range(6))
        inv = np.argsort(t.permutation)
        assert np.array_equal(t.test[0][:, inv], base.test[0])
        assert np.array_equal(t.test[1], base.test[1])
    assert [t.task_id for t in tasks] == [0, 1, 2]
    with pytest.raises(ValueError):
        generate_permuted_tasks(base, 0)


def test_overlap_split_shares_samples():
    base = generate_synthetic_base(n_classes=15, dim=4, per_class=20)
    t0, t1 = generate_overlap_split_tasks(base, [(0, 9), (5, 14)])
    shared = set(t0.sample_ids["train"]) & set(t1.sample_ids["train"])
    expected = set(base.sample_ids["train"][(base.train[1] >= 5) & (base.train[1] <= 9)])
    assert shared == expected
    assert t1.class_map[5] == 0 and t1.n_classes == 10
    assert t1.train[1].max() == 9


def test_overlap_identical_and_disjoint_ranges():
    base = generate_synthetic_base(n_classes=4, dim=3, per_class=10)
    a, b = generate_overlap_split_tasks(base, [(0, 1), (0, 1)])
    assert np.array_equal(a.train[0], b.train[0])
    c, d = generate_overlap_split_tasks(base, [(0, 1), (2, 3)])
    assert not set(c.sample_ids["test"]) & set(d.sample_ids["test"])
    with pytest.raises(ValueError):
        generate_overlap_split_tasks(base, [(2, 4)])


def test_overlapping_ranges():
    assert overlapping_ranges(3, 4, 2) == [(0, 3), (2, 5), (4, 7)]


def test_conflicting_tasks_relabel_a_fraction():
    base = generate_synthetic_base(n_classes=3, dim=4, per_class=200, seed=2)
    t0, t1 = generate_conflicting_tasks(base, 0.3, seed=2)
    assert np.array_equal(t0.train[0], t1.train[0])
    changed = np.mean(t0.train[1] != t1.train[1])
    assert 0.25 < changed < 0.35
    assert t1.task_id == 1 and t1.train[1].max() < 3
    with pytest.raises(ValueError):
        generate_conflicting_tasks(base, 0.0)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 3))
    y = rng.integers(0, 3, size=30)
    path = tmp_path / "data.csv"
    save_csv_dataset(path, x, y)
    a = load_csv_dataset(path, seed=1)
    b = dataset_from_arrays(x, y, seed=1)
    assert np.array_equal(a.train[0], b.train[0]) and np.array_equal(a.test[1], b.test[1])


def test_csv_row_count_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("3,2\n1.0,2.0,0\n")
    with pytest.raises(ValueError):
        load_csv_dataset(path)


def test_dataset_label_validation():
    with pytest.raises(ValueError):
        from cuber.tasks import TaskDataset
        TaskDataset((np.ones((2, 2)), np.array([0, 1])), (np.ones((1, 3)), np.array([0])),
                    (np.ones((1, 2)), np.array([0])))
