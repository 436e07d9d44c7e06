import numpy as np
import pytest

from halrp.nn import Batch, add_head, init_network, accuracy, train
from halrp.tasks import (DatasetFormatError, TaskOrder, gen_permuted, gen_split, gen_synthetic, load_dataset,
                         save_dataset)


def test_synthetic_deterministic_and_bounded():
    a = gen_synthetic(3, 8, 20, seed=4)
    b = gen_synthetic(3, 8, 20, seed=4)
    assert a.train.inputs.tobytes() == b.train.inputs.tobytes()
    assert a.test.labels.tobytes() == b.test.labels.tobytes()
    assert a.train.inputs.dtype == np.float32
    assert a.train.inputs.min() >= 0 and a.train.inputs.max() <= 1
    assert len(a.train) == 60 and len(a.test) == 15


def test_noise_free_classes_collapse():
    d = gen_synthetic(4, 6, 10, seed=0, noise=0.0)
    for c in range(4):
        rows = d.train.inputs[d.train.labels == c]
        assert np.all(rows == rows[0])


def test_two_classes_low_noise_is_learnable():
    d = gen_synthetic(2, 10, 200, seed=1, noise=0.05)
    net = init_network([], (10,), seed=0)
    add_head(net, 0, 2, seed=1)
    train(net, 0, d.train, 20, 0.1, 32, seed=2)
    assert accuracy(net, 0, d.test) > 0.95


def test_permuted_tasks():
    base = gen_synthetic(3, 12, 10, seed=0)
    assert len(gen_permuted(base, 1, seed=5)) == 1
    ts = gen_permuted(base, 4, seed=5)
    again = gen_permuted(base, 4, seed=5)
    assert [t.task_id for t in ts] == [0, 1, 2, 3]
    assert ts[0].train.inputs is base.train.inputs
    for t, u in zip(ts, again):
        assert np.array_equal(t.train.inputs, u.train.inputs)
    for t in ts[1:]:
        assert not np.array_equal(t.train.inputs, base.train.inputs)
        np.testing.assert_array_equal(np.sort(t.train.inputs, axis=1), np.sort(base.train.inputs, axis=1))
        np.testing.assert_array_equal(t.train.labels, base.train.labels)
    with pytest.raises(ValueError):
        gen_permuted(base, 0, seed=0)


def test_split_tasks():
    pool = gen_synthetic(4, 5, 6, seed=0)
    ts = gen_split(pool, 2)
    assert len(ts) == 2 and all(t.class_count == 2 for t in ts)
    idx0 = set(map(tuple, ts[0].train.inputs.tolist()))
    idx1 = set(map(tuple, ts[1].train.inputs.tolist()))
    assert not idx0 & idx1
    assert sum(len(t.train) for t in ts) == len(pool.train)
    swapped = gen_split(pool, 2, order=[1, 0])
    assert [t.task_id for t in swapped] == [1, 0]
    assert np.array_equal(swapped[0].train.inputs, ts[1].train.inputs)
    with pytest.raises(ValueError):
        gen_split(pool, 3)


def test_task_order():
    assert TaskOrder.from_seed(5, 3) == TaskOrder.from_seed(5, 3)
    assert sorted(TaskOrder.from_seed(5, 3)) == [0, 1, 2, 3, 4]
    assert list(TaskOrder.identity(3)) == [0, 1, 2]
    with pytest.raises(ValueError):
        TaskOrder((0, 0, 1))


def test_dataset_round_trip(tmp_path):
    d = gen_synthetic(3, 7, 5, seed=2)
    path = tmp_path / "d.bin"
    save_dataset(path, d.train, 3)
    raw = path.read_bytes()
    assert raw.startswith(b"HDSET1\ncount=15\ndims=7\nclasses=3\n\n")
    assert len(raw) == len(b"HDSET1\ncount=15\ndims=7\nclasses=3\n\n") + 15 * (7 * 4 + 4)
    b, classes = load_dataset(path)
    assert classes == 3
    assert b.inputs.tobytes() == d.train.inputs.tobytes()
    np.testing.assert_array_equal(b.labels, d.train.labels)


def test_dataset_errors(tmp_path):
    d = gen_synthetic(2, 3, 4, seed=0)
    path = tmp_path / "d.bin"
    save_dataset(path, d.train)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DatasetFormatError, match="truncated"):
        load_dataset(path)
    path.write_bytes(b"HDSET1\ncount=2\n\n")
    with pytest.raises(DatasetFormatError, match="dims"):
        load_dataset(path)


def test_csv_import(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("1,0.5,0.25\n0,1.0,0.0\n\n2,0.0,0.75\n")
    b, classes = load_dataset(path)
    assert classes == 3
    np.testing.assert_array_equal(b.labels, [1, 0, 2])
    np.testing.assert_allclose(b.inputs[2], [0.0, 0.75])
    path.write_text("1,0.5\n0,abc\n")
    with pytest.raises(DatasetFormatError, match=":2:"):
        load_dataset(path)
