import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_net
from oracles import oracle_knn
from sdr.clustering import split_dataset
from sdr.io import Checkpoint
from sdr.numerics import l2_normalize, make_rng
from sdr.routing import (DownstreamTask, RouteReport, export_subnet, extract_features, knn_accuracy, knn_predict,
                         load_subnet, route)
from sdr.sdrnet import FULL, BnStats, CalibrationRequired, NetConfig, PathCode, SdrNet, all_paths, bn_calibrate


# ------------------------------------------------------------------- kNN ---

def test_knn_examples(rng):
    q = l2_normalize(rng.standard_normal((5, 3)))
    assert list(knn_predict(l2_normalize(rng.standard_normal((1, 3))), [2], q, 10)) == [2] * 5
    train = l2_normalize(rng.standard_normal((6, 3)))
    labels = np.array([0, 1, 2, 0, 1, 2])
    np.testing.assert_array_equal(knn_predict(train, labels, train, 1), labels)
    with pytest.raises(ValueError):
        knn_predict(np.zeros((0, 3)), [], q, 3)


def test_knn_random_instance_matches_oracle(rng):
    train = l2_normalize(rng.standard_normal((50, 4)))
    labels = rng.integers(0, 3, 50)
    q = l2_normalize(rng.standard_normal((20, 4)))
    for k in (1, 3, 7, 50):
        np.testing.assert_array_equal(knn_predict(train, labels, q, k), oracle_knn(train, labels, q, k))


def test_knn_tie_rules():
    train = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]])
    q = np.array([[1.0, 1.0]])
    # all four neighbours tie: counts 2-2, similarity sums tie -> lower class id
    assert knn_predict(train, [1, 1, 0, 0], q, 4)[0] == 0
    # k=1 among tied neighbours takes the lowest training index
    assert knn_predict(train, [1, 1, 0, 0], q, 1)[0] == 1
    # equal counts, larger summed similarity wins
    train = np.array([[1.0, 0], [0.6, 0.8], [0, 1.0], [0.8, 0.6]])
    assert knn_predict(train, [0, 1, 1, 0], np.array([[1.0, 0.0]]), 4)[0] == 0


def test_knn_clipping_and_scale(rng):
    train = rng.standard_normal((12, 3))
    labels = rng.integers(0, 3, 12)
    q = rng.standard_normal((9, 3))
    np.testing.assert_array_equal(knn_predict(train, labels, q, 100), knn_predict(train, labels, q, 12))
    np.testing.assert_array_equal(knn_predict(train, labels, q * 3.7, 5), knn_predict(train, labels, q, 5))


def test_weighted_knn_votes_by_similarity():
    train = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    q = np.array([[0.99, 0.14]])
    assert knn_predict(train, [0, 1, 1], q, 3)[0] == 1
    assert knn_predict(train, [0, 1, 1], q, 3, weighted=True)[0] == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.integers(1, 10), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_knn_oracle_property(n, k, c, seed):
    r = make_rng(seed)
    train = r.integers(-2, 3, (n, 3)).astype(float)  # small integers force exact ties
    labels = r.integers(0, c, n)
    q = r.integers(-2, 3, (4, 3)).astype(float)
    np.testing.assert_array_equal(knn_predict(train, labels, q, k), oracle_knn(train, labels, q, k))


def test_knn_accuracy_examples(rng):
    x = l2_normalize(rng.standard_normal((20, 5)))
    y = rng.integers(0, 3, 20)
    task = DownstreamTask("t", x, y, x, y)
    assert knn_accuracy(task, x, x, 1) == 1.0


def test_knn_accuracy_shuffled_labels_is_chance():
    accs = []
    for seed in range(30):
        r = make_rng(seed)
        x = l2_normalize(r.standard_normal((100, 5)))
        y = np.repeat([0, 1], 50)
        ev = l2_normalize(r.standard_normal((100, 5)))
        task = DownstreamTask("t", x, r.permutation(y), ev, r.permutation(y))
        accs.append(knn_accuracy(task, x, ev, 5))
    se = np.std(accs) / np.sqrt(len(accs))
    assert abs(np.mean(accs) - 0.5) <= 3 * se
    assert all(0 <= a <= 1 for a in accs)


def test_task_label_contract(rng):
    with pytest.raises(ValueError):
        DownstreamTask("t", np.zeros((2, 2)), [0, 0], np.zeros((1, 2)), [1])


# -------------------------------------------------------------- features ---

def test_extract_features(rng):
    net = tiny_net(rng, g=1, L=2, cs=8, ci=8)
    x = rng.standard_normal((10, 4))
    x[3] = x[7]
    bn = BnStats()
    bn_calibrate(net, FULL, x, 64, bn)
    bn_calibrate(net, PathCode((0, 0)), x, 64, bn)
    f = extract_features(net, FULL, x, bn)
    assert f.shape[0] == 10
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)
    assert np.array_equal(f[3], f[7])
    assert np.array_equal(f, extract_features(net, PathCode((0, 0)), x, bn))
    with pytest.raises(CalibrationRequired):
        extract_features(net, FULL, x, BnStats())


# ----------------------------------------------------------------- route ---

def _task(rng, d=4, name="t"):
    return DownstreamTask(name, rng.standard_normal((30, d)), rng.integers(0, 3, 30),
                          rng.standard_normal((20, d)), rng.integers(0, 3, 20))


def test_route_single_path(rng):
    net = tiny_net(rng, g=1, L=1)
    x = rng.standard_normal((20, 4))
    rep = route(net, BnStats(), split_dataset(np.zeros(20, dtype=int), 1), x, _task(rng), 5)
    assert len(rep.entries) == 2 and rep.entries[-1].index is None
    assert rep.best == 0 or rep.entries[-1].accuracy > rep.entries[0].accuracy


def test_route_deterministic_and_text_roundtrip(rng):
    net = tiny_net(rng)
    x = rng.standard_normal((40, 4))
    split = split_dataset(np.arange(40) % 4, 4)
    task = _task(rng)
    a = route(net, BnStats(), split, x, task, 7, seed=3, baseline=0.25)
    b = route(net, BnStats(), split, x, task, 7, seed=3, baseline=0.25)
    assert a.to_text() == b.to_text()
    back = RouteReport.from_text(a.to_text())
    assert back.to_text() == a.to_text()
    assert a.best_accuracy == max(e.accuracy for e in a.entries)
    assert len(a.entries) == 5


def test_route_threads_agree(rng, monkeypatch):
    net = tiny_net(rng)
    x = rng.standard_normal((40, 4))
    split = split_dataset(np.arange(40) % 4, 4)
    task = _task(rng)
    serial = route(net, BnStats(), split, x, task, 7).to_text()
    monkeypatch.setenv("SDR_THREADS", "4")
    assert route(net, BnStats(), split, x, task, 7).to_text() == serial


def test_route_ties_go_to_lowest_path_then_paths_before_full():
    net = SdrNet(NetConfig(4, L=2, g=2))  # zero weights: every target scores the same
    r = make_rng(0)
    x = r.standard_normal((40, 4))
    rep = route(net, BnStats(), split_dataset(np.arange(40) % 4, 4), x, _task(r), 5)
    assert len(set(e.accuracy for e in rep.entries)) == 1
    assert rep.best == 0 and "ties" in rep.note


def test_route_calibrates_on_own_subset(rng):
    net = tiny_net(rng)
    x = rng.standard_normal((40, 4))
    split = split_dataset(np.arange(40) % 4, 4)
    bn = BnStats()
    route(net, bn, split, x, _task(rng), 5)
    for i, p in enumerate(all_paths(2, 2)):
        expected = bn_calibrate(net, p, x[split.subset(i + 1)], 256)
        got = bn.get(p)
        assert all(np.array_equal(got[k][0], expected[k][0]) for k in expected)


# ---------------------------------------------------------------- export ---

def test_export_forward_is_bit_exact(rng, tmp_path):
    net = tiny_net(rng, g=3, L=2, stem=3)
    x = rng.standard_normal((30, 4))
    bn = BnStats()
    p = PathCode((2, 1))
    bn_calibrate(net, p, x, 8, bn)
    ck = export_subnet(net, p, bn, {"seed": "1"})
    ck.save(tmp_path / "a.ckpt")
    first = (tmp_path / "a.ckpt").read_bytes()
    loaded = Checkpoint.load(tmp_path / "a.ckpt")
    loaded.save(tmp_path / "b.ckpt")
    assert (tmp_path / "b.ckpt").read_bytes() == first
    sub, target, sub_bn = load_subnet(loaded)
    assert sub.param_count(FULL) == net.param_count(p)
    q = rng.standard_normal((100, 4))
    a = net.forward(p, q, "eval", bn)
    b = sub.forward(target, q, "eval", sub_bn)
    for u, v in ((a.backbone, b.backbone), (a.z, b.z), (a.p, b.p)):
        assert np.array_equal(u, v)
    with pytest.raises(CalibrationRequired):
        export_subnet(net, PathCode((0, 0)), bn)
