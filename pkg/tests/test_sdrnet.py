import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomize, tiny_net
from oracles import linear_loss_check
from sdr.io import Checkpoint
from sdr.numerics import SgdState, make_rng, sgd_step
from sdr.sdrnet import (FULL, BnStats, CalibrationRequired, NetConfig, PathCode, SdrNet, StaleCacheError,
                        all_paths, bn_calibrate, path_decode, path_index)


# ----------------------------------------------------------------- paths ---

def test_path_index_examples():
    assert path_index(PathCode((0, 0, 0, 0)), 4) == 0
    assert path_index(PathCode((3, 3, 3, 3)), 4) == 255
    assert path_index(PathCode((1, 0, 1)), 2) == 5
    assert path_decode(5, 2, 3) == PathCode((1, 0, 1))


def test_path_errors():
    with pytest.raises(ValueError):
        path_index(PathCode((2, 0)), 2)
    with pytest.raises(ValueError):
        path_decode(8, 2, 3)
    with pytest.raises(ValueError):
        path_decode(-1, 2, 3)


@given(st.integers(1, 5), st.integers(1, 4), st.data())
def test_path_roundtrip(g, L, data):
    i = data.draw(st.integers(0, g ** L - 1))
    p = path_decode(i, g, L)
    assert len(p.digits) == L and path_index(p, g) == i


def test_path_counts():
    for (g, L), n in (((2, 3), 8), ((4, 4), 256)):
        paths = all_paths(g, L)
        assert len(paths) == n == len(set(paths))


# ------------------------------------------------------------ accounting ---

def _bare(g, input_dim=4, L=1, cs=2, ci=2, rng=None):
    return SdrNet(NetConfig(input_dim, L, g, cs, ci, (), (), bn_affine=False), rng)


def test_param_count_hand_example():
    net = _bare(2)
    assert net.param_count(FULL) == 30
    for p in all_paths(2, 1):
        assert net.param_count(p) == 20


def test_param_count_g1_full_equals_path():
    net = SdrNet(NetConfig(5, L=3, g=1, stem_dim=3), make_rng(0))
    assert net.param_count(FULL) == net.param_count(PathCode((0, 0, 0)))


def test_param_count_same_for_every_path():
    net = SdrNet(NetConfig(5, L=2, g=3, stem_dim=4), make_rng(0))
    assert len({net.param_count(p) for p in all_paths(3, 2)}) == 1


@pytest.mark.parametrize("L", [1, 2, 3])
def test_full_count_linear_in_g_while_paths_grow_as_power(L):
    gs = [1, 2, 4, 8]
    counts = [SdrNet(NetConfig(6, L, g, 3, 2, (8, 4), (3, 4))).param_count() for g in gs]
    slope = counts[1] - counts[0]
    assert slope > 0
    for g, n in zip(gs, counts):
        assert n == counts[0] + slope * (g - 1)
    # per-group cost equals the hand formula: L groups of (fan_in*ci + ci) weights and ci*2 BN params
    fan_ins = [6] + [3 + 2] * (L - 1)
    assert slope == sum(f * 2 + 2 + 2 * 2 for f in fan_ins)
    assert [len(all_paths(g, L)) for g in gs] == [g ** L for g in gs]


# ----------------------------------------------------------------- views ---

def test_subnet_views_are_the_same_arrays():
    net = SdrNet(NetConfig(4, L=2, g=2, stem_dim=3), make_rng(0))
    a = net.subnet_params(PathCode((0, 0)))
    b = net.subnet_params(PathCode((0, 0)))
    assert a.keys() == b.keys() and all(a[n] is b[n] is net.params[n] for n in a)


def test_subnet_view_intersection_example():
    net = SdrNet(NetConfig(4, L=2, g=2, stem_dim=3), make_rng(0))
    common = set(net.subnet_params(PathCode((0, 0)))) & set(net.subnet_params(PathCode((0, 1))))
    expected = {"stem.w", "stem.b"}
    expected |= {n for n in net.params if n.startswith(("proj.", "pred."))}
    for l in (0, 1):
        expected |= {f"block{l}.shared.w", f"block{l}.shared.b",
                     f"block{l}.bn.shared.scale", f"block{l}.bn.shared.shift"}
    expected |= {"block0.ind0.w", "block0.ind0.b", "block0.bn.ind0.scale", "block0.bn.ind0.shift"}
    assert common == expected


def test_union_of_views_is_everything():
    net = SdrNet(NetConfig(4, L=3, g=3), make_rng(0))
    union = set()
    for p in all_paths(3, 3):
        union |= set(net.subnet_params(p))
    assert union == set(net.params)


def test_view_aliasing():
    net = SdrNet(NetConfig(4, L=2, g=2), make_rng(0))
    a = net.subnet_params(PathCode((0, 1)))
    a["block0.ind0.w"][0, 0] = 123.0
    assert net.subnet_params(PathCode((0, 0)))["block0.ind0.w"][0, 0] == 123.0
    assert net.params["block0.ind0.w"][0, 0] == 123.0


def test_invalid_target():
    net = SdrNet(NetConfig(4, L=2, g=2), make_rng(0))
    with pytest.raises(ValueError):
        net.subnet_params(PathCode((0,)))
    with pytest.raises(ValueError):
        net.subnet_params(PathCode((0, 2)))


# --------------------------------------------------------------- forward ---

def test_zero_weights_give_zero_outputs():
    net = SdrNet(NetConfig(4, L=2, g=2))  # no rng: all zeros
    res = net.forward(FULL, make_rng(0).standard_normal((5, 4)))
    assert np.array_equal(res.z, np.zeros_like(res.z))
    assert np.array_equal(res.p, np.zeros_like(res.p))


def test_g1_full_equals_path(rng):
    net = tiny_net(rng, g=1, L=3, stem=3)
    x = rng.standard_normal((6, 4))
    a = net.forward(FULL, x)
    b = net.forward(PathCode((0, 0, 0)), x)
    for u, v in ((a.backbone, b.backbone), (a.z, b.z), (a.p, b.p)):
        assert np.array_equal(u, v)


def test_forward_shapes_and_errors(rng):
    net = SdrNet(NetConfig(4, L=2, g=2), rng)
    res = net.forward(PathCode((1, 0)), rng.standard_normal((7, 4)))
    assert res.z.shape == (7, 32) and res.p.shape == (7, 32)
    assert res.backbone.shape == (7, 16)
    assert net.forward(FULL, rng.standard_normal((7, 4))).backbone.shape == (7, 24)
    with pytest.raises(ValueError):
        net.forward(FULL, rng.standard_normal((1, 4)), "train")
    with pytest.raises(ValueError):
        net.forward(FULL, rng.standard_normal((3, 5)))
    with pytest.raises(CalibrationRequired):
        net.forward(FULL, rng.standard_normal((3, 4)), "eval", BnStats())


def test_constant_channel_is_floored(rng):
    net = SdrNet(NetConfig(4, L=1, g=2), rng)
    x = np.ones((5, 4))
    res = net.forward(FULL, x)
    assert np.all(np.isfinite(res.z)) and np.all(np.isfinite(res.p))


# -------------------------------------------------------------- backward ---

@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2), st.integers(1, 2), st.integers(0, 10 ** 6),
       st.booleans(), st.booleans())
def test_backward_matches_finite_differences(g, L, cs, ci, seed, stem, head_bn):
    rng = make_rng(seed)
    cfg = NetConfig(3, L, g, cs, ci, (3, 2), (3, 2), stem_dim=2 if stem else 0, head_bn=head_bn)
    net = randomize(SdrNet(cfg, rng), rng)
    assert net.param_count() <= 1000
    x = rng.standard_normal((5, 3))
    target = FULL if seed % 3 == 0 else path_decode(seed % g ** L, g, L)
    assert linear_loss_check(net, target, x, rng) <= 1e-4


def test_backward_only_touches_view_and_zero_upstream(rng):
    net = tiny_net(rng)
    p = PathCode((0, 1))
    res = net.forward(p, rng.standard_normal((4, 4)))
    grads = net.backward(res.cache, np.zeros_like(res.p), np.zeros_like(res.z))
    assert set(grads) == set(net.subnet_params(p))
    assert all(not g.any() for g in grads.values())


def test_stale_cache(rng):
    net = tiny_net(rng)
    res = net.forward(FULL, rng.standard_normal((4, 4)))
    net.touch()
    with pytest.raises(StaleCacheError):
        net.backward(res.cache, res.p, res.z)


def test_update_isolation_example(rng):
    net = tiny_net(rng)
    before = {n: a.copy() for n, a in net.params.items()}
    p = PathCode((0, 1))
    res = net.forward(p, rng.standard_normal((4, 4)))
    sgd_step(net.params, net.backward(res.cache, res.p, res.z), SgdState(0.1))
    for name in ("block0.ind1.w", "block0.ind1.b", "block1.ind0.w", "block1.ind0.b",
                 "block0.bn.ind1.scale", "block1.bn.ind0.shift"):
        assert np.array_equal(net.params[name], before[name])
    assert not np.array_equal(net.params["block0.ind0.w"], before["block0.ind0.w"])


# ------------------------------------------------------------ BN calibrate ---

def test_calibrate_identical_samples(rng):
    net = SdrNet(NetConfig(4, L=1, g=2, stem_dim=0), rng)
    x = np.tile(rng.standard_normal(4), (6, 1))
    stats = bn_calibrate(net, FULL, x, 4)
    mean, var = stats["block0.shared"]
    np.testing.assert_allclose(mean, x[0] @ net.params["block0.shared.w"] + net.params["block0.shared.b"],
                               rtol=0, atol=1e-12)
    assert np.all(var <= 1e-20)
    res = net.forward(FULL, x, "eval", _registry(FULL, stats))
    assert np.all(np.isfinite(res.backbone))


def _registry(target, layers):
    reg = BnStats()
    reg.set(target, layers)
    return reg


def test_calibrate_deterministic_and_errors(rng):
    net = tiny_net(rng)
    x = rng.standard_normal((20, 4))
    a = bn_calibrate(net, PathCode((1, 0)), x, 8)
    b = bn_calibrate(net, PathCode((1, 0)), x, 8)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k][0], b[k][0]) and np.array_equal(a[k][1], b[k][1])
    with pytest.raises(ValueError):
        bn_calibrate(net, FULL, np.zeros((0, 4)))


def test_eval_after_single_batch_calibration_matches_train(rng):
    net = tiny_net(rng, stem=3)
    x = rng.standard_normal((16, 4))
    for target in [FULL] + all_paths(2, 2):
        reg = BnStats()
        bn_calibrate(net, target, x, 64, reg)
        tr = net.forward(target, x, "train")
        ev = net.forward(target, x, "eval", reg)
        for u, v in ((tr.backbone, ev.backbone), (tr.z, ev.z), (tr.p, ev.p)):
            assert np.abs(u - v).max() <= 1e-6


# ---------------------------------------------------------- persistence ---

def test_checkpoint_roundtrip(rng, tmp_path):
    net = tiny_net(rng, stem=3)
    reg = BnStats()
    bn_calibrate(net, PathCode((1, 1)), rng.standard_normal((10, 4)), 4, reg)
    ck = net.to_checkpoint({"note": "x"}, reg)
    ck.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(tmp_path / "a.ckpt")
    back = SdrNet.from_checkpoint(loaded)
    assert back.config == net.config
    for n in net.params:
        assert np.array_equal(back.params[n], net.params[n])
    reg2 = BnStats.from_tensors(loaded.tensors)
    assert reg2.keys() == reg.keys()
    assert back.to_checkpoint({"note": "x"}, reg2).to_bytes() == ck.to_bytes()
