import pytest

from sdr.numerics import make_rng
from sdr.sdrnet import NetConfig, SdrNet


@pytest.fixture
def rng():
    return make_rng(1234)


def randomize(net, rng, bias=0.5):
    """Random biases / BN affine so no unit is exactly dead at a check point."""
    for name, arr in net.params.items():
        if name.endswith((".b", ".shift")):
            arr[...] = rng.uniform(-bias, bias, arr.shape)
        elif name.endswith(".scale"):
            arr[...] = rng.uniform(0.5, 1.5, arr.shape)
    net.touch()
    return net


def tiny_net(rng, g=2, L=2, input_dim=4, cs=2, ci=2, stem=0, head_bn=True):
    cfg = NetConfig(input_dim=input_dim, L=L, g=g, shared_width=cs, individual_width=ci,
                    proj_dims=(4, 3), pred_dims=(4, 3), stem_dim=stem, head_bn=head_bn)
    return randomize(SdrNet(cfg, rng), rng)
