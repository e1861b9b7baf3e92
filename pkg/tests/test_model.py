import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgforge import nn
from ecgforge.model import (
    EcgNetConfig,
    StructuralError,
    build_network,
    load_network,
    save_network,
    shape_chain,
    swap_head,
)

CHAIN_3600 = [(3473, 1735), (1672, 835), (804, 401), (386, 192), (185, 91), (88, 43), (42, 20)]


def count_by_formula(kernels, channels, width, outputs):
    # conv weight + bias, then batchnorm gamma + beta, then the head
    total, in_ch = 0, 1
    for k, c in zip(kernels, channels):
        total += c * in_ch * k + c + 2 * c
        in_ch = c
    return total + width * outputs + outputs


def test_shape_chain_3600():
    assert shape_chain(EcgNetConfig()) == CHAIN_3600
    assert shape_chain(EcgNetConfig(), 3600)[0][1] == 1735


def test_shape_chain_geometry_error_names_stage():
    with pytest.raises(nn.GeometryError, match="stage 1"):
        shape_chain(EcgNetConfig(), 128)


def test_ladders():
    cfg = EcgNetConfig()
    assert cfg.kernel_sizes == [128, 64, 32, 16, 8, 4, 2]
    assert cfg.channels == [16, 32, 64, 128, 128, 128, 128]


def test_output_dims_and_flatten_width():
    x = nn.Tensor(np.zeros((1, 1, 3600)))
    reg = build_network().eval()
    cls = build_network(EcgNetConfig(head="classification")).eval()
    assert reg.flat_features == 2560
    with nn.no_grad():
        assert reg(x).shape == (1, 100)
        assert cls(x).shape == (1, 17)
        assert reg.flatten(reg.trunk(x)).shape == (1, 2560)


def test_parameter_count_pinned():
    cfg = EcgNetConfig()
    expected = count_by_formula(cfg.kernel_sizes, cfg.channels, 1000, 100)
    assert expected == 562772
    assert build_network(cfg).n_parameters() == expected
    cls = EcgNetConfig(head="classification")
    assert build_network(cls).n_parameters() == count_by_formula(cls.kernel_sizes, cls.channels, 1000, 17)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_finite_at_init(seed):
    x = np.random.default_rng(seed).uniform(-1, 1, size=(2, 1, 3600))
    net = build_network(rng=seed)
    with nn.no_grad():
        assert np.all(np.isfinite(net(nn.Tensor(x)).data))


def test_swap_head_preserves_trunk():
    net = build_network(rng=3)
    with nn.no_grad():
        net(nn.Tensor(np.random.default_rng(0).normal(size=(4, 1, 3600))))  # move running stats
    before = net.trunk_bytes()
    old_head = net.head[0].weight.data.copy()
    swap_head(net, "classification", rng=5)
    assert net.trunk_bytes() == before
    assert net.head[0].weight.shape == (17, 1000)
    with nn.no_grad():
        assert net.eval()(nn.Tensor(np.zeros((1, 1, 3600)))).shape == (1, 17)
    swap_head(net, "regression", rng=5)
    assert net.head[0].weight.shape == (100, 1000)
    assert not np.array_equal(net.head[0].weight.data, old_head)
    assert net.trunk_bytes() == before


def test_swap_head_rejects_foreign_network():
    with pytest.raises(StructuralError):
        swap_head(nn.Sequential(nn.Linear(3, 2)), "classification")


def test_swap_head_fresh_kaiming_head():
    net = build_network(rng=1)
    swap_head(net, "classification", rng=9)
    w = net.head[0].weight.data
    assert np.all(net.head[0].bias.data == 0)
    assert abs(w.std() / np.sqrt(2 / 1000) - 1) < 0.05


def test_residual_and_three_layer_head():
    cfg = EcgNetConfig(head="classification", n_head_layers=3, residual_to_head=True)
    net = build_network(cfg).eval()
    assert len(net.head) == 5
    x = nn.Tensor(np.random.default_rng(0).uniform(-1, 1, (2, 1, 3600)))
    with nn.no_grad():
        out = net(x).data
        plain = build_network(EcgNetConfig(head="classification", n_head_layers=3)).eval()
        assert not np.allclose(out, plain(x).data)
    assert out.shape == (2, 17)


def test_small_variant_geometry():
    cfg = EcgNetConfig(n_conv_layers=3, first_channels=8, first_kernel=64, pool_size=3,
                       batchnorm=False, adaptive_output_length=3000)
    net = build_network(cfg).eval()
    assert not any("bn" in name for name, _ in net.named_parameters())
    with nn.no_grad():
        assert net(nn.Tensor(np.zeros((1, 1, 3600)))).shape == (1, 100)


def test_save_load_roundtrip(tmp_path):
    cfg = EcgNetConfig(head="classification")
    net = build_network(cfg, rng=4)
    with nn.no_grad():
        net(nn.Tensor(np.random.default_rng(1).normal(size=(3, 1, 3600))))
    path = tmp_path / "net.ecgf"
    save_network(net, path)
    again = load_network(path)
    assert again.config == cfg
    assert again.trunk_bytes() == net.trunk_bytes()
    x = nn.Tensor(np.random.default_rng(2).normal(size=(2, 1, 3600)))
    with nn.no_grad():
        np.testing.assert_array_equal(net.eval()(x).data, again.eval()(x).data)
