import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from imudiff.errors import ConfigError, DomainError
from imudiff.network import (
    AttentionBlock,
    DenoiserModel,
    UNetConfig,
    gradient,
    parameter_count,
    shape_size,
    time_embedding,
)
from imudiff.train import smooth_l1

SMALL = UNetConfig(base_channels=8, attention_heads=2, norm_groups=4, embedding_dim=16)


def test_time_embedding_t0():
    e = time_embedding(0).numpy()
    assert e.shape == (128,)
    assert not e[:64].any() and np.all(e[64:] == 1)


def test_time_embedding_component0_is_sin():
    for t in (1, 17, 2999):
        assert time_embedding(t)[0].item() == np.sin(t)


def test_time_embedding_injective_and_bounded():
    e = time_embedding(np.arange(3000)).numpy()
    assert np.all(np.abs(e) <= 1)
    sq = (e ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * e @ e.T
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 1e-6


def test_config_validation():
    with pytest.raises(ConfigError):
        UNetConfig(base_channels=30)
    with pytest.raises(ConfigError):
        UNetConfig(kernel=4)


def test_shape_preserving_and_frame_axis():
    m = DenoiserModel(SMALL, T=10)
    x = torch.randn(2, 12, 12, 80)
    seen = {}
    m.down.register_forward_hook(lambda mod, i, o: seen.__setitem__("down", o.shape))
    m.downsample.register_forward_hook(lambda mod, i, o: seen.__setitem__("downsample", o.shape))
    m.upsample.register_forward_hook(lambda mod, i, o: seen.__setitem__("up", o.shape))
    assert m(x, torch.tensor([0, 9])).shape == x.shape
    assert seen["downsample"][-1] == 40 and seen["up"][-1] == 80 and seen["down"][-1] == 80


def test_rejects_bad_input():
    m = DenoiserModel(SMALL, T=10)
    with pytest.raises(DomainError):
        m(torch.randn(1, 11, 12, 80), 0)
    with pytest.raises(DomainError):
        m(torch.randn(1, 12, 12, 80), 10)


def test_deterministic_and_t_sensitive():
    torch.manual_seed(0)
    m = DenoiserModel(SMALL, T=100, seed=1)
    m.reset_parameters(seed=1, zero_output=False)
    x = torch.randn(1, 12, 12, 80)
    a, b = m(x, 5), m(x, 5)
    assert torch.equal(a, b)
    assert (m(x, 6) - a).abs().max() > 0


def test_same_seed_same_weights():
    a = DenoiserModel(SMALL, seed=4).flat_parameters()
    b = DenoiserModel(SMALL, seed=4).flat_parameters()
    assert torch.equal(a, b)
    assert not torch.equal(a, DenoiserModel(SMALL, seed=5).flat_parameters())


@given(st.integers(0, 1000))
def test_attention_rows_are_convex(seed):
    torch.manual_seed(seed)
    blk = AttentionBlock(8, SMALL)
    w = blk.attention_weights(torch.randn(2, 8, 3, 10))
    assert torch.all(w >= 0)
    torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6, rtol=0)


def test_parameter_count():
    base = parameter_count()
    assert base == parameter_count()
    m = DenoiserModel()
    assert base == sum(p.numel() for p in m.parameters())
    # enumerate shapes layer by layer
    total = 0
    for mod in m.modules():
        for name, p in mod.named_parameters(recurse=False):
            total += shape_size(tuple(p.shape))
    assert base == total
    assert parameter_count(UNetConfig(base_channels=64)) > 2 * base


def test_flat_round_trip():
    m = DenoiserModel(SMALL)
    flat = torch.randn_like(m.flat_parameters())
    m.load_flat(flat)
    assert torch.equal(m.flat_parameters(), flat)


def test_output_bias_gradient_linear_head():
    m = DenoiserModel(SMALL, T=10).double()
    x = torch.randn(2, 12, 12, 80, dtype=torch.float64)
    g = gradient(m, lambda out, _: out.mean(), (x, torch.tensor([1, 2]), None))
    idx = m.parameter_index()
    _, off = idx["out.bias"]
    size = 2 * 12 * 80  # elements per output channel over the batch
    np.testing.assert_allclose(g[off:off + 12].numpy(), size / x.numel(), rtol=1e-12)


def test_masked_path_gradient_is_zero():
    m = DenoiserModel(SMALL, T=10).double()
    x = torch.randn(1, 12, 12, 80, dtype=torch.float64)
    # zero output weights cut every path behind the head, except the head itself
    g = gradient(m, lambda out, tgt: smooth_l1(out, tgt), (x, torch.tensor([3]), torch.randn_like(x)))
    idx = m.parameter_index()
    shape, off = idx["inp.weight"]
    assert not g[off:off + shape_size(shape)].any()
    shape, off = idx["out.weight"]
    assert g[off:off + shape_size(shape)].abs().sum() > 0


def test_finite_differences_small():
    torch.manual_seed(0)
    m = DenoiserModel(SMALL, T=50, seed=2).double()
    m.reset_parameters(seed=2, zero_output=False)
    m.double()
    x = torch.randn(2, 12, 12, 80, dtype=torch.float64)
    t = torch.tensor([3, 41])
    target = torch.randn_like(x)

    def loss_fn(out, tgt):
        return smooth_l1(out, tgt)

    g = gradient(m, loss_fn, (x, t, target))
    flat = m.flat_parameters().clone()
    rng = np.random.default_rng(0)
    h = 1e-5
    for i in rng.choice(len(flat), 20, replace=False):
        vals = []
        for d in (h, -h):
            f = flat.clone()
            f[i] += d
            m.load_flat(f)
            with torch.no_grad():
                vals.append(loss_fn(m(x, t), target).item())
        fd = (vals[0] - vals[1]) / (2 * h)
        assert abs(fd - g[i].item()) <= 1e-4 * max(abs(fd), abs(g[i].item()), 1e-6)
    m.load_flat(flat)
