import numpy as np
import pytest
import torch

from oracles import modulator_loop, spatial_gate_loop
from textcsp.cascade import (
    CascadeTopology,
    ChannelModulator,
    SoftCascade,
    modulate_channels,
    spatial_gate,
)
from textcsp.errors import ConfigError


def test_spatial_gate_saturated_low_is_identity():
    torch.manual_seed(0)
    F = torch.randn(2, 4, 3, 3, 3)
    A = torch.sigmoid(torch.full((2, 1, 3, 3, 3), -40.0))
    assert (spatial_gate(F, A) - F).abs().max() <= 1e-6


def test_spatial_gate_midpoint():
    F = torch.full((1, 2, 1, 1, 2), 2.0)
    A = torch.sigmoid(torch.tensor([0.0, -40.0]).view(1, 1, 1, 1, 2))
    out = spatial_gate(F, A)
    assert out[0, :, 0, 0, 0].tolist() == [3.0, 3.0]


def test_spatial_gate_loop_oracle():
    rng = np.random.default_rng(1)
    F = rng.normal(size=(2, 3, 2, 2, 2))
    A = 1 / (1 + np.exp(-rng.normal(size=(2, 1, 2, 2, 2))))
    out = spatial_gate(torch.tensor(F), torch.tensor(A)).numpy()
    assert np.abs(out - spatial_gate_loop(F, A)).max() <= 1e-7


def test_spatial_gate_multiplier_bounds():
    torch.manual_seed(2)
    A = torch.sigmoid(torch.randn(2, 1, 4, 4, 4) * 3)
    F = torch.ones(2, 5, 4, 4, 4)
    m = spatial_gate(F, A)
    assert (m > 1).all() and (m < 2).all()


def test_spatial_gate_shape_error():
    with pytest.raises(ValueError):
        spatial_gate(torch.zeros(1, 2, 3, 3, 3), torch.zeros(1, 1, 3, 3, 2))


def test_modulator_zero_params():
    mod = ChannelModulator(8, 8, 4)
    with torch.no_grad():
        for p in mod.parameters():
            p.zero_()
    G = modulate_channels(mod, torch.randn(3, 8))
    assert torch.equal(G, torch.full((3, 8), 0.5))


def test_modulator_zero_text_biases_zero():
    torch.manual_seed(3)
    mod = ChannelModulator(8, 8, 4)
    assert torch.equal(mod(torch.zeros(2, 8)), torch.full((2, 8), 0.5))


def test_modulator_default_dims():
    mod = ChannelModulator(768, 48, 4)
    assert mod.fc1.weight.shape == (12, 768)
    assert mod.fc2.weight.shape == (48, 12)
    with pytest.raises(ConfigError):
        ChannelModulator(8, 10, 4)


def test_modulator_loop_oracle_and_gradient():
    torch.manual_seed(4)
    mod = ChannelModulator(8, 8, 4).double()
    with torch.no_grad():
        mod.fc1.bias.normal_()
        mod.fc2.bias.normal_()
    t = torch.randn(2, 8, dtype=torch.float64)
    G = mod(t)
    ref = modulator_loop(*(x.detach().numpy() for x in (mod.fc1.weight, mod.fc1.bias, mod.fc2.weight, mod.fc2.bias)), t.numpy())
    assert np.abs(G.detach().numpy() - ref).max() <= 1e-7

    weights = torch.randn(2, 8, dtype=torch.float64)

    def f():
        return (mod(t) * weights).sum()

    mod.zero_grad()
    f().backward()
    analytic = mod.fc1.weight.grad.clone()
    h = 1e-6
    W = mod.fc1.weight
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            with torch.no_grad():
                W[i, j] += h
                up = f().item()
                W[i, j] -= 2 * h
                down = f().item()
                W[i, j] += h
            fd = (up - down) / (2 * h)
            assert abs(fd - analytic[i, j].item()) <= 1e-4 * max(abs(fd), 1e-6) + 1e-10


def _cascade(topology="full", C=8, d=6, modulators_on=True, seed=0):
    torch.manual_seed(seed)
    return SoftCascade(channels=C, d_text=d, reduction=4, topology=topology, modulators_on=modulators_on)


def _inputs(B=2, C=8, d=6, L=5, seed=1):
    g = torch.Generator().manual_seed(seed)
    F = torch.randn(B, C, 3, 3, 3, generator=g)
    T_TC = torch.randn(B, L, d, generator=g)
    T_ET = torch.randn(B, L, d, generator=g)
    mask = torch.ones(B, L, dtype=torch.long)
    mask[0, 3:] = 0
    return F, T_TC, T_ET, mask


def test_output_shapes_and_gate_consistency():
    casc = _cascade()
    F, T_TC, T_ET, mask = _inputs()
    out = casc(F, T_TC, T_ET, mask)
    for y in (out.y_WT, out.y_TC, out.y_ET, out.A_WT, out.A_TC):
        assert y.shape == (2, 1, 3, 3, 3)
    assert out.G_TC.shape == out.G_ET.shape == (2, 8)
    assert torch.equal(out.A_WT, torch.sigmoid(out.y_WT))
    assert torch.equal(out.A_TC, torch.sigmoid(out.y_TC))
    for g in (out.A_WT, out.A_TC, out.G_TC, out.G_ET):
        assert ((g > 0) & (g < 1)).all()


def test_identity_gates_reduce_to_plain_heads():
    casc = _cascade()
    with torch.no_grad():
        casc.head_WT.bias.fill_(-40.0)
        casc.head_WT.weight.zero_()
        casc.head_TC.bias.sub_(40.0)
    F, T_TC, T_ET, mask = _inputs()
    casc.gates = lambda t_tc, t_et: (torch.ones(2, 8), torch.ones(2, 8))
    out = casc(F, T_TC, T_ET, mask)
    assert (out.y_TC - casc.head_TC(F)).abs().max() <= 1e-5


def test_parallel_vs_full_with_saturated_priors():
    full, par = _cascade("full"), _cascade("parallel")
    par.load_state_dict(full.state_dict())
    for casc in (full, par):
        with torch.no_grad():
            casc.head_WT.weight.zero_()
            casc.head_WT.bias.fill_(-40.0)
    F, T_TC, T_ET, mask = _inputs()
    a, b = full(F, T_TC, T_ET, mask), par(F, T_TC, T_ET, mask)
    assert (a.y_TC - b.y_TC).abs().max() <= 1e-4
    # the ET branch gates on A_TC in the full topology, so saturate that head too
    for casc in (full, par):
        with torch.no_grad():
            casc.head_TC.weight.zero_()
            casc.head_TC.bias.fill_(-40.0)
    a, b = full(F, T_TC, T_ET, mask), par(F, T_TC, T_ET, mask)
    assert (a.y_ET - b.y_ET).abs().max() <= 1e-4


def test_wt_branch_is_text_independent():
    casc = _cascade()
    F, T_TC, T_ET, mask = _inputs()
    a = casc(F, T_TC, T_ET, mask)
    b = casc(F, T_TC + 5 * torch.randn_like(T_TC), T_ET - 3, mask)
    assert torch.equal(a.y_WT, b.y_WT)


def test_branch_routing_full():
    casc = _cascade("full")
    F, T_TC, T_ET, mask = _inputs()
    a = casc(F, T_TC, T_ET, mask)
    b = casc(F, T_TC, T_ET + torch.randn_like(T_ET), mask)
    assert torch.equal(a.y_TC, b.y_TC)
    assert not torch.equal(a.y_ET, b.y_ET)


def test_partial_topology_gates_et_on_wt():
    casc = _cascade("partial")
    F, T_TC, T_ET, mask = _inputs()
    out = casc(F, T_TC, T_ET, mask)
    expected = casc.head_ET(spatial_gate(F, out.A_WT) * out.G_ET[:, :, None, None, None])
    assert torch.allclose(out.y_ET, expected)


def test_modulators_off():
    casc = _cascade(modulators_on=False)
    F, T_TC, T_ET, mask = _inputs()
    out = casc(F, T_TC, T_ET, mask)
    assert out.G_TC is None and out.G_ET is None
    assert torch.allclose(out.y_TC, casc.head_TC(spatial_gate(F, out.A_WT)))


def test_unknown_topology():
    with pytest.raises(ConfigError):
        CascadeTopology.parse("diagonal")
    with pytest.raises(ConfigError):
        SoftCascade(topology="diagonal")


def test_channel_mismatch():
    casc = _cascade(C=8)
    F, T_TC, T_ET, mask = _inputs(C=4)
    with pytest.raises(ConfigError):
        casc(F, T_TC, T_ET, mask)


@pytest.mark.parametrize("topology", ["parallel", "partial", "full"])
def test_whole_cascade_gradcheck(topology):
    casc = _cascade(topology).double()
    F, T_TC, T_ET, mask = (x.double() if x.is_floating_point() else x for x in _inputs())
    F = F[..., :2, :2, :2].contiguous()
    params = dict(casc.named_parameters())

    def f():
        out = casc(F, T_TC, T_ET, mask)
        return (out.y_WT.sin().sum() + (out.y_TC ** 2).sum() + out.y_ET.tanh().sum())

    casc.zero_grad()
    f().backward()
    h = 1e-6
    for name, p in params.items():
        flat = p.data.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 6)):
            old = flat[idx].item()
            flat[idx] = old + h
            up = f().item()
            flat[idx] = old - h
            down = f().item()
            flat[idx] = old
            fd = (up - down) / (2 * h)
            an = p.grad.view(-1)[idx].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6), name
