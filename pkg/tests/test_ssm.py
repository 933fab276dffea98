import pytest
import torch
from hypothesis import given, settings, strategies as st

from hoigen.errors import InvalidConfig
from hoigen.ssm import (BACKBONES, MIN_LOG_A, Backbone, SelectiveScan, SSMConfig, backbone_forward, scan_chunked,
                        scan_sequential, ssm_step)

D = torch.float64


def _gates(gen, b, L, d, n, dtype=D):
    x = torch.randn(b, L, d, generator=gen, dtype=dtype)
    log_a = -torch.rand(b, L, d, generator=gen, dtype=dtype) * -MIN_LOG_A
    B = torch.randn(b, L, n, generator=gen, dtype=dtype)
    C = torch.randn(b, L, n, generator=gen, dtype=dtype)
    return x, log_a, B, C


def test_step_memoryless_when_A_is_zero():
    h_prev = torch.randn(3, 4)
    x, B, C = torch.randn(3), torch.randn(4), torch.randn(4)
    h, y = ssm_step(h_prev, x, torch.zeros(3), B, C)
    assert torch.equal(h, x[:, None] * B[None, :])
    assert torch.allclose(y, x * (B * C).sum())


def test_step_cumulative_sum_with_unit_gates():
    h = torch.zeros(1, 1)
    one = torch.ones(1)
    for t in range(1, 8):
        h, y = ssm_step(h, one, one, one, one)
        assert y.item() == t


def test_step_pure_decay_with_zero_input():
    h_prev = torch.randn(2, 5)
    A = torch.rand(2)
    h, _ = ssm_step(h_prev, torch.zeros(2), A, torch.randn(5), torch.randn(5))
    assert torch.equal(h, A[:, None] * h_prev)


def test_single_frame_scan_equals_one_step():
    gen = torch.Generator().manual_seed(0)
    x, log_a, B, C = _gates(gen, 1, 1, 3, 4)
    y, _ = scan_chunked(x, log_a, B, C, chunk=4)
    _, y1 = ssm_step(torch.zeros(1, 3, 4, dtype=D), x[:, 0], log_a[:, 0].exp(), B[:, 0], C[:, 0])
    assert torch.allclose(y[:, 0], y1, atol=1e-12)


def test_scan_matches_sequential_at_L17():
    gen = torch.Generator().manual_seed(1)
    args = _gates(gen, 2, 17, 5, 3, torch.float32)
    ys, hs = scan_sequential(*args)
    yc, hc = scan_chunked(*args, chunk=4)
    assert (ys - yc).abs().max() < 1e-5
    assert (hs - hc).abs().max() < 1e-5


@settings(max_examples=30, deadline=None)
@given(L=st.integers(1, 64), d=st.integers(1, 6), n=st.integers(1, 5), chunk=st.sampled_from([1, 3, 8, 16]),
       seed=st.integers(0, 2**31 - 1))
def test_scan_matches_sequential_property(L, d, n, chunk, seed):
    gen = torch.Generator().manual_seed(seed)
    args = _gates(gen, 1, L, d, n, torch.float32)
    ys, _ = scan_sequential(*args)
    yc, _ = scan_chunked(*args, chunk=chunk)
    scale = max(1.0, ys.abs().max().item())
    assert (ys - yc).abs().max() / scale < 1e-5


def test_causal_mode_is_exactly_causal():
    torch.manual_seed(0)
    model = Backbone(SSMConfig(model_dim=8, state_dim=4, num_blocks=2, causal=True, chunk=4)).double()
    x = torch.randn(1, 20, 8, dtype=D)
    y = model(x)
    for t in (0, 7, 13, 19):
        x2 = x.clone()
        x2[0, t] += torch.randn(8, dtype=D)
        y2 = model(x2)
        assert torch.equal(y[0, :t], y2[0, :t])
        assert not torch.equal(y[0, t:], y2[0, t:])


def test_bidirectional_default_sees_the_future():
    torch.manual_seed(0)
    model = Backbone(SSMConfig(model_dim=8, state_dim=4, num_blocks=1)).double()
    x = torch.randn(1, 10, 8, dtype=D)
    x2 = x.clone()
    x2[0, -1] += torch.randn(8, dtype=D)
    assert not torch.equal(model(x)[0, 0], model(x2)[0, 0])


def test_hidden_state_obeys_stability_bound():
    gen = torch.Generator().manual_seed(2)
    x, log_a, B, C = _gates(gen, 1, 200, 4, 3)
    A = log_a.exp()
    h = torch.zeros(1, 4, 3, dtype=D)
    drive = (x[..., :, None] * B[..., None, :]).norm(dim=-1)  # (1, L, d)
    bound = drive.amax(dim=1) / (1 - A.amax(dim=1))
    for t in range(200):
        h, _ = ssm_step(h, x[:, t], A[:, t], B[:, t], C[:, t])
        assert torch.all(h.norm(dim=-1) <= bound + 1e-12)


def test_gates_stay_in_unit_interval():
    torch.manual_seed(0)
    layer = SelectiveScan(16, 4)
    log_a, _, _ = layer.gates(torch.randn(2, 30, 16) * 100)
    A = log_a.exp()
    assert torch.all(A > 0) and torch.all(A < 1)
    assert torch.all(log_a >= MIN_LOG_A)


def test_module_chunked_equals_reference_path():
    torch.manual_seed(3)
    model = Backbone(SSMConfig(model_dim=16, state_dim=8, num_blocks=2)).double()
    x = torch.randn(2, 37, 16, dtype=D)
    assert (model(x) - model(x, reference=True)).abs().max() < 1e-10


@pytest.mark.parametrize("backbone", BACKBONES)
def test_zero_init_is_identity(backbone):
    model = Backbone(SSMConfig(model_dim=16, num_blocks=3, backbone=backbone)).zero_init()
    x = torch.randn(2, 12, 16)
    assert torch.equal(model(x), x)


def test_default_scale_ssm_shapes():
    torch.manual_seed(0)
    with torch.no_grad():
        out = backbone_forward(torch.randn(600, 128), SSMConfig())
    assert out.shape == (600, 128)
    assert torch.isfinite(out).all()


def test_backbones_share_interface_but_differ():
    x = torch.randn(1, 24, 16)
    outs = {}
    for name in ("gru", "ssm"):
        torch.manual_seed(0)
        outs[name] = backbone_forward(x, SSMConfig(model_dim=16, num_blocks=1, backbone=name))
        assert outs[name].shape == x.shape
    assert not torch.allclose(outs["gru"], outs["ssm"])


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        SSMConfig(backbone="lstm")
    with pytest.raises(InvalidConfig):
        SSMConfig(model_dim=0)
    with pytest.raises(InvalidConfig):
        SSMConfig(model_dim=10, heads=4, backbone="attention")


@pytest.mark.parametrize("backbone", BACKBONES)
def test_odd_lengths_and_batches(backbone):
    model = Backbone(SSMConfig(model_dim=8, state_dim=2, num_blocks=1, backbone=backbone, heads=2))
    for L in (1, 3, 17):
        assert model(torch.randn(3, L, 8)).shape == (3, L, 8)


def test_chunk_limit():
    with pytest.raises(InvalidConfig):
        SSMConfig(chunk=32)


def test_long_decay_chunk_stays_finite_in_float32():
    L, d = 64, 4
    x = torch.randn(1, L, d)
    log_a = torch.full((1, L, d), MIN_LOG_A)
    B, C = torch.randn(1, L, 2), torch.randn(1, L, 2)
    ys, _ = scan_sequential(x, log_a, B, C)
    yc, _ = scan_chunked(x, log_a, B, C, chunk=16)
    assert torch.isfinite(yc).all()
    assert (ys - yc).abs().max() < 1e-5
