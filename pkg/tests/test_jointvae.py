import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoigen.errors import InvalidInput, InvalidLength, ShapeMismatch
from hoigen.jointvae import JointVAE, JointVAEConfig, joint_decode, joint_encode, jointvae_loss
from hoigen.layers import kl_standard_normal, reparameterize

from helpers import finite_difference_error


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return JointVAE(JointVAEConfig(latent_dim=8, hidden=32, depth=1, text_dim=4, obj_dim=4)).eval()


def _feats():
    return torch.linspace(-1, 1, 4), torch.linspace(1, -1, 4)


def test_encode_shapes_and_determinism(model):
    obj, text = _feats()
    g = torch.linspace(0, 1, 20)
    a = joint_encode(model, g, obj, text)
    b = joint_encode(model, g, obj, text)
    assert a.mu.shape == a.logvar.shape == (8,)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.logvar, b.logvar)
    c = joint_encode(model, g.flip(0), obj, text)
    assert not torch.equal(a.mu, c.mu)


def test_encode_rejects_nan(model):
    obj, text = _feats()
    with pytest.raises(InvalidInput):
        joint_encode(model, torch.tensor([0.0, float("nan")]), obj, text)


@pytest.mark.parametrize("n", [1, 37, 150])
def test_decode_length_and_limits(model, n):
    obj, text = _feats()
    g = joint_decode(model, torch.randn(8) * 5, obj, text, n, (0.0, 0.2))
    assert g.shape == (n,)
    assert g.min() >= 0.0 and g.max() <= 0.2


@pytest.mark.parametrize("n", [0, 151])
def test_decode_length_out_of_range(model, n):
    obj, text = _feats()
    with pytest.raises(InvalidLength):
        joint_decode(model, torch.zeros(8), obj, text, n, (0.0, 1.0))


def test_loss_examples():
    g = torch.linspace(0, 1, 12)[None]
    zero, _ = jointvae_loss(g, g, torch.zeros(1, 5), torch.zeros(1, 5))
    assert zero.item() == 0.0
    _, parts = jointvae_loss(g, g, torch.ones(1, 5, dtype=torch.float64), torch.zeros(1, 5, dtype=torch.float64))
    assert abs(parts["kl"].item() - 2.5) < 1e-9
    _, parts = jointvae_loss(g, g + 0.1, torch.zeros(1, 5), torch.zeros(1, 5))
    assert parts["rec"].item() == pytest.approx(0.01 * 12, rel=1e-5)
    with pytest.raises(ShapeMismatch):
        jointvae_loss(g, g[:, :-1], torch.zeros(1, 5), torch.zeros(1, 5))


def test_loss_weighting():
    g = torch.zeros(1, 4)
    gh = torch.full((1, 4), 0.5)
    mu, lv = torch.full((1, 3), 0.3), torch.full((1, 3), -0.2)
    total, parts = jointvae_loss(g, gh, mu, lv, lambda_elbo=2.0, lambda_rec=3.0)
    assert total.item() == pytest.approx(2.0 * parts["elbo"].item() + 3.0 * parts["rec"].item())
    assert parts["recon_nll"].item() == pytest.approx(0.5 * parts["rec"].item())


_coord = st.floats(-3, 3).filter(lambda v: v == 0 or abs(v) > 1e-6)  # squares of subnormals underflow


@settings(max_examples=50)
@given(st.lists(_coord, min_size=1, max_size=6), st.lists(_coord, min_size=1, max_size=6))
def test_kl_is_non_negative_and_zero_only_at_standard_normal(mu, lv):
    n = min(len(mu), len(lv))
    mu, lv = torch.tensor(mu[:n], dtype=torch.float64), torch.tensor(lv[:n], dtype=torch.float64)
    kl = kl_standard_normal(mu, lv).item()
    assert kl >= -1e-12
    if torch.all(mu == 0) and torch.all(lv == 0):
        assert kl == 0.0
    elif kl == 0.0:
        pytest.fail("KL vanished away from the standard normal")


def test_reparameterization_moments():
    gen = torch.Generator().manual_seed(0)
    mu = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    lv = torch.tensor([0.0, -1.0, 0.7], dtype=torch.float64)
    z = reparameterize(mu.expand(10_000, 3), lv.expand(10_000, 3), gen)
    assert torch.all((z.mean(0) - mu).abs() <= 0.05 * torch.clamp(mu.abs(), min=1.0))
    assert torch.all((z.var(0) / lv.exp() - 1).abs() < 0.05)


def test_gradients_match_finite_differences():
    torch.manual_seed(1)
    cfg = JointVAEConfig(latent_dim=3, hidden=6, depth=1, max_frames=2, text_dim=2, obj_dim=2)
    m = JointVAE(cfg).double()
    g = torch.tensor([[0.2, 0.7]], dtype=torch.float64)
    obj = torch.tensor([[0.3, -0.1]], dtype=torch.float64)
    text = torch.tensor([[-0.5, 0.4]], dtype=torch.float64)

    def loss():
        gen = torch.Generator().manual_seed(7)
        gh, lat = m(g, obj, text, generator=gen)
        return jointvae_loss(g, gh, lat.mu, lat.logvar)[0]

    assert finite_difference_error(loss, list(m.parameters())) < 1e-3
