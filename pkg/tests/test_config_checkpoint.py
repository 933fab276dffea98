import json

import pytest
import torch

from hoigen import checkpoint
from hoigen.config import RunConfig, env_overrides, from_dict, load_config, save_config, to_dict
from hoigen.errors import ConfigError, DependencyError, ParseError


def test_defaults_round_trip_through_dict():
    cfg = RunConfig()
    assert from_dict(to_dict(cfg)) == cfg
    assert cfg.diffusion.ssm.num_blocks == 8
    assert cfg.loss_weights.kl == 0.0


def test_precedence_file_env_override(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\ntrain:\n  vae_steps: 11\n  vae_lr: 0.01\n")
    env = {"HOIGEN_TRAIN__VAE_STEPS": "22", "HOIGEN_SAMPLE__INSTRUCTION": "lift the crate", "OTHER": "x"}
    cfg = load_config(path, {"train": {"vae_lr": 0.5}}, environ=env)
    assert cfg.seed == 3
    assert cfg.train.vae_steps == 22
    assert cfg.train.vae_lr == 0.5
    assert cfg.sample.instruction == "lift the crate"
    assert cfg.train.diffusion_steps == RunConfig().train.diffusion_steps


def test_json_config_and_save_round_trip(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"diffusion": {"ssm": {"backbone": "gru"}}}))
    cfg = load_config(p, environ={})
    assert cfg.diffusion.ssm.backbone == "gru"
    out = tmp_path / "saved.yaml"
    save_config(cfg, out)
    assert load_config(out, environ={}) == cfg


@pytest.mark.parametrize("text", ["sed: 1\n", "train:\n  vae_stepz: 1\n", "train: [1, 2]\n", "seed: abc\n",
                                  "diffusion:\n  ssm:\n    backbone: lstm\n", "- 1\n", "a: [\n"])
def test_bad_configs_raise_config_error(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p, environ={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml", environ={})


def test_unknown_env_key_is_rejected():
    with pytest.raises(ConfigError):
        load_config(environ={"HOIGEN_TRAIN__NOPE": "1"})
    assert env_overrides({"HOIGEN_SEED": "5"}) == {"seed": 5}


def _model():
    torch.manual_seed(0)
    return torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Linear(4, 2))


def test_checkpoint_round_trip_with_optimizer(tmp_path):
    m = _model()
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    m(torch.randn(5, 3)).sum().backward()
    opt.step()
    digest = checkpoint.save(tmp_path / "a.ckpt", m, {"kind": "test", "step": 1}, opt)
    assert digest == checkpoint.file_hash(tmp_path / "a.ckpt")
    state, meta, optim = checkpoint.load(tmp_path / "a.ckpt")
    assert meta["kind"] == "test" and meta["step"] == 1
    for k, v in m.state_dict().items():
        assert torch.equal(state[k], v)
    m2 = _model()
    m2.load_state_dict(state)
    opt2 = torch.optim.Adam(m2.parameters(), lr=1e-3)
    checkpoint.load_optimizer(opt2, optim, meta["optimizer"])
    a, b = opt.state_dict()["state"], opt2.state_dict()["state"]
    assert a.keys() == b.keys()
    for pid in a:
        for key in a[pid]:
            assert torch.equal(torch.as_tensor(a[pid][key]), torch.as_tensor(b[pid][key]))


def test_checkpoint_bytes_are_deterministic(tmp_path):
    h1 = checkpoint.save(tmp_path / "a.ckpt", _model(), {"b": 1, "a": [1, 2]})
    h2 = checkpoint.save(tmp_path / "b.ckpt", _model(), {"a": [1, 2], "b": 1})
    assert h1 == h2


def test_checkpoint_dtypes_preserved():
    tensors = {"f": torch.randn(2, 3), "d": torch.randn(4, dtype=torch.float64), "i": torch.arange(5),
               "s": torch.tensor(2.5)}
    back, meta = checkpoint.from_bytes(checkpoint.to_bytes(tensors, {"x": 1}))
    assert meta == {"x": 1}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)


def test_checkpoint_errors(tmp_path):
    data = checkpoint.to_bytes({"w": torch.ones(3)}, {})
    with pytest.raises(ParseError):
        checkpoint.from_bytes(b"X" * 8 + data[8:])
    with pytest.raises(ParseError):
        checkpoint.from_bytes(data[:-2])
    with pytest.raises(DependencyError):
        checkpoint.load(tmp_path / "missing.ckpt")
