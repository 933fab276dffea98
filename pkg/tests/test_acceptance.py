"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 and 9 train the default-size models and take several minutes on one CPU core.
"""
import itertools
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from hoigen.ablate import scaling_exponent, time_backbone
from hoigen.cli import main
from hoigen.config import RunConfig
from hoigen.core import flatten_sequence, matrix_to_rot6d, rot6d_to_matrix
from hoigen.data import Family, generate_dataset, load_sequence
from hoigen.diffusion import ancestral_sample, cosine_schedule, forward_noise
from hoigen.errors import DegenerateRotation
from hoigen.jointvae import JointVAE, JointVAEConfig, jointvae_loss
from hoigen.layers import kl_standard_normal
from hoigen.manivae import LossWeights, ManiVAE, ManiVAEConfig, dist_loss, manivae_loss, ro_loss
from hoigen.metrics import box_occupancy, diversity, interpenetration_depth, interpenetration_volume, jerk
from hoigen.metrics import pairwise_diversity
from hoigen.ssm import Backbone, SSMConfig, scan_chunked, scan_sequential
from hoigen.training import loss_ratio, smoothed, train_diffusion, train_jointvae, train_manivae

from helpers import finite_difference_error, random_rotation, small_config_dict
from test_manivae import _batch, _toy_hand

D = torch.float64


def test_criterion_01_rotation_suite(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        r = matrix_to_rot6d(random_rotation(rng)) * rng.uniform(0.5, 2.0)
        back = matrix_to_rot6d(rot6d_to_matrix(r))
        worst = max(worst, float(np.linalg.norm(rot6d_to_matrix(back) - rot6d_to_matrix(r))))
    raised = 0
    for bad in ([0, 0, 0, 0, 1, 0], [1, 0, 0, 0, 0, 0], [1, 0, 0, 2, 0, 0], [0, 1e-9, 0, 1, 0, 0]):
        try:
            rot6d_to_matrix(bad)
        except DegenerateRotation:
            raised += 1
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and raised == 4 and dt < 5
    record_criterion(1, "6D rotation round trips", ok, f"max Frobenius {worst:.2e}, degenerate raised {raised}/4, {dt:.2f}s")


def test_criterion_02_diffusion_formula_oracle(record_criterion):
    t0 = time.perf_counter()
    sched = cosine_schedule(1000)
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((16, 23))
    exact = all(np.array_equal(forward_noise(x0, t, np.zeros_like(x0), sched), np.sqrt(sched.alpha_bar[t]) * x0)
                for t in range(1, 1001))
    composed_err = 0.0
    x = x0.copy()
    for t in range(1, 1001):
        x = np.sqrt(sched.alphas[t]) * x
        composed_err = max(composed_err, float(np.abs(x - forward_noise(x0, t, np.zeros_like(x0), sched)).max()))
    x0t = torch.tensor(x0, dtype=D)[None]
    abar = torch.tensor(sched.alpha_bar, dtype=D)

    def replay(x_t, t):
        ab = abar[t].view(-1, 1, 1)
        return (x_t - ab.sqrt() * x0t) / (1 - ab).sqrt()

    out = ancestral_sample(replay, sched, x0t.shape, torch.Generator().manual_seed(0), deterministic=True, dtype=D)
    rmse = (out - x0t).pow(2).mean().sqrt().item()
    dt = time.perf_counter() - t0
    ok = exact and composed_err < 1e-5 and rmse < 1e-3 and dt < 30
    record_criterion(2, "diffusion formula oracle", ok,
                     f"eta=0 exact={exact}, composed err {composed_err:.1e}, reverse RMSE {rmse:.1e}, {dt:.1f}s")


def test_criterion_03_schedule(record_criterion):
    s = cosine_schedule(1000)
    ab = s.alpha_bar
    ok = ab[0] == 1.0 and bool(np.all(np.diff(ab) < 0)) and ab[1000] < 1e-3 and s.betas.max() <= 0.999
    record_criterion(3, "cosine schedule", ok, f"abar[1000]={ab[1000]:.2e}, max beta {s.betas.max():.4f}")


def test_criterion_04_ssm_oracle(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for case in range(100):
        L, d, n = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        chunk = int(rng.choice([1, 2, 4, 8, 16]))
        gen = torch.Generator().manual_seed(case)
        x = torch.randn(1, L, d, generator=gen, dtype=D)
        log_a = -4.0 * torch.rand(1, L, d, generator=gen, dtype=D)
        B, C = torch.randn(1, L, n, generator=gen, dtype=D), torch.randn(1, L, n, generator=gen, dtype=D)
        ys, _ = scan_sequential(x, log_a, B, C)
        yc, _ = scan_chunked(x, log_a, B, C, chunk=chunk)
        worst = max(worst, float((ys - yc).abs().max()))
    torch.manual_seed(0)
    model = Backbone(SSMConfig(model_dim=16, state_dim=4, num_blocks=2, causal=True)).eval()
    causal = True
    with torch.no_grad():
        x = torch.randn(1, 40, 16)
        y = model(x)
        for t in (0, 5, 16, 17, 39):
            x2 = x.clone()
            x2[0, t] += torch.randn(16)
            causal &= torch.equal(model(x2)[0, :t], y[0, :t])
    lengths = [256, 512, 1024, 2048]
    torch.set_num_threads(1)
    exps = {b: scaling_exponent(lengths, time_backbone(b, lengths, repeats=5)) for b in ("ssm", "attention")}
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and causal and exps["ssm"] < 1.3 and exps["attention"] > 1.6 and dt < 180
    record_criterion(4, "SSM scan oracle, causality, scaling", ok,
                     f"max err {worst:.1e}, causal exact={causal}, exponent ssm {exps['ssm']:.2f} "
                     f"attention {exps['attention']:.2f}, {dt:.1f}s")


def test_criterion_05_loss_gradients(record_criterion):
    t0 = time.perf_counter()
    errs = {}
    for comp in ("elbo", "mesh", "dist", "ro", "kl"):
        torch.manual_seed(5)
        hands = [_toy_hand("left"), _toy_hand("right")]
        m = ManiVAE(ManiVAEConfig(latent_dim=2, hidden=4, depth=1, text_dim=2, obj_dim=2)).double()
        b = _batch(np.random.default_rng(5), n=1, v_h=8, v_o=6)
        b.obj_feat, b.text_feat = b.obj_feat[:, :2], b.text_feat[:, :2]
        w = LossWeights(**{k: float(k == comp) for k in ("elbo", "mesh", "dist", "ro", "kl")})

        def loss():
            P_hat, lat = m(b, generator=torch.Generator().manual_seed(11))
            return manivae_loss(b, P_hat, lat, w, hands)[0]

        errs[comp] = finite_difference_error(loss, list(m.parameters()))
    torch.manual_seed(1)
    jm = JointVAE(JointVAEConfig(latent_dim=3, hidden=6, depth=1, max_frames=2, text_dim=2, obj_dim=2)).double()
    g = torch.tensor([[0.2, 0.7]], dtype=D)
    o, tx = torch.tensor([[0.3, -0.1]], dtype=D), torch.tensor([[-0.5, 0.4]], dtype=D)

    def jloss():
        gh, lat = jm(g, o, tx, generator=torch.Generator().manual_seed(7))
        return jointvae_loss(g, gh, lat.mu, lat.logvar)[0]

    errs["jointvae"] = finite_difference_error(jloss, list(jm.parameters()))
    dt = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-3 and dt < 120
    record_criterion(5, "finite-difference gradient checks", ok,
                     ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {dt:.1f}s")


def test_criterion_06_loss_analytics(record_criterion):
    d = 7
    kl = kl_standard_normal(torch.ones(d, dtype=D), torch.zeros(d, dtype=D)).item()
    kl_ok = abs(kl - 0.5 * d) < 1e-9
    rng = np.random.default_rng(6)
    gt = torch.tensor(rng.uniform(size=(1, 1, 4)), dtype=D)
    pred = torch.tensor(rng.uniform(size=(1, 1, 4)), dtype=D)
    mask_ok = True
    for bits in itertools.product([0.0, 1.0], repeat=4):
        mask = torch.tensor(bits, dtype=D).view(1, 1, 4)
        base = dist_loss(pred, gt, mask).item()
        for k in (k for k in range(4) if bits[k] == 0):
            p2 = pred.clone()
            p2[0, 0, k] = 1e3
            mask_ok &= dist_loss(p2, gt, mask).item() == base
    I = torch.eye(3, dtype=D)
    Rz = torch.tensor([[-1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0]], dtype=D)
    ro = ro_loss(torch.stack([I, I])[None], I[None], torch.stack([I, Rz])[None], I[None]).item()
    ro_ok = abs(ro - 8.0) < 1e-9
    p = np.zeros((12, 1, 3))
    p[:, 0, 0] = np.arange(12.0) ** 3
    jk = jerk(p)
    ok = kl_ok and mask_ok and ro_ok and jk == 6.0
    record_criterion(6, "loss and metric analytics", ok, f"KL {kl:.12f}, mask ok={mask_ok}, ro {ro:.12f}, jerk {jk}")


def test_criterion_07_metric_oracles(record_criterion):
    cube = lambda x: box_occupancy([x, 0, 0], [0.5] * 3)
    iv1 = interpenetration_volume(cube(0), cube(0), 0.05)
    iv5 = interpenetration_volume(cube(0), cube(0.5), 0.05)
    iv0 = interpenetration_volume(cube(0), cube(2), 0.05)
    depth = interpenetration_depth(np.zeros((1, 1, 3)), [[cube(0)]])
    a = np.random.default_rng(7).standard_normal(30)
    sd0 = diversity([[a, a.copy()]], "SD")
    s = [np.random.default_rng(k).standard_normal(30) for k in range(3)]
    brute = np.mean([np.linalg.norm(x - y) / np.sqrt(30) for x, y in itertools.combinations(s, 2)])
    div_err = abs(pairwise_diversity(s) - brute)
    ok = (abs(iv1 - 1) < 0.05 and abs(iv5 - 0.5) < 0.05 and iv0 == 0.0 and abs(depth - 0.5) < 1e-9 and sd0 == 0.0
          and div_err < 1e-9)
    record_criterion(7, "metric oracles", ok,
                     f"IV {iv1:.4f}/{iv5:.4f}/{iv0}, ID {depth}, SD {sd0}, diversity err {div_err:.1e}")


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    """Criterion-8 run with default model sizes; checkpoints are reused by criterion 9."""
    root = tmp_path_factory.mktemp("overfit")
    torch.set_num_threads(1)
    cfg = RunConfig()
    ds = generate_dataset([Family.BI_ART], 4, 0, 32)
    t0 = time.perf_counter()
    j = train_jointvae(cfg, ds, steps=2000, ckpt_path=root / "joint.ckpt")
    m = train_manivae(cfg, ds, steps=2000, ckpt_path=root / "mani.ckpt")
    d = train_diffusion(cfg, ds, j.model, m.model, steps=500, ckpt_path=root / "diff.ckpt")
    return root, j, m, d, time.perf_counter() - t0


def test_criterion_08_toy_overfit(overfit, record_criterion):
    _, j, m, d, dt = overfit
    jr, mr = loss_ratio(j.history), loss_ratio(m.history)
    s = smoothed([h["total"] for h in d.history], 50)
    ok = jr < 0.1 and mr < 0.1 and s[-1] < s[0] and dt < 15 * 60
    record_criterion(8, "toy overfit", ok, f"JointVAE ratio {jr:.2e}, ManiVAE ratio {mr:.2e}, "
                     f"diffusion smoothed {s[0]:.3f} -> {s[-1]:.3f}, {dt / 60:.1f} min")


def test_criterion_09_end_to_end(overfit, tmp_path, capsys, record_criterion):
    root = overfit[0]
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"paths": {"joint_ckpt": str(root / "joint.ckpt"), "mani_ckpt": str(root / "mani.ckpt"),
                                             "diffusion_ckpt": str(root / "diff.ckpt")}}))
    t0 = time.perf_counter()
    codes = [main(["sample", "--config", str(cfg), "--seed", str(s), "--frames", "150", "--type", "bimanual",
                   "--out", str(tmp_path / f"s{s}.seq")]) for s in (1, 2)]
    recs = [load_sequence(tmp_path / f"s{s}.seq") for s in (1, 2)]
    valid = True
    for r in recs:
        r.sequence.validate(r.obj.limits)
        valid &= r.sequence.N == 150 and r.hand_type.hands == ("left", "right") and r.obj.limits[1] > r.obj.limits[0]
        valid &= bool(np.isfinite(flatten_sequence(r.sequence)).all())
    capsys.readouterr()
    codes.append(main(["evaluate", "--config", str(cfg), str(tmp_path / "s1.seq"), str(tmp_path / "s2.seq"),
                       "--table", str(tmp_path / "t.csv")]))
    report = capsys.readouterr().out
    sd = float(report.split("SD = ")[1].split()[0])
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    dt = time.perf_counter() - t0
    ok = (codes == [0, 0, 0] and valid and sd > 0 and header == "IV_right,IV_left,ID_right,ID_left,Jerk,SD,OD"
          and dt < 300)
    record_criterion(9, "end-to-end sample + evaluate", ok, f"N=150 valid={valid}, SD {sd:.4g}, {dt:.0f}s")


def _write_small_cfg(root: Path) -> str:
    path = root / "cfg.yaml"
    path.write_text(yaml.safe_dump(small_config_dict(".")))
    return str(path)


def test_criterion_10_ablation_harness(tmp_path, monkeypatch, capsys, record_criterion):
    monkeypatch.chdir(tmp_path)
    cfg = _write_small_cfg(tmp_path)
    assert main(["generate", "--config", cfg]) == 0
    tables = []
    for k in range(2):
        assert main(["ablate", "--config", cfg, "--no-scaling", "--out", f"abl{k}"]) == 0
        tables.append((tmp_path / f"abl{k}" / "ablation.csv").read_text())
    capsys.readouterr()
    rows = [ln.split(",")[0] for ln in tables[0].splitlines()[1:]]
    ok = tables[0] == tables[1] and rows == ["GRU", "TemporalConv", "Transformer", "SSM"]
    record_criterion(10, "ablation harness", ok, f"rows {rows}, identical reruns={tables[0] == tables[1]}")


COMMANDS = [
    ["generate"],
    ["make-object", "--out", "obj.json"],
    ["train-vae", "--which", "joint"],
    ["train-vae", "--which", "mani"],
    ["train-diffusion"],
    ["sample", "--seed", "3", "--out", "a.seq"],
    ["sample", "--seed", "4", "--object", "obj.json", "--out", "b.seq"],
    ["evaluate", "a.seq", "b.seq", "--reference", "data.bin", "--metrics", "iv,id,jerk,od", "--out", "report.txt",
     "--table", "table.csv"],
    ["plot", "a.seq", "--out", "a.png"],
    ["ablate", "--no-scaling", "--out", "abl"],
]


def _run_all(root: Path, monkeypatch) -> dict:
    root.mkdir()
    monkeypatch.chdir(root)
    cfg = _write_small_cfg(root)
    for argv in COMMANDS:
        assert main([argv[0], "--config", cfg, *argv[1:]]) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_reproducibility(tmp_path, monkeypatch, capsys, record_criterion):
    a = _run_all(tmp_path / "a", monkeypatch)
    b = _run_all(tmp_path / "b", monkeypatch)
    capsys.readouterr()
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing and len(a) >= 12
    record_criterion(11, "byte-identical reruns", ok, f"{len(a)} artifacts compared, differing: {differing or 'none'}")
