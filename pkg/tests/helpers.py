"""Shared test utilities: random rotations and a central-difference gradient check."""
import numpy as np
import torch


def random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def finite_difference_error(loss_fn, params, h: float = 1e-4) -> float:
    """Relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||) over all ``params``."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=analytic.dtype)
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def small_config_dict(root, frames: int = 8) -> dict:
    """Overrides for a seconds-scale run; ``root`` receives every artifact."""
    root = str(root)
    return {
        "seed": 1,
        "paths": {"dataset": f"{root}/data.bin", "joint_ckpt": f"{root}/joint.ckpt", "mani_ckpt": f"{root}/mani.ckpt",
                  "diffusion_ckpt": f"{root}/diff.ckpt", "log_dir": f"{root}/logs"},
        "data": {"families": ["bi-art"], "count": 2, "frames": frames, "object_points": 64},
        "jointvae": {"latent_dim": 4, "hidden": 16, "depth": 1, "text_dim": 8, "obj_dim": 8},
        "manivae": {"latent_dim": 8, "hidden": 16, "depth": 1, "text_dim": 8, "obj_dim": 8},
        "diffusion": {"latent_dim": 8, "text_dim": 8, "obj_dim": 8, "steps": 10,
                      "ssm": {"model_dim": 16, "state_dim": 4, "num_blocks": 1}},
        "train": {"vae_steps": 5, "diffusion_steps": 5, "diffusion_batch": 2},
        "sample": {"frames": frames},
        "ablate": {"vae_steps": 3, "diffusion_steps": 3, "sample_steps": 5, "conditions": 1,
                   "samples_per_condition": 2, "frames": frames, "scaling_lengths": [16, 32]},
    }


def small_config(root, frames: int = 8):
    from hoigen.config import load_config

    return load_config(overrides=small_config_dict(root, frames), environ={})
