"""Static trajectory figures (Agg backend, fixed metadata so output bytes are reproducible)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import SequenceRecord  # noqa: E402
from .geometry import articulate_object, default_hand_model, distance_field, hand_fk  # noqa: E402

COLORS = {"left": "tab:blue", "right": "tab:red"}


def plot_series(rec: SequenceRecord) -> dict:
    """Arrays behind the figure: mean hand-point tracks, joint angle, per-frame distance minima."""
    models = {s: default_hand_model(s) for s in ("left", "right")}
    seq = rec.sequence
    tracks, dmin = {}, {}
    for side in rec.hand_type.hands:
        pts = [hand_fk(h.pose(side), h.trans(side), models[side]) for h in seq.hands]
        tracks[side] = np.stack([p.mean(0) for p in pts])
        dmin[side] = np.array([distance_field(p, articulate_object(rec.obj, o)).min()
                               for p, o in zip(pts, seq.objects)])
    gamma = np.array([o.joint_angle for o in seq.objects])
    return {"tracks": tracks, "gamma": gamma, "dist_min": dmin}


def plot_sequence(rec: SequenceRecord, out) -> Path:
    series = plot_series(rec)
    frames = np.arange(rec.sequence.N)
    fig, axes = plt.subplots(2, 2, figsize=(9, 7), dpi=100)
    for side, tr in series["tracks"].items():
        axes[0, 0].plot(tr[:, 0], tr[:, 1], color=COLORS[side], label=side)
        axes[0, 1].plot(tr[:, 0], tr[:, 2], color=COLORS[side], label=side)
        axes[1, 1].plot(frames, series["dist_min"][side] * 100.0, color=COLORS[side], label=side)
    axes[0, 0].set(title="hand points, top view", xlabel="x [m]", ylabel="y [m]")
    axes[0, 1].set(title="hand points, side view", xlabel="x [m]", ylabel="z [m]")
    axes[1, 0].plot(frames, series["gamma"], color="k")
    axes[1, 0].set(title="joint angle", xlabel="frame", ylabel="rad")
    axes[1, 1].set(title="min hand-object distance", xlabel="frame", ylabel="cm")
    for ax in (axes[0, 0], axes[0, 1], axes[1, 1]):
        ax.legend(loc="best")
    fig.suptitle(rec.instruction)
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png", metadata={"Software": None})
    plt.close(fig)
    return out
