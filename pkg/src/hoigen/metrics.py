"""Evaluation metrics: interpenetration volume/depth, jerk, sample and overall diversity.

Geometry is in meters internally; :func:`evaluate_sequences` reports IV in cm^3 and ID in cm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import flatten_sequence
from .errors import InsufficientFrames, InsufficientSamples, InvalidGeometry, InvalidInput, ShapeMismatch
from .geometry import OrientedBox, SkeletalHandModel, default_hand_model, hand_fk, object_boxes

M3_TO_CM3 = 1e6
M_TO_CM = 1e2
TABLE_COLUMNS = ("IV_right", "IV_left", "ID_right", "ID_left", "Jerk", "SD", "OD")


class Occupancy(Protocol):
    def bounds(self) -> tuple[np.ndarray, np.ndarray]: ...

    def contains(self, points: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class BallsOccupancy:
    """Union of equal-radius balls around sample points."""

    centers: np.ndarray
    radius: float

    def bounds(self):
        c = np.asarray(self.centers, dtype=np.float64)
        return c.min(0) - self.radius, c.max(0) + self.radius

    def contains(self, points):
        d, _ = cKDTree(self.centers).query(points, k=1)
        return d < self.radius


@dataclass(frozen=True)
class UnionOccupancy:
    parts: tuple

    def bounds(self):
        lo, hi = zip(*(p.bounds() for p in self.parts))
        return np.min(lo, axis=0), np.max(hi, axis=0)

    def contains(self, points):
        inside = np.zeros(len(points), dtype=bool)
        for p in self.parts:
            inside |= p.contains(points)
        return inside


def box_occupancy(center, half_extents, rotation=None) -> OrientedBox:
    return OrientedBox(np.asarray(center, dtype=np.float64),
                       np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64),
                       np.asarray(half_extents, dtype=np.float64))


def interpenetration_volume(a: Occupancy, b: Occupancy, voxel_size: float) -> float:
    """Voxelised overlap volume, in the geometry's units cubed.

    Voxel centres on a grid anchored at the lower corner of the bounding-box
    intersection are tested against both occupancies.
    """
    if not voxel_size > 0:
        raise InvalidGeometry("voxel_size must be positive")
    lo_a, hi_a = a.bounds()
    lo_b, hi_b = b.bounds()
    for v in (lo_a, hi_a, lo_b, hi_b):
        if not np.all(np.isfinite(v)):
            raise InvalidGeometry("occupancy bounds are not finite")
    lo, hi = np.maximum(lo_a, lo_b), np.minimum(hi_a, hi_b)
    if np.any(hi <= lo):
        return 0.0
    counts = np.maximum(np.round((hi - lo) / voxel_size).astype(int), 1)
    axes = [lo[k] + (np.arange(counts[k]) + 0.5) * voxel_size for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = b.contains(grid)
    if inside.any():
        inside[inside] = a.contains(grid[inside])
    return float(inside.sum()) * voxel_size ** 3


def interpenetration_depth(hand_points, boxes_per_frame: Sequence[Sequence[OrientedBox]]) -> float:
    """Largest distance-to-nearest-face over all hand points inside any box, over all frames.

    ``hand_points``: (N, V, 3); ``boxes_per_frame[i]`` are the object part proxies at frame i.
    """
    pts = np.asarray(hand_points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    if len(boxes_per_frame) != pts.shape[0]:
        raise ShapeMismatch("one box list per frame is required")
    depth = 0.0
    for frame, boxes in zip(pts, boxes_per_frame):
        for box in boxes:
            depth = max(depth, float(box.penetration_depth(frame).max(initial=0.0)))
    return depth


def jerk(trajectories, dt: float = 1.0) -> float:
    """Mean norm of the third forward difference / dt^3 over frames and points. (N, V, 3) input."""
    p = np.asarray(trajectories, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, None, :]
    if p.shape[0] < 4:
        raise InsufficientFrames(f"jerk needs >= 4 frames, got {p.shape[0]}")
    d3 = np.diff(p, n=3, axis=0) / dt ** 3
    return float(np.linalg.norm(d3, axis=-1).mean())


def _stack_samples(samples) -> np.ndarray:
    arrs = [np.asarray(s, dtype=np.float64).reshape(-1) for s in samples]
    if len(arrs) < 2:
        raise InsufficientSamples(f"diversity needs >= 2 samples, got {len(arrs)}")
    if len({a.shape for a in arrs}) != 1:
        raise ShapeMismatch("samples have different sizes (mixed frame counts?)")
    return np.stack(arrs)


def pairwise_diversity(samples) -> float:
    """Mean over unordered pairs of ``||a - b||_2 / sqrt(dim)``."""
    X = _stack_samples(samples)
    diff = X[:, None, :] - X[None, :, :]
    d = np.linalg.norm(diff, axis=-1) / np.sqrt(X.shape[1])
    iu = np.triu_indices(len(X), k=1)
    return float(d[iu].mean())


def diversity(samples, mode: str = "OD") -> float:
    """``OD``: pairwise diversity of a pooled list. ``SD``: mean of per-condition values
    over a list of groups (groups with < 2 samples are skipped)."""
    if mode == "OD":
        return pairwise_diversity(samples)
    if mode == "SD":
        vals = [pairwise_diversity(g) for g in samples if len(g) >= 2]
        if not vals:
            raise InsufficientSamples("sample diversity needs a condition with >= 2 samples")
        return float(np.mean(vals))
    raise ValueError(f"unknown diversity mode {mode!r}")


@dataclass
class MetricReport:
    iv_right: float
    iv_left: float
    id_right: float
    id_left: float
    jerk: float
    sd: float | None
    od: float | None
    od_real: float | None = None
    dt: float = 1.0 / 30.0
    voxel_size: float = 0.0
    hand_radius: float = 0.0
    num_sequences: int = 0
    per_frame_iv: dict = field(default_factory=dict)

    def row(self) -> tuple:
        return (self.iv_right, self.iv_left, self.id_right, self.id_left, self.jerk, self.sd, self.od)

    def to_text(self) -> str:
        fmt = lambda v: "nan" if v is None else f"{v:.6f}"
        lines = [
            "# hoigen metric report",
            "# units: IV cm^3, ID cm, Jerk cm/frame^3 (divide by dt^3 for cm/s^3)",
            f"dt = {self.dt:.10g}",
            f"voxel_size_m = {self.voxel_size:.10g}",
            f"hand_radius_m = {self.hand_radius:.10g}",
            f"num_sequences = {self.num_sequences}",
        ]
        lines += [f"{name} = {fmt(v)}" for name, v in zip(TABLE_COLUMNS, self.row())]
        lines.append(f"OD_real = {fmt(self.od_real)}")
        for hand in ("right", "left"):
            vals = self.per_frame_iv.get(hand)
            if vals is not None:
                lines.append(f"IV_{hand}_per_frame = " + ",".join(f"{v:.6f}" for v in vals))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        return ",".join(TABLE_COLUMNS) + "\n" + ",".join(fmt(v) for v in self.row()) + "\n"


METRIC_NAMES = ("iv", "id", "jerk", "sd", "od")


def _hand_tracks(record, models: dict[str, SkeletalHandModel]) -> dict[str, np.ndarray]:
    """(N, V_h, 3) FK point tracks for each active hand."""
    seq = record.sequence
    return {side: np.stack([hand_fk(h.pose(side), h.trans(side), models[side]) for h in seq.hands])
            for side in record.hand_type.hands}


def evaluate_sequences(records, reference=None, voxel_size: float = 0.004, hand_radius: float = 0.008,
                       dt: float = 1.0 / 30.0, metrics=METRIC_NAMES) -> MetricReport:
    """Benchmark metrics over generated records (and OD of the optional real reference).

    IV/ID are averaged over the sequences in which a hand is active (IV: mean over frames,
    ID: max over frames). Jerk runs on the hand FK points in cm per frame^3. SD groups
    records by their condition key; OD pools all of them.
    """
    records = list(records)
    if not records:
        raise InsufficientSamples("no sequences to evaluate")
    unknown = set(metrics) - set(METRIC_NAMES)
    if unknown:
        raise InvalidInput(f"unknown metric(s) {sorted(unknown)}")
    models = {"left": default_hand_model("left"), "right": default_hand_model("right")}
    iv = {"left": [], "right": []}
    dep = {"left": [], "right": []}
    jerks = []
    per_frame = {}
    for rec in records:
        tracks = _hand_tracks(rec, models)
        need_geom = "iv" in metrics or "id" in metrics
        boxes = [object_boxes(rec.obj, o) for o in rec.sequence.objects] if need_geom else None
        for side, pts in tracks.items():
            if "iv" in metrics:
                vals = [interpenetration_volume(BallsOccupancy(p, hand_radius), UnionOccupancy(tuple(b)), voxel_size)
                        * M3_TO_CM3 for p, b in zip(pts, boxes)]
                iv[side].append(float(np.mean(vals)))
                if len(records) == 1:
                    per_frame[side] = vals
            if "id" in metrics:
                dep[side].append(interpenetration_depth(pts, boxes) * M_TO_CM)
            if "jerk" in metrics:
                jerks.append(jerk(pts * M_TO_CM, dt=1.0))
    mean = lambda v: float(np.mean(v)) if v else 0.0

    sd = od = od_real = None
    if "sd" in metrics:
        groups: dict[bytes, list] = {}
        for rec in records:
            groups.setdefault(rec.condition_key, []).append(flatten_sequence(rec.sequence))
        sd = diversity(list(groups.values()), "SD")
    if "od" in metrics:
        od = diversity([flatten_sequence(r.sequence) for r in records], "OD")
        if reference is not None and len(reference) >= 2:
            od_real = diversity([flatten_sequence(r.sequence) for r in reference], "OD")
    return MetricReport(iv_right=mean(iv["right"]), iv_left=mean(iv["left"]), id_right=mean(dep["right"]),
                        id_left=mean(dep["left"]), jerk=mean(jerks) if "jerk" in metrics else 0.0, sd=sd, od=od,
                        od_real=od_real, dt=dt, voxel_size=voxel_size, hand_radius=hand_radius,
                        num_sequences=len(records), per_frame_iv=per_frame)
