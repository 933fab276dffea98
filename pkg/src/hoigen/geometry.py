"""Skeletal hand stand-in, articulated objects, distance fields and relative rotations."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import NUM_JOINTS, ObjectState, axis_angle_matrix, check_rotation, rot6d_to_matrix, rot6d_to_matrix_t
from .errors import EmptyGeometry, FileNotFound, InvalidGeometry, JointLimitViolation, ParseError, ShapeMismatch

# finger chains: thumb, index, middle, ring, pinky -> joints (1..15), wrist is 0
FINGER_BASES = {
    "thumb": (0.030, 0.030, -0.012),
    "index": (0.090, 0.024, 0.0),
    "middle": (0.094, 0.004, 0.0),
    "ring": (0.088, -0.015, 0.0),
    "pinky": (0.078, -0.032, 0.0),
}
FINGER_DIRS = {
    "thumb": (0.62, 0.78, 0.0),
    "index": (1.0, 0.05, 0.0),
    "middle": (1.0, 0.0, 0.0),
    "ring": (1.0, -0.05, 0.0),
    "pinky": (1.0, -0.10, 0.0),
}
SEGMENT_LENGTHS = (0.034, 0.024, 0.020)


@dataclass(frozen=True, eq=False)
class SkeletalHandModel:
    """Rigid-bone point hand. ``point_local`` is expressed in the owning joint's frame."""

    parents: np.ndarray  # (J,) -1 for the root
    offsets: np.ndarray  # (J, 3) rest offset from parent joint
    point_joint: np.ndarray  # (V,)
    point_local: np.ndarray  # (V, 3)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        pj = np.asarray(self.point_joint, dtype=np.int64)
        pl = np.asarray(self.point_local, dtype=np.float64)
        if parents.shape != (NUM_JOINTS,) or offsets.shape != (NUM_JOINTS, 3):
            raise ShapeMismatch("hand model must have 16 joints")
        if parents[0] != -1 or np.any(parents[1:] >= np.arange(1, NUM_JOINTS)) or np.any(parents[1:] < 0):
            raise InvalidGeometry("parents must be topologically ordered with joint 0 as root")
        if pj.ndim != 1 or pl.shape != (pj.shape[0], 3) or pj.size == 0:
            raise ShapeMismatch("point_joint / point_local mismatch")
        for name, a in (("parents", parents), ("offsets", offsets), ("point_joint", pj), ("point_local", pl)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def num_points(self) -> int:
        return self.point_joint.shape[0]

    def rest_joints(self) -> np.ndarray:
        pos = np.zeros((NUM_JOINTS, 3))
        for j in range(1, NUM_JOINTS):
            pos[j] = pos[self.parents[j]] + self.offsets[j]
        return pos

    def rest_points(self) -> np.ndarray:
        return self.rest_joints()[self.point_joint] + self.point_local

    def mirrored(self) -> "SkeletalHandModel":
        flip = np.array([1.0, -1.0, 1.0])
        return SkeletalHandModel(self.parents, self.offsets * flip, self.point_joint, self.point_local * flip)


def default_hand_model(side: str = "right", points_per_joint: int = 4) -> SkeletalHandModel:
    """Five three-segment fingers on a wrist root; ``16 * points_per_joint`` surface points."""
    parents = [-1]
    offsets = [np.zeros(3)]
    dirs = [np.array([1.0, 0.0, 0.0])]
    for name in ("thumb", "index", "middle", "ring", "pinky"):
        d = np.asarray(FINGER_DIRS[name], dtype=np.float64)
        d = d / np.linalg.norm(d)
        for k, length in enumerate(SEGMENT_LENGTHS):
            parents.append(0 if k == 0 else len(parents) - 1)
            offsets.append(np.asarray(FINGER_BASES[name]) if k == 0 else d * SEGMENT_LENGTHS[k - 1])
            dirs.append(d)

    point_joint, point_local = [], []
    radius = 0.008
    for j in range(NUM_JOINTS):
        d = dirs[j]
        side_vec = np.cross(d, [0.0, 0.0, 1.0])
        side_vec /= np.linalg.norm(side_vec)
        for p in range(points_per_joint):
            phi = 2.0 * np.pi * p / points_per_joint
            radial = radius * (np.cos(phi) * np.array([0.0, 0.0, 1.0]) + np.sin(phi) * side_vec)
            if j == 0:
                # palm: points spread over the back/front of the palm
                along = np.array([0.035 + 0.02 * (p % 2), 0.02 * (1 - 2 * ((p // 2) % 2)), 0.0])
                local = along + np.array([0.0, 0.0, 0.012 * (1 - 2 * (p % 2))])
            else:
                seg = SEGMENT_LENGTHS[(j - 1) % 3]
                local = d * seg * (0.25 + 0.5 * (p % 2)) + radial
            point_joint.append(j)
            point_local.append(local)
    model = SkeletalHandModel(np.array(parents), np.array(offsets), np.array(point_joint), np.array(point_local))
    return model.mirrored() if side == "left" else model


def _fk(R, trans, model: SkeletalHandModel, stack):
    """Shared kinematic chain for numpy and torch. ``R``: (..., J, 3, 3), ``trans``: (..., 3)."""
    offsets = model.offsets
    local = model.point_local
    idx = model.point_joint
    if isinstance(R, torch.Tensor):
        offsets = torch.tensor(offsets, dtype=R.dtype)
        local = torch.tensor(local, dtype=R.dtype)
        idx = torch.tensor(idx, dtype=torch.long)
    glob = [R[..., 0, :, :]]
    pos = [trans]
    for j in range(1, NUM_JOINTS):
        p = model.parents[j]
        glob.append(glob[p] @ R[..., j, :, :])
        pos.append(pos[p] + (glob[p] @ offsets[j][:, None])[..., 0])
    glob = stack(glob, -3)
    pos = stack(pos, -2)
    return pos[..., idx, :] + (glob[..., idx, :, :] @ local[..., None])[..., 0]


def hand_fk(pose, trans, model: SkeletalHandModel) -> np.ndarray:
    """Surface points ``(..., V, 3)`` for pose ``(..., 16, 6)`` and wrist translation ``(..., 3)``."""
    pose = np.asarray(pose, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    if pose.shape[-2:] != (NUM_JOINTS, 6) or trans.shape[-1] != 3:
        raise ShapeMismatch(f"pose {pose.shape} / trans {trans.shape}")
    R = rot6d_to_matrix(pose)
    return _fk(R, trans, model, lambda xs, ax: np.stack(xs, axis=ax))


def hand_fk_t(pose: torch.Tensor, trans: torch.Tensor, model: SkeletalHandModel) -> torch.Tensor:
    """Differentiable variant of :func:`hand_fk`."""
    R = rot6d_to_matrix_t(pose)
    return _fk(R, trans, model, lambda xs, ax: torch.stack(xs, dim=ax))


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    rotation: np.ndarray  # columns are the box axes in world coordinates
    half_extents: np.ndarray

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation

    def contains(self, points) -> np.ndarray:
        return np.all(np.abs(self.to_local(points)) < self.half_extents, axis=-1)

    def penetration_depth(self, points) -> np.ndarray:
        """Distance from each point to the nearest face; 0 outside the box."""
        slack = self.half_extents - np.abs(self.to_local(points))
        return np.where(np.all(slack > 0, axis=-1), slack.min(axis=-1), 0.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        ext = np.abs(self.rotation) @ self.half_extents
        return self.center - ext, self.center + ext


@dataclass(frozen=True, eq=False)
class ArticulatedObjectModel:
    """Two rigid point-cloud parts joined by a revolute joint. Rigid objects use limits (0, 0)."""

    base_points: np.ndarray
    moving_points: np.ndarray
    axis: np.ndarray
    pivot: np.ndarray
    limits: tuple[float, float]
    name: str = "object"
    _boxes: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        base = np.asarray(self.base_points, dtype=np.float64).reshape(-1, 3)
        moving = np.asarray(self.moving_points, dtype=np.float64).reshape(-1, 3)
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        pivot = np.asarray(self.pivot, dtype=np.float64).reshape(3)
        if base.shape[0] == 0 or moving.shape[0] == 0:
            raise EmptyGeometry("object parts must be non-empty")
        if not (np.all(np.isfinite(base)) and np.all(np.isfinite(moving))):
            raise InvalidGeometry("non-finite object points")
        if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
            raise InvalidGeometry(f"joint axis must have unit norm, got {np.linalg.norm(axis)}")
        lo, hi = float(self.limits[0]), float(self.limits[1])
        if lo > hi:
            raise InvalidGeometry(f"bad joint limits {self.limits}")
        for name, a in (("base_points", base), ("moving_points", moving), ("axis", axis), ("pivot", pivot)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        object.__setattr__(self, "limits", (lo, hi))
        boxes = []
        for pts in (base, moving):
            mn, mx = pts.min(0), pts.max(0)
            boxes.append(((mn + mx) / 2, np.maximum((mx - mn) / 2, 1e-4)))
        object.__setattr__(self, "_boxes", tuple(boxes))

    @property
    def is_articulated(self) -> bool:
        return self.limits[1] > self.limits[0]

    @property
    def num_points(self) -> int:
        return self.base_points.shape[0] + self.moving_points.shape[0]

    def joint_rotation(self, gamma: float) -> np.ndarray:
        return axis_angle_matrix(self.axis, gamma)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_points": self.base_points.tolist(),
            "moving_points": self.moving_points.tolist(),
            "axis": self.axis.tolist(),
            "pivot": self.pivot.tolist(),
            "limits": list(self.limits),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArticulatedObjectModel":
        try:
            return cls(d["base_points"], d["moving_points"], d["axis"], d["pivot"],
                       tuple(d["limits"]), d.get("name", "object"))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed object asset: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ArticulatedObjectModel":
        if not Path(path).exists():
            raise FileNotFound(f"object asset not found: {path}")
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        return cls.from_dict(d)


def _check_limits(model: ArticulatedObjectModel, gamma: float) -> None:
    lo, hi = model.limits
    if not lo - 1e-9 <= gamma <= hi + 1e-9:
        raise JointLimitViolation(f"joint angle {gamma} outside [{lo}, {hi}]")


def articulate_parts(model: ArticulatedObjectModel, state: ObjectState) -> tuple[np.ndarray, np.ndarray]:
    _check_limits(model, state.joint_angle)
    R = state.rotation
    J = model.joint_rotation(state.joint_angle)
    base = model.base_points @ R.T + state.trans
    moving = ((model.moving_points - model.pivot) @ J.T + model.pivot) @ R.T + state.trans
    return base, moving


def articulate_object(model: ArticulatedObjectModel, state: ObjectState) -> np.ndarray:
    """World-space point cloud ``(V_o, 3)``, base part first."""
    return np.concatenate(articulate_parts(model, state), axis=0)


def object_boxes(model: ArticulatedObjectModel, state: ObjectState) -> list[OrientedBox]:
    """Axis-aligned (object-frame) box proxies of both parts, posed in world space."""
    _check_limits(model, state.joint_angle)
    R = state.rotation
    J = model.joint_rotation(state.joint_angle)
    (c0, h0), (c1, h1) = model._boxes
    base = OrientedBox(R @ c0 + state.trans, R, h0)
    moving = OrientedBox(R @ (J @ (c1 - model.pivot) + model.pivot) + state.trans, R @ J, h1)
    return [base, moving]


def distance_field(hand_points, object_points) -> np.ndarray:
    """Per hand point, Euclidean distance to the nearest object point."""
    h = np.asarray(hand_points, dtype=np.float64).reshape(-1, 3)
    o = np.asarray(object_points, dtype=np.float64).reshape(-1, 3)
    if h.shape[0] == 0 or o.shape[0] == 0:
        raise EmptyGeometry("distance_field needs non-empty point clouds")
    diff = h[:, None, :] - o[None, :, :]
    return np.sqrt((diff * diff).sum(-1).min(axis=1))


def distance_field_t(hand_points: torch.Tensor, object_points: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Batched differentiable variant: ``(..., V_h, 3)`` x ``(..., V_o, 3)`` -> ``(..., V_h)``.

    The nearest neighbour is found without autograd; the distance is then recomputed from
    the gathered point, which carries the same gradient as a min over all pairs.
    """
    batch = torch.broadcast_shapes(hand_points.shape[:-2], object_points.shape[:-2])
    h = hand_points.expand(batch + hand_points.shape[-2:])
    o = object_points.expand(batch + object_points.shape[-2:])
    with torch.no_grad():
        idx = torch.cdist(h.detach(), o.detach()).argmin(-1)
    nearest = torch.gather(o, -2, idx[..., None].expand(idx.shape + (3,)))
    diff = h - nearest
    return torch.sqrt((diff * diff).sum(-1) + eps)


def validity_mask(D_star, eps: float = 0.0) -> np.ndarray:
    """1 where the ground-truth distance exceeds ``eps`` (strictly), else 0."""
    return (np.asarray(D_star, dtype=np.float64) > eps).astype(np.float64)


def relative_rotation(R_hand, R_obj) -> np.ndarray:
    """Hand rotation expressed in the object frame, ``R_obj^T @ R_hand``."""
    R_hand = check_rotation(R_hand)
    R_obj = check_rotation(R_obj)
    return np.swapaxes(R_obj, -1, -2) @ R_hand


def relative_rotation_t(R_hand: torch.Tensor, R_obj: torch.Tensor) -> torch.Tensor:
    return R_obj.transpose(-1, -2) @ R_hand
