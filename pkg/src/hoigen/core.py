"""Shared domain types, 6D rotation utilities and the canonical frame layout.

Units: meters and radians everywhere. The 6D rotation stores the first two
columns of a rotation matrix, column-major: ``[c0x, c0y, c0z, c1x, c1y, c1z]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import (DegenerateRotation, InvalidHandType, InvalidInput, InvalidLength, InvalidRotationMatrix,
                     JointLimitViolation, ShapeMismatch)

MAX_FRAMES = 150
NUM_JOINTS = 16
POSE_DIM = NUM_JOINTS * 6
FRAME_DIM = 3 + 3 + POSE_DIM + POSE_DIM + 3 + 6 + 1  # 208

# slices into the 208-value frame vector
TRANS_L = slice(0, 3)
TRANS_R = slice(3, 6)
POSE_L = slice(6, 6 + POSE_DIM)
POSE_R = slice(6 + POSE_DIM, 6 + 2 * POSE_DIM)
OBJ_TRANS = slice(198, 201)
OBJ_ROT = slice(201, 207)
OBJ_GAMMA = 207

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

_NORM_EPS = 1e-8
_PARALLEL_EPS = 1e-8


def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt decode of ``(..., 6)`` values into ``(..., 3, 3)`` rotations."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ShapeMismatch(f"expected trailing dim 6, got {r.shape}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    if np.any(~np.isfinite(r)) or np.any(n1 < _NORM_EPS) or np.any(n2 < _NORM_EPS):
        raise DegenerateRotation("6D rotation has a near-zero or non-finite column")
    cos = np.abs(np.sum(a1 * a2, axis=-1)) / (n1 * n2)
    if np.any(cos > 1.0 - _PARALLEL_EPS):
        raise DegenerateRotation("6D rotation columns are (near) parallel")
    b1 = a1 / n1[..., None]
    b2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = b2 / np.linalg.norm(b2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R, atol: float = 1e-5) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"expected (..., 3, 3), got {R.shape}")
    eye = np.eye(3)
    gram = np.swapaxes(R, -1, -2) @ R
    if not np.all(np.isfinite(R)) or np.max(np.abs(gram - eye), initial=0.0) > atol:
        raise InvalidRotationMatrix("matrix is not orthonormal")
    if np.any(np.linalg.det(R) <= 0):
        raise InvalidRotationMatrix("matrix is a reflection (det <= 0)")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def check_rotation(R, atol: float = 1e-5) -> np.ndarray:
    matrix_to_rot6d(R, atol=atol)
    return np.asarray(R, dtype=np.float64)


def canonicalize_rot6d(r) -> np.ndarray:
    """Project arbitrary (non-degenerate) 6D values onto the valid manifold."""
    return matrix_to_rot6d(rot6d_to_matrix(r))


def rot6d_to_matrix_t(r: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Differentiable torch variant of :func:`rot6d_to_matrix` (no validation)."""
    a1, a2 = r[..., :3], r[..., 3:]
    b1 = a1 / torch.sqrt((a1 * a1).sum(-1, keepdim=True) + eps)
    b2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = b2 / torch.sqrt((b2 * b2).sum(-1, keepdim=True) + eps)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


class HandType(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    BIMANUAL = 2

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(3)
        v[int(self)] = 1.0
        return v

    @property
    def hands(self) -> tuple[str, ...]:
        return {HandType.LEFT: ("left",), HandType.RIGHT: ("right",), HandType.BIMANUAL: ("left", "right")}[self]

    @classmethod
    def from_one_hot(cls, v) -> "HandType":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != (3,) or not np.all((v == 0) | (v == 1)) or v.sum() != 1:
            raise InvalidHandType(f"not a 3-way one-hot: {v}")
        return cls(int(np.argmax(v)))

    @classmethod
    def parse(cls, name: str) -> "HandType":
        aliases = {"left": cls.LEFT, "right": cls.RIGHT, "bimanual": cls.BIMANUAL, "both": cls.BIMANUAL}
        try:
            return aliases[name.lower()]
        except KeyError:
            raise InvalidHandType(f"unknown hand type {name!r}") from None


def _as_vec(x, n: int, name: str) -> np.ndarray:
    a = np.array(x, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise ShapeMismatch(f"{name}: expected {n} values, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name}: non-finite values")
    a.flags.writeable = False
    return a


def _as_pose(x, name: str) -> np.ndarray:
    a = np.array(x, dtype=np.float64)
    if a.shape != (NUM_JOINTS, 6):
        raise ShapeMismatch(f"{name}: expected ({NUM_JOINTS}, 6), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name}: non-finite values")
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class HandState:
    trans_left: np.ndarray
    trans_right: np.ndarray
    pose_left: np.ndarray
    pose_right: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "trans_left", _as_vec(self.trans_left, 3, "trans_left"))
        object.__setattr__(self, "trans_right", _as_vec(self.trans_right, 3, "trans_right"))
        object.__setattr__(self, "pose_left", _as_pose(self.pose_left, "pose_left"))
        object.__setattr__(self, "pose_right", _as_pose(self.pose_right, "pose_right"))

    @classmethod
    def rest(cls) -> "HandState":
        pose = np.tile(IDENTITY_6D, (NUM_JOINTS, 1))
        return cls(np.zeros(3), np.zeros(3), pose, pose)

    def trans(self, hand: str) -> np.ndarray:
        return self.trans_left if hand == "left" else self.trans_right

    def pose(self, hand: str) -> np.ndarray:
        return self.pose_left if hand == "left" else self.pose_right

    def __eq__(self, other):
        if not isinstance(other, HandState):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("trans_left", "trans_right", "pose_left", "pose_right"))


@dataclass(frozen=True, eq=False)
class ObjectState:
    trans: np.ndarray
    rot: np.ndarray
    joint_angle: float

    def __post_init__(self):
        object.__setattr__(self, "trans", _as_vec(self.trans, 3, "trans"))
        object.__setattr__(self, "rot", _as_vec(self.rot, 6, "rot"))
        angle = float(self.joint_angle)
        if not np.isfinite(angle):
            raise InvalidInput("joint_angle is not finite")
        object.__setattr__(self, "joint_angle", angle)

    @classmethod
    def identity(cls) -> "ObjectState":
        return cls(np.zeros(3), IDENTITY_6D, 0.0)

    @property
    def rotation(self) -> np.ndarray:
        return rot6d_to_matrix(self.rot)

    def within(self, limits: tuple[float, float], tol: float = 1e-9) -> bool:
        return limits[0] - tol <= self.joint_angle <= limits[1] + tol

    def __eq__(self, other):
        if not isinstance(other, ObjectState):
            return NotImplemented
        return (np.array_equal(self.trans, other.trans) and np.array_equal(self.rot, other.rot)
                and self.joint_angle == other.joint_angle)


@dataclass(frozen=True)
class MotionSequence:
    hands: tuple[HandState, ...]
    objects: tuple[ObjectState, ...]

    def __post_init__(self):
        object.__setattr__(self, "hands", tuple(self.hands))
        object.__setattr__(self, "objects", tuple(self.objects))
        if len(self.hands) != len(self.objects):
            raise ShapeMismatch(f"{len(self.hands)} hand frames vs {len(self.objects)} object frames")
        if not 1 <= len(self.hands) <= MAX_FRAMES:
            raise InvalidLength(f"sequence length {len(self.hands)} outside [1, {MAX_FRAMES}]")

    @property
    def N(self) -> int:
        return len(self.hands)

    def validate(self, limits: tuple[float, float] | None = None) -> None:
        """Check rotation decodability of every pose row and, optionally, joint limits."""
        arr = flatten_sequence(self)
        rot6d_to_matrix(arr[:, POSE_L].reshape(-1, 6))
        rot6d_to_matrix(arr[:, POSE_R].reshape(-1, 6))
        rot6d_to_matrix(arr[:, OBJ_ROT])
        if limits is not None:
            for i, o in enumerate(self.objects):
                if not o.within(limits):
                    raise JointLimitViolation(f"frame {i}: joint angle {o.joint_angle} outside {limits}")


def flatten_sequence(seq: MotionSequence) -> np.ndarray:
    """``(N, 208)`` array in the canonical frame layout."""
    out = np.empty((seq.N, FRAME_DIM))
    for i, (h, o) in enumerate(zip(seq.hands, seq.objects)):
        out[i, TRANS_L] = h.trans_left
        out[i, TRANS_R] = h.trans_right
        out[i, POSE_L] = h.pose_left.reshape(-1)
        out[i, POSE_R] = h.pose_right.reshape(-1)
        out[i, OBJ_TRANS] = o.trans
        out[i, OBJ_ROT] = o.rot
        out[i, OBJ_GAMMA] = o.joint_angle
    return out


def unflatten_sequence(arr) -> MotionSequence:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != FRAME_DIM:
        raise ShapeMismatch(f"expected (N, {FRAME_DIM}), got {arr.shape}")
    hands, objects = [], []
    for row in arr:
        hands.append(HandState(row[TRANS_L], row[TRANS_R],
                               row[POSE_L].reshape(NUM_JOINTS, 6), row[POSE_R].reshape(NUM_JOINTS, 6)))
        objects.append(ObjectState(row[OBJ_TRANS], row[OBJ_ROT], row[OBJ_GAMMA]))
    return MotionSequence(tuple(hands), tuple(objects))


def stack_frames(frames: Sequence[np.ndarray]) -> MotionSequence:
    return unflatten_sequence(np.stack(frames))
