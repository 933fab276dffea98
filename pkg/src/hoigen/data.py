"""Synthetic articulated-manipulation data, dataset / sequence file I/O and stub embedders.

Binary layouts are little-endian; see ``docs/formats.md`` for the field tables.
"""
from __future__ import annotations

import enum
import hashlib
import io
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .core import (FRAME_DIM, IDENTITY_6D, MAX_FRAMES, NUM_JOINTS, HandState, HandType, MotionSequence, ObjectState,
                   axis_angle_matrix, flatten_sequence, matrix_to_rot6d, unflatten_sequence)
from .errors import FileNotFound, InvalidInput, InvalidLength, ParseError
from .geometry import ArticulatedObjectModel, SkeletalHandModel, articulate_object, default_hand_model, distance_field, hand_fk

DATASET_MAGIC = b"HOIDATA\x00"
SEQUENCE_MAGIC = b"HOISEQ\x00\x00"
FORMAT_VERSION = 1


class Family(enum.IntEnum):
    BI_ART = 0
    BI_RIGID = 1
    SINGLE_ART = 2
    SINGLE_RIGID = 3

    @property
    def label(self) -> str:
        return ("Bi-Art.", "Bi-Rigid", "Single-Art.", "Single-Rigid")[self]

    @property
    def bimanual(self) -> bool:
        return self in (Family.BI_ART, Family.BI_RIGID)

    @property
    def articulated(self) -> bool:
        return self in (Family.BI_ART, Family.SINGLE_ART)

    @classmethod
    def parse(cls, name: str) -> "Family":
        key = re.sub(r"[^a-z]", "", name.lower())
        table = {"biart": cls.BI_ART, "birigid": cls.BI_RIGID, "singleart": cls.SINGLE_ART, "singlerigid": cls.SINGLE_RIGID}
        if key not in table:
            raise InvalidInput(f"unknown family {name!r}")
        return table[key]


# ---------------------------------------------------------------- embedders

class EmbeddingProvider(Protocol):
    text_dim: int
    obj_dim: int

    def text(self, instruction: str) -> np.ndarray: ...

    def object(self, model: ArticulatedObjectModel) -> np.ndarray: ...


def _hash_seed(token: str) -> int:
    return int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")


def stub_text_embed(instruction: str, dim: int = 64) -> np.ndarray:
    """Hashed bag of unigrams and bigrams, projected to a unit vector."""
    if not instruction or not instruction.strip():
        raise InvalidInput("instruction must be a non-empty string")
    tokens = re.findall(r"[a-z0-9]+", instruction.lower()) or [instruction.strip()]
    feats = [(t, 1.0) for t in tokens] + [(f"{a}_{b}", 0.5) for a, b in zip(tokens, tokens[1:])]
    v = np.zeros(dim)
    for feat, w in feats:
        v += w * np.random.default_rng(_hash_seed(feat)).standard_normal(dim)
    return v / np.linalg.norm(v)


def _object_stats(model: ArticulatedObjectModel) -> np.ndarray:
    pts = np.concatenate([model.base_points, model.moving_points])
    centroid = pts.mean(0)
    eig = np.sqrt(np.maximum(np.linalg.eigvalsh(np.cov(pts.T)), 0.0))
    extent = pts.max(0) - pts.min(0)
    ext_a = model.base_points.max(0) - model.base_points.min(0)
    ext_b = model.moving_points.max(0) - model.moving_points.min(0)
    offset = model.moving_points.mean(0) - model.base_points.mean(0)
    ratio = model.moving_points.shape[0] / pts.shape[0]
    return np.concatenate([centroid, eig, extent, ext_a, ext_b, offset, model.axis, model.pivot,
                           np.asarray(model.limits) / np.pi, [ratio]])


def stub_object_embed(model: ArticulatedObjectModel, dim: int = 64) -> np.ndarray:
    """Point-order-invariant moment statistics through a fixed random projection."""
    stats = _object_stats(model)
    scale = np.ones_like(stats)
    scale[:18] = 10.0  # lengths in decimeters keep features O(1)
    proj = np.random.default_rng(20240517).standard_normal((stats.size, dim)) / np.sqrt(stats.size)
    return np.tanh((stats * scale) @ proj)


@dataclass(frozen=True)
class StubEmbedder:
    text_dim: int = 64
    obj_dim: int = 64

    def text(self, instruction: str) -> np.ndarray:
        return stub_text_embed(instruction, self.text_dim)

    def object(self, model: ArticulatedObjectModel) -> np.ndarray:
        return stub_object_embed(model, self.obj_dim)


def condition_hash(vec: np.ndarray) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(vec, dtype="<f8").tobytes()).digest()


# ---------------------------------------------------------------- synthetic generation

@dataclass(frozen=True, eq=False)
class Sample:
    family: Family
    hand_type: HandType
    instruction: str
    obj: ArticulatedObjectModel
    sequence: MotionSequence
    dist: np.ndarray  # (N, 2, V_h) ground-truth distance fields, (left, right)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.family == other.family and self.hand_type == other.hand_type
                and self.instruction == other.instruction
                and self.obj.to_dict() == other.obj.to_dict()
                and np.array_equal(flatten_sequence(self.sequence), flatten_sequence(other.sequence))
                and np.array_equal(self.dist, other.dist))


@dataclass
class Dataset:
    samples: list[Sample]
    families: tuple[Family, ...]
    seed: int
    hand_points: int

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.families == other.families and self.seed == other.seed
                and self.hand_points == other.hand_points and self.samples == other.samples)


OBJECT_NAMES = {True: ("box", "laptop", "microwave", "cabinet"), False: ("crate", "block", "case", "tray")}


def _surface_points(rng, center, half, count) -> np.ndarray:
    half = np.asarray(half, dtype=np.float64)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]).repeat(2)
    face = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(count, 3))
    axis = face // 2
    u[np.arange(count), axis] = np.where(face % 2 == 0, -1.0, 1.0)
    return np.asarray(center) + u * half


def make_object(rng: np.random.Generator, articulated: bool, num_points: int = 256) -> ArticulatedObjectModel:
    """Box-shaped base with a lid hinged on its top back edge (x axis)."""
    w, d, h = rng.uniform(0.12, 0.28), rng.uniform(0.10, 0.22), rng.uniform(0.05, 0.14)
    lid_t = 0.012
    n_lid = num_points // 4
    base = _surface_points(rng, (0.0, 0.0, h / 2), (w / 2, d / 2, h / 2), num_points - n_lid)
    lid = _surface_points(rng, (0.0, 0.0, h + lid_t / 2), (w / 2, d / 2, lid_t / 2), n_lid)
    limits = (0.0, float(rng.uniform(1.2, 1.8))) if articulated else (0.0, 0.0)
    name = str(rng.choice(OBJECT_NAMES[articulated]))
    return ArticulatedObjectModel(base, lid, (1.0, 0.0, 0.0), (0.0, -d / 2, h + lid_t / 2), limits, name)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def gamma_trajectory(rng: np.random.Generator, n: int, limits, articulated: bool) -> np.ndarray:
    """Open-then-close ramp for articulated objects, constant 0 for rigid ones."""
    if not articulated or n == 1:
        return np.zeros(n)
    u = np.linspace(0.0, 1.0, n)
    peak = rng.uniform(0.55, 0.95) * limits[1]
    t_open, t_close = rng.uniform(0.35, 0.5), rng.uniform(0.6, 0.75)
    up = _smoothstep(u / t_open)
    down = _smoothstep((u - t_close) / (1.0 - t_close))
    return np.clip(peak * up * (1.0 - down), limits[0], limits[1])


def _curl_pose(curl: float, spread: np.ndarray) -> np.ndarray:
    """Finger flexion about each segment's local y axis; thumb about x."""
    pose = np.tile(IDENTITY_6D, (NUM_JOINTS, 1))
    for j in range(1, NUM_JOINTS):
        finger, seg = (j - 1) // 3, (j - 1) % 3
        axis = (1.0, 0.0, 0.0) if finger == 0 else (0.0, 1.0, 0.0)
        angle = curl * spread[finger] * (0.9 if seg == 0 else 1.1)
        pose[j] = matrix_to_rot6d(axis_angle_matrix(axis, angle))
    return pose


def _grip_frames(model: ArticulatedObjectModel, side: str, on_lid: bool):
    """Wrist anchor position, orientation and which part carries it (object frame)."""
    bmin, bmax = model.base_points.min(0), model.base_points.max(0)
    w, h = bmax[0] - bmin[0], bmax[2] - bmin[2]
    reach = 0.135
    palm_down = axis_angle_matrix((1.0, 0.0, 0.0), np.pi)  # palm faces -z after the flip
    if on_lid:
        # on the lid's front edge, fingers pointing toward -y
        front = model.moving_points[:, 1].max()
        pos = np.array([0.0, front + reach - 0.03, model.pivot[2] + 0.02])
        R = axis_angle_matrix((0.0, 0.0, 1.0), -np.pi / 2) @ palm_down
        return pos, R, "moving"
    sign = -1.0 if side == "left" else 1.0
    pos = np.array([sign * (w / 2 + reach - 0.03), 0.0, 0.6 * h])
    R = axis_angle_matrix((0.0, 0.0, 1.0), 0.0 if side == "left" else np.pi)
    return pos, R, "base"


def generate_sample(family: Family, n: int, seed, hand_model: dict[str, SkeletalHandModel] | None = None,
                    num_object_points: int = 256) -> Sample:
    if not 1 <= n <= MAX_FRAMES:
        raise InvalidLength(f"frame count {n} outside [1, {MAX_FRAMES}]")
    rng = np.random.default_rng(seed)
    models = hand_model or {"left": default_hand_model("left"), "right": default_hand_model("right")}
    obj = make_object(rng, family.articulated, num_object_points)
    if family.bimanual:
        hand_type = HandType.BIMANUAL
    else:
        hand_type = HandType.RIGHT if rng.uniform() < 0.5 else HandType.LEFT
    active = set(hand_type.hands)

    gamma = gamma_trajectory(rng, n, obj.limits, family.articulated)
    u = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    start = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.0])
    lift = rng.uniform(0.0, 0.03) if family.articulated else rng.uniform(0.08, 0.2)
    yaw0 = rng.uniform(-np.pi, np.pi)
    yaw_span = rng.uniform(-0.3, 0.3) if family.articulated else rng.uniform(-1.2, 1.2)
    lift_u = _smoothstep((u - 0.2) / 0.5)
    spread = rng.uniform(0.5, 0.9, size=5)
    approach = _smoothstep(u / 0.2)

    if family.articulated:
        verb = "open and close"
    else:
        verb = str(rng.choice(["lift", "move", "rotate"]))
    who = "with both hands" if family.bimanual else f"with the {hand_type.hands[0]} hand"
    instruction = f"{verb} the {obj.name} {who}"

    hands, objects = [], []
    for i in range(n):
        R_obj = axis_angle_matrix((0.0, 0.0, 1.0), yaw0 + yaw_span * u[i])
        t_obj = start + np.array([0.0, 0.0, lift * lift_u[i]])
        J = obj.joint_rotation(gamma[i])
        objects.append(ObjectState(t_obj, matrix_to_rot6d(R_obj), gamma[i]))
        trans, poses = {}, {}
        for side in ("left", "right"):
            if side not in active:
                trans[side] = np.array([-0.6 if side == "left" else 0.6, 0.0, 0.4])
                poses[side] = np.tile(IDENTITY_6D, (NUM_JOINTS, 1))
                continue
            on_lid = family.articulated and (side == "right" or not family.bimanual)
            pos, R_anchor, part = _grip_frames(obj, side, on_lid)
            back = (1.0 - approach[i]) * 0.08
            outward = pos.copy()
            outward[2] = 0.0
            outward = outward / max(np.linalg.norm(outward), 1e-9)
            pos = pos + back * outward + np.array([0.0, 0.0, back * 0.5])
            if part == "moving":
                pos = J @ (pos - obj.pivot) + obj.pivot
                R_anchor = J @ R_anchor
            trans[side] = R_obj @ pos + t_obj
            pose = _curl_pose(0.2 + 0.8 * approach[i], spread)
            pose[0] = matrix_to_rot6d(R_obj @ R_anchor)
            poses[side] = pose
        hands.append(HandState(trans["left"], trans["right"], poses["left"], poses["right"]))
    seq = MotionSequence(tuple(hands), tuple(objects))
    seq.validate(obj.limits)
    dist = compute_distance_fields(seq, obj, models)
    return Sample(family, hand_type, instruction, obj, seq, dist)


def compute_distance_fields(seq: MotionSequence, obj: ArticulatedObjectModel,
                            models: dict[str, SkeletalHandModel]) -> np.ndarray:
    out = np.empty((seq.N, 2, models["left"].num_points))
    for i, (h, o) in enumerate(zip(seq.hands, seq.objects)):
        cloud = articulate_object(obj, o)
        for k, side in enumerate(("left", "right")):
            out[i, k] = distance_field(hand_fk(h.pose(side), h.trans(side), models[side]), cloud)
    return out


def generate_dataset(families: Sequence[Family], count: int, seed: int, frames: int = 32) -> Dataset:
    """``count`` samples cycling through ``families``; per-sample seeds spawned from ``seed``."""
    if count < 1:
        raise InvalidInput("count must be >= 1")
    families = tuple(Family(f) for f in families)
    children = np.random.SeedSequence(seed).spawn(count)
    models = {"left": default_hand_model("left"), "right": default_hand_model("right")}
    samples = [generate_sample(families[k % len(families)], frames, children[k], models) for k in range(count)]
    return Dataset(samples, families, seed, models["left"].num_points)


# ---------------------------------------------------------------- binary I/O

def _pack_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _pack_f64(buf: io.BytesIO, a) -> None:
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _pack_object(buf: io.BytesIO, obj: ArticulatedObjectModel) -> None:
    buf.write(struct.pack("<II", obj.base_points.shape[0], obj.moving_points.shape[0]))
    _pack_f64(buf, obj.base_points)
    _pack_f64(buf, obj.moving_points)
    _pack_f64(buf, obj.axis)
    _pack_f64(buf, obj.pivot)
    _pack_f64(buf, obj.limits)
    _pack_str(buf, obj.name)


class _Reader:
    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"{self.source}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, *shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"{self.source}: bad string") from exc

    def obj(self) -> ArticulatedObjectModel:
        nb, nm = self.unpack("<II")
        base, moving = self.f64(nb, 3), self.f64(nm, 3)
        axis, pivot, limits = self.f64(3), self.f64(3), self.f64(2)
        name = self.string()
        try:
            return ArticulatedObjectModel(base, moving, axis, pivot, (limits[0], limits[1]), name)
        except Exception as exc:
            raise ParseError(f"{self.source}: invalid object record: {exc}") from exc

    def frames(self, n: int) -> MotionSequence:
        try:
            return unflatten_sequence(self.f64(n, FRAME_DIM))
        except ParseError:
            raise
        except Exception as exc:
            raise ParseError(f"{self.source}: invalid frame data: {exc}") from exc


def dataset_to_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    mask = sum(1 << int(f) for f in ds.families)
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IIQIII", FORMAT_VERSION, mask, ds.seed, FRAME_DIM, ds.hand_points, len(ds.samples)))
    buf.write(struct.pack("<I", len(ds.families)))
    buf.write(bytes(int(f) for f in ds.families))
    for s in ds.samples:
        s.sequence.validate(s.obj.limits)
        if s.dist.shape != (s.sequence.N, 2, ds.hand_points) or np.any(s.dist < 0):
            raise InvalidInput("distance fields must be non-negative with shape (N, 2, V_h)")
        buf.write(struct.pack("<BBI", int(s.family), int(s.hand_type), s.sequence.N))
        _pack_str(buf, s.instruction)
        _pack_object(buf, s.obj)
        _pack_f64(buf, flatten_sequence(s.sequence))
        _pack_f64(buf, s.dist)
    return buf.getvalue()


def dataset_from_bytes(data: bytes, source: str = "<bytes>") -> Dataset:
    r = _Reader(data, source)
    if r.take(8) != DATASET_MAGIC:
        raise ParseError(f"{source}: not a dataset file")
    version, _mask, seed, frame_dim, hand_points, count = r.unpack("<IIQIII")
    if version != FORMAT_VERSION or frame_dim != FRAME_DIM:
        raise ParseError(f"{source}: unsupported version {version} / frame dim {frame_dim}")
    (nfam,) = r.unpack("<I")
    families = tuple(Family(b) for b in r.take(nfam))
    samples = []
    for _ in range(count):
        fam, ht, n = r.unpack("<BBI")
        instruction = r.string()
        obj = r.obj()
        seq = r.frames(n)
        dist = r.f64(n, 2, hand_points)
        samples.append(Sample(Family(fam), HandType(ht), instruction, obj, seq, dist))
    if r.pos != len(data):
        raise ParseError(f"{source}: trailing bytes")
    return Dataset(samples, families, seed, hand_points)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFound(f"dataset file not found: {path}")
    return dataset_from_bytes(path.read_bytes(), str(path))


@dataclass(frozen=True, eq=False)
class SequenceRecord:
    """A generated (or reference) sequence with the conditions that produced it."""

    sequence: MotionSequence
    obj: ArticulatedObjectModel
    hand_type: HandType
    instruction: str
    seed: int = 0
    text_hash: bytes = b"\x00" * 32
    obj_hash: bytes = b"\x00" * 32

    @property
    def condition_key(self) -> bytes:
        return hashlib.sha256(self.text_hash + self.obj_hash + bytes([int(self.hand_type)])).digest()


def sequence_to_bytes(rec: SequenceRecord) -> bytes:
    buf = io.BytesIO()
    buf.write(SEQUENCE_MAGIC)
    buf.write(struct.pack("<IQBI", FORMAT_VERSION, rec.seed, int(rec.hand_type), rec.sequence.N))
    buf.write(rec.text_hash)
    buf.write(rec.obj_hash)
    _pack_str(buf, rec.instruction)
    _pack_object(buf, rec.obj)
    _pack_f64(buf, flatten_sequence(rec.sequence))
    return buf.getvalue()


def sequence_from_bytes(data: bytes, source: str = "<bytes>") -> SequenceRecord:
    r = _Reader(data, source)
    if r.take(8) != SEQUENCE_MAGIC:
        raise ParseError(f"{source}: not a sequence file")
    version, seed, ht, n = r.unpack("<IQBI")
    if version != FORMAT_VERSION:
        raise ParseError(f"{source}: unsupported version {version}")
    if ht > 2 or not 1 <= n <= MAX_FRAMES:
        raise ParseError(f"{source}: bad header")
    text_hash, obj_hash = r.take(32), r.take(32)
    instruction = r.string()
    obj = r.obj()
    seq = r.frames(n)
    if r.pos != len(data):
        raise ParseError(f"{source}: trailing bytes")
    return SequenceRecord(seq, obj, HandType(ht), instruction, seed, text_hash, obj_hash)


def save_sequence(rec: SequenceRecord, path) -> None:
    Path(path).write_bytes(sequence_to_bytes(rec))


def load_sequence(path) -> SequenceRecord:
    path = Path(path)
    if not path.exists():
        raise FileNotFound(f"sequence file not found: {path}")
    return sequence_from_bytes(path.read_bytes(), str(path))


def record_from_sample(sample: Sample, embedder: EmbeddingProvider | None = None) -> SequenceRecord:
    emb = embedder or StubEmbedder()
    return SequenceRecord(sample.sequence, sample.obj, sample.hand_type, sample.instruction, 0,
                          condition_hash(emb.text(sample.instruction)), condition_hash(emb.object(sample.obj)))


def iter_frames(samples: Iterable[Sample]):
    for s in samples:
        yield from zip(s.sequence.hands, s.sequence.objects)
