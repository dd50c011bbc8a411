"""Poses, motion sequences, the procedural gait generator and dataset I/O.

A pose is flattened to ``N = 3 + 4 + 6 * J`` features: root translation,
root quaternion (w, x, y, z) and one 6-vector per joint.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rotations import (matrix_to_sixd, quat_canonical, quat_normalize,
                        quat_yaw, rot_axis, rot_z, sixd_to_matrix, yaw_of_quat)
from .skeleton import HIP_HEIGHT, N_JOINTS, OFFSETS, SHIN, THIGH

FPS = 30.0
ACTIONS = ("Walk", "Jog", "Run", "Step", "Wave", "SitDown", "JumpPrep", "Reach")
GAIT_ACTIONS = ACTIONS[:4]
TARGET_ACTIONS = ACTIONS[4:]
N_FEATURES = 3 + 4 + 6 * N_JOINTS
QUAT_TOL = 1e-9
STD_FLOOR = 1e-6
FORMAT_NAME = "motionbridge-dataset"
FORMAT_VERSION = 1

# stride frequency (Hz), speed (m/s), swing lift (m), arm swing (rad), lateral stepping
GAIT_PARAMS = {
    "Walk": (1.0, 1.2, 0.08, 0.35, False),
    "Jog": (1.6, 2.2, 0.10, 0.55, False),
    "Run": (2.2, 3.5, 0.14, 0.80, False),
    "Step": (1.0, 0.6, 0.06, 0.15, True),
}
ARM_NOISE = 0.01


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ActionLabel:
    index: int
    n_classes: int = len(ACTIONS)

    def __post_init__(self):
        if not 0 <= self.index < self.n_classes:
            raise ValueError(f"action index {self.index} outside [0, {self.n_classes})")

    @classmethod
    def from_name(cls, name: str, n_classes: int = len(ACTIONS)) -> "ActionLabel":
        if name not in ACTIONS:
            raise ValueError(f"unknown action {name!r}")
        return cls(ACTIONS.index(name), n_classes)

    @property
    def name(self) -> str:
        return ACTIONS[self.index]

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(self.n_classes)
        v[self.index] = 1.0
        return v


@dataclass
class Pose:
    root_translation: np.ndarray
    root_orientation: np.ndarray
    joint_rotations: np.ndarray  # (J, 6)

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        self.root_orientation = np.asarray(self.root_orientation, dtype=np.float64)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)

    @classmethod
    def identity(cls, n_joints: int = N_JOINTS) -> "Pose":
        six = np.tile([1.0, 0, 0, 0, 1.0, 0], (n_joints, 1))
        return cls(np.zeros(3), np.array([1.0, 0, 0, 0]), six)


@dataclass
class MotionSequence:
    """Frames stored column-wise: translations (T,3), quaternions (T,4), joints (T,J,6)."""

    trans: np.ndarray
    quat: np.ndarray
    joints: np.ndarray
    label: int = 0
    fps: float = FPS
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trans = np.asarray(self.trans, dtype=np.float64)
        self.quat = np.asarray(self.quat, dtype=np.float64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if len(self.trans) < 1:
            raise ValueError("a motion sequence needs at least one frame")
        if not (len(self.trans) == len(self.quat) == len(self.joints)):
            raise ValueError("frame arrays disagree in length")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self) -> int:
        return len(self.trans)

    @property
    def n_joints(self) -> int:
        return self.joints.shape[1]

    @property
    def frames(self) -> list[Pose]:
        return [Pose(t, q, j) for t, q, j in zip(self.trans, self.quat, self.joints)]

    @property
    def action(self) -> ActionLabel:
        return ActionLabel(self.label)

    @classmethod
    def from_poses(cls, poses: Sequence[Pose], **kw) -> "MotionSequence":
        return cls(np.stack([p.root_translation for p in poses]), np.stack([p.root_orientation for p in poses]),
                   np.stack([p.joint_rotations for p in poses]), **kw)

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(self.trans[start:stop], self.quat[start:stop], self.joints[start:stop],
                              self.label, self.fps, self.id, dict(self.meta))

    def to_array(self) -> np.ndarray:
        """(T, N) unnormalized feature matrix."""
        return np.concatenate([self.trans, self.quat, self.joints.reshape(len(self), -1)], axis=1)

    @classmethod
    def from_array(cls, arr: np.ndarray, renormalize: bool = True, **kw) -> "MotionSequence":
        arr = np.asarray(arr, dtype=np.float64)
        q = arr[:, 3:7]
        if renormalize:
            q = quat_normalize(q)
        return cls(arr[:, :3], q, arr[:, 7:].reshape(len(arr), -1, 6), **kw)

    @staticmethod
    def concat(parts: Sequence["MotionSequence"], **kw) -> "MotionSequence":
        return MotionSequence(np.concatenate([p.trans for p in parts]), np.concatenate([p.quat for p in parts]),
                              np.concatenate([p.joints for p in parts]), **kw)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class DatasetSplit:
    train: list[MotionSequence]
    test: list[MotionSequence]
    normalization: NormStats

    def __post_init__(self):
        overlap = {s.id for s in self.train} & {s.id for s in self.test}
        if overlap:
            raise ValueError(f"train/test share sequence ids: {sorted(overlap)[:3]}")


# -- feature vectorization ------------------------------------------------------

def pose_vectorize(p: Pose, norm: NormStats | None = None) -> np.ndarray:
    v = np.concatenate([p.root_translation, p.root_orientation, p.joint_rotations.reshape(-1)])
    if not np.all(np.isfinite(v)):
        raise ValueError("pose contains non-finite values")
    return norm.apply(v) if norm is not None else v


def pose_devectorize(v: np.ndarray, norm: NormStats | None = None, n_joints: int = N_JOINTS) -> Pose:
    v = np.asarray(v, dtype=np.float64)
    n = 3 + 4 + 6 * n_joints
    if v.shape != (n,):
        raise ValueError(f"pose vector must have length {n}, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("pose vector contains non-finite values")
    if norm is not None:
        v = norm.invert(v)
    return Pose(v[:3], quat_normalize(v[3:7]), v[7:].reshape(n_joints, 6))


def compute_norm_stats(train: Iterable[MotionSequence]) -> NormStats:
    arrays = [s.to_array() for s in train]
    if not arrays:
        raise ValueError("cannot compute normalization from an empty training set")
    x = np.concatenate(arrays, axis=0)
    return NormStats(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))


# -- procedural generator ------------------------------------------------------

def _root_path(t: np.ndarray, speed: float, yaw0: float, rate: float, lateral: bool):
    """Constant-speed arc starting at the origin; returns (xy, heading)."""
    heading = yaw0 + rate * t
    off = np.pi / 2 if lateral else 0.0
    if abs(rate) < 1e-12:
        d = yaw0 + off
        xy = np.stack([speed * t * np.cos(d), speed * t * np.sin(d)], -1)
    else:
        a0 = yaw0 + off
        a = heading + off
        xy = np.stack([speed / rate * (np.sin(a) - np.sin(a0)), -speed / rate * (np.cos(a) - np.cos(a0))], -1)
    return xy, heading


def _leg_ik(hip: np.ndarray, target: np.ndarray, fwd: np.ndarray, root_r: np.ndarray):
    """Two-link IK with the knee bending forward; returns local (hip, knee, ankle) matrices."""
    d = target - hip
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    reach = np.minimum(dist, THIGH + SHIN - 1e-4)
    u = d / dist
    w = fwd - np.sum(fwd * u, -1, keepdims=True) * u
    w /= np.linalg.norm(w, axis=-1, keepdims=True)
    cos_a = np.clip((THIGH ** 2 + reach ** 2 - SHIN ** 2) / (2 * THIGH * reach), -1.0, 1.0)
    thigh = cos_a * u + np.sqrt(1 - cos_a ** 2) * w
    knee = hip + THIGH * thigh
    ankle = hip + reach * u
    shin = (ankle - knee) / SHIN

    def frame(down):
        z = -down
        x = fwd - np.sum(fwd * z, -1, keepdims=True) * z
        x /= np.linalg.norm(x, axis=-1, keepdims=True)
        y = np.cross(z, x)
        return np.stack([x, y, z], axis=-1)

    hip_g = frame(thigh)
    knee_g = frame(shin)
    rt = np.swapaxes(root_r, -1, -2)
    hip_l = rt @ hip_g
    knee_l = np.swapaxes(hip_g, -1, -2) @ knee_g
    ankle_l = np.swapaxes(knee_g, -1, -2) @ root_r
    return hip_l, knee_l, ankle_l


def _smoothstep(s):
    return s - np.sin(2 * np.pi * s) / (2 * np.pi)


def _gait_feet(t, freq, phase0, lift, plant_of):
    """Ankle targets for one foot: planted in stance (phase < 0.5), eased swing otherwise."""
    cyc = freq * t + phase0
    c = np.floor(cyc)
    ph = cyc - c
    stance_mid = (c + 0.25 - phase0) / freq
    next_mid = (c + 1.25 - phase0) / freq
    plant_now = plant_of(stance_mid)
    plant_next = plant_of(next_mid)
    s = np.clip((ph - 0.5) / 0.5, 0.0, 1.0)
    # lift off and touch down vertically; horizontal travel in the middle 70%
    e = _smoothstep(np.clip((s - 0.15) / 0.7, 0.0, 1.0))[..., None]
    pos = np.where((ph < 0.5)[..., None], plant_now, (1 - e) * plant_now + e * plant_next)
    height = np.where(ph < 0.5, 0.0, lift * np.sin(np.pi * s))
    pos = pos.copy()
    pos[..., 2] = height
    return pos, ph


def synth_generate(action: ActionLabel | int | str, n_frames: int, turn_angle: float, seed: int,
                   fps: float = FPS, seq_id: str = "") -> MotionSequence:
    """Procedurally generate a labeled clip.

    Gait actions walk along a constant-speed arc whose heading turns by
    ``turn_angle`` in total; stance feet are pinned by inverse kinematics.
    The upper-body actions keep the root in place and ignore ``turn_angle``.
    """
    if isinstance(action, str):
        action = ActionLabel.from_name(action)
    idx = action.index if isinstance(action, ActionLabel) else int(action)
    if not 0 <= idx < len(ACTIONS):
        raise ValueError(f"unknown action index {idx}")
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if abs(turn_angle) > np.pi + 1e-12:
        raise ValueError("|turn_angle| must be <= pi")
    name = ACTIONS[idx]
    rng = np.random.default_rng(seed)
    yaw0 = rng.uniform(-np.pi, np.pi)
    phase0 = rng.uniform(0.0, 1.0)
    t = np.arange(n_frames) / fps
    duration = (n_frames - 1) / fps

    if name in GAIT_PARAMS:
        freq, speed, lift, arm_amp, lateral = GAIT_PARAMS[name]
        rate = turn_angle / duration
        xy, heading = _root_path(t, speed, yaw0, rate, lateral)
        height = np.full(n_frames, HIP_HEIGHT)

        def plant_of(side):
            def f(tm):
                pxy, ph = _root_path(tm, speed, yaw0, rate, lateral)
                off = rot_z(ph) @ OFFSETS[0 if side == 0 else 3]
                return np.concatenate([pxy + off[..., :2], np.zeros(np.shape(tm) + (1,))], -1)
            return f

        feet = [_gait_feet(t, freq, phase0 + 0.5 * side, lift, plant_of(side)) for side in (0, 1)]
        swing = np.sin(2 * np.pi * (freq * t + phase0))
        arm_axis = 0 if lateral else 1
        arm_angles = (arm_amp * swing, -arm_amp * swing)
    else:
        xy = np.zeros((n_frames, 2))
        heading = np.full(n_frames, yaw0)
        amp = rng.uniform(0.9, 1.1)
        height, arm_angles, arm_axis = _upper_body(name, t, duration, amp, phase0)
        feet = []
        for side in (0, 1):
            off = rot_z(yaw0) @ OFFSETS[0 if side == 0 else 3]
            foot = np.tile(np.array([off[0], off[1], 0.0]), (n_frames, 1))
            feet.append((foot, None))

    root_r = rot_z(heading)
    trans = np.concatenate([xy, height[:, None]], axis=1)
    fwd = root_r[..., :, 0]
    joints = np.zeros((n_frames, N_JOINTS, 3, 3))
    for side, (foot, _) in enumerate(feet):
        hip = trans + np.einsum("tij,j->ti", root_r, OFFSETS[0 if side == 0 else 3])
        h, k, a = _leg_ik(hip, foot, fwd, root_r)
        base = 0 if side == 0 else 3
        joints[:, base], joints[:, base + 1], joints[:, base + 2] = h, k, a
    joints[:, 6] = rot_axis(arm_axis, arm_angles[0])
    joints[:, 7] = rot_axis(arm_axis, arm_angles[1])
    six = matrix_to_sixd(joints)
    six[:, 6:] += rng.normal(0.0, ARM_NOISE, size=(n_frames, 2, 6))
    quat = quat_canonical(quat_yaw(heading))
    return MotionSequence(trans, quat, six, label=idx, fps=fps, id=seq_id,
                          meta={"turn_angle": float(turn_angle), "seed": int(seed)})


def _upper_body(name: str, t: np.ndarray, duration: float, amp: float, phase0: float):
    height = np.full(len(t), HIP_HEIGHT)
    ramp = np.clip(t / 0.5, 0.0, 1.0)
    if name == "Wave":
        right = -(2.4 * ramp + 0.4 * np.sin(2 * np.pi * (2.0 * t + phase0))) * amp
        return height, (np.zeros_like(t), right), 0
    if name == "SitDown":
        s = 0.5 - 0.5 * np.cos(np.pi * np.clip(t / max(duration, 1e-9), 0, 1))
        height = HIP_HEIGHT - 0.3 * amp * s
        arms = -0.6 * s * amp
        return height, (arms, arms), 1
    if name == "JumpPrep":
        cyc = 0.5 - 0.5 * np.cos(2 * np.pi * (1.2 * t + phase0))
        height = HIP_HEIGHT - 0.18 * amp * cyc
        arms = 1.0 * amp * (cyc - 0.5)
        return height, (arms, arms), 1
    if name == "Reach":
        arms = -1.5 * amp * np.sin(np.pi * np.clip(t / max(duration, 1e-9), 0, 1))
        return height, (arms, arms), 1
    raise ValueError(name)


def heading(seq: MotionSequence) -> np.ndarray:
    """Unwrapped root yaw per frame."""
    return np.unwrap(yaw_of_quat(seq.quat))


def joint_angular_speed_features(seq: MotionSequence) -> np.ndarray:
    """Mean angular speed (rad/s) of each joint's local rotation."""
    r = sixd_to_matrix(seq.joints)
    rel = np.swapaxes(r[:-1], -1, -2) @ r[1:]
    cos = np.clip((np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(cos).mean(axis=0) * seq.fps


def make_split(actions: Sequence[str] = ACTIONS, per_action: int = 100, test_per_action: int = 50,
               n_frames: int = 60, turn_range: float = np.pi / 2, seed: int = 0) -> DatasetSplit:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for name in actions:
        for k in range(per_action + test_per_action):
            turn = float(rng.uniform(-turn_range, turn_range))
            sub = int(rng.integers(0, 2 ** 31 - 1))
            part = "train" if k < per_action else "test"
            seq = synth_generate(name, n_frames, turn, sub, seq_id=f"{part}-{name}-{k:04d}")
            (train if part == "train" else test).append(seq)
    return DatasetSplit(train, test, compute_norm_stats(train))


# -- dataset file I/O ------------------------------------------------------------

def _seq_record(seq: MotionSequence, split: str) -> dict:
    return {
        "id": seq.id, "split": split, "fps": seq.fps, "label": ACTIONS[seq.label],
        "frames": [{"t": t.tolist(), "q": q.tolist(), "j": j.tolist()}
                   for t, q, j in zip(seq.trans, seq.quat, seq.joints)],
    }


def seq_to_json(seq: MotionSequence, **extra) -> str:
    rec = _seq_record(seq, extra.pop("split", "none"))
    rec.update(extra)
    return json.dumps(rec)


def seq_from_record(rec: dict, where: str = "") -> MotionSequence:
    try:
        frames = rec["frames"]
        if not frames:
            raise DataFormatError(f"{where}: sequence has no frames")
        trans = np.array([f["t"] for f in frames], dtype=np.float64)
        quat = np.array([f["q"] for f in frames], dtype=np.float64)
        joints = np.array([f["j"] for f in frames], dtype=np.float64)
        label = rec["label"]
        label = ACTIONS.index(label) if isinstance(label, str) else int(label)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise DataFormatError(f"{where}: malformed sequence record ({exc})") from exc
    if trans.shape[1:] != (3,) or quat.shape[1:] != (4,) or joints.ndim != 3 or joints.shape[2] != 6:
        raise DataFormatError(f"{where}: frame arrays have wrong shapes")
    norms = np.linalg.norm(quat, axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > QUAT_TOL)[0]
    if bad.size:
        raise DataFormatError(f"{where}: frame {int(bad[0])} quaternion norm {norms[bad[0]]:.6g} is not unit")
    return MotionSequence(trans, quat, joints, label=label, fps=float(rec.get("fps", FPS)), id=str(rec.get("id", "")))


def save_dataset(split: DatasetSplit, path) -> None:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "n_features": N_FEATURES,
              "normalization": split.normalization.to_json()}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for part, seqs in (("train", split.train), ("test", split.test)):
            for s in seqs:
                fh.write(json.dumps(_seq_record(s, part)) + "\n")


def load_dataset(path) -> DatasetSplit:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: line 1 is not a JSON header") from exc
    if header.get("format") != FORMAT_NAME:
        raise DataFormatError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"{path}: version {header.get('version')} != {FORMAT_VERSION}")
    train, test = [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: line {n} is truncated or invalid JSON") from exc
        seq = seq_from_record(rec, f"{path}: line {n}")
        (test if rec.get("split") == "test" else train).append(seq)
    return DatasetSplit(train, test, NormStats.from_json(header["normalization"]))


def read_sequences(path) -> list[MotionSequence]:
    """Plain JSONL of sequence records (no header), e.g. prediction outputs."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {n} is invalid JSON") from exc
            if "format" in rec:
                continue
            seq = seq_from_record(rec, f"{path}: line {n}")
            seq.meta.update({k: v for k, v in rec.items() if k not in ("frames", "id", "fps", "label")})
            out.append(seq)
    return out


def write_sequences(path, seqs: Iterable[MotionSequence]) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            extra = {k: v for k, v in s.meta.items() if isinstance(v, (str, int, float, list, dict))}
            rec = _seq_record(s, extra.pop("split", "none"))
            rec.update(extra)
            fh.write(json.dumps(rec) + "\n")
