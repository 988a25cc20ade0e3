"""Hand-object interaction sequences and their flat vector layout.

Flat layout, frames major. Within one frame (141 scalars)::

    [  0: 63)  left hand joints, joint-major (x, y, z)
    [ 63: 67)  left wrist quaternion (w, x, y, z)
    [ 67:130)  right hand joints
    [130:134)  right wrist quaternion
    [134:137)  object translation
    [137:141)  object quaternion

All positions are meters in the world frame. Hand ``active`` flags are not
part of the vector; :func:`unflatten` takes them as an argument.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_JOINTS = 21
HAND_DIM = N_JOINTS * 3 + 4
FRAME_DIM = 2 * HAND_DIM + 7

LEFT_JOINTS = slice(0, 63)
LEFT_QUAT = slice(63, 67)
RIGHT_JOINTS = slice(67, 130)
RIGHT_QUAT = slice(130, 134)
OBJ_TRANS = slice(134, 137)
OBJ_QUAT = slice(137, 141)

# wrist, then (MCP, PIP, DIP, tip) for thumb, index, middle, ring, pinky
WRIST = 0
FINGERTIPS = (4, 8, 12, 16, 20)
CONTACT_JOINTS = (WRIST,) + FINGERTIPS
FINGERS = tuple(tuple(range(1 + 4 * f, 5 + 4 * f)) for f in range(5))

JOINT_RADIUS = 0.008
TIP_RADIUS = 0.006
JOINT_RADII = np.full(N_JOINTS, JOINT_RADIUS)
JOINT_RADII[list(FINGERTIPS)] = TIP_RADIUS
JOINT_RADII.setflags(write=False)


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _check_unit(q, what):
    n = np.linalg.norm(q, axis=-1)
    if not np.all(np.abs(n - 1.0) <= 1e-6):
        raise ValueError(f"{what} must be unit quaternions (|q| within 1e-6 of 1)")


@dataclass(frozen=True)
class HandPose:
    joints: np.ndarray
    wrist_orientation: np.ndarray
    active: bool = True

    def __post_init__(self):
        j = _frozen(self.joints)
        q = _frozen(self.wrist_orientation)
        if j.shape != (N_JOINTS, 3) or not np.all(np.isfinite(j)):
            raise ValueError("joints must be a finite (21, 3) array")
        _check_unit(q, "wrist_orientation")
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "wrist_orientation", q)
        object.__setattr__(self, "active", bool(self.active))


@dataclass(frozen=True)
class HoiFrame:
    left: HandPose
    right: HandPose
    object_translation: np.ndarray
    object_quaternion: np.ndarray

    def __post_init__(self):
        t = _frozen(self.object_translation)
        q = _frozen(self.object_quaternion)
        if t.shape != (3,) or q.shape != (4,):
            raise ValueError("object pose is a 3-vector and a quaternion")
        _check_unit(q, "object_quaternion")
        object.__setattr__(self, "object_translation", t)
        object.__setattr__(self, "object_quaternion", q)


class HoiSequence:
    """Immutable bimanual hand + object trajectory.

    Stored as stacked arrays (one leading frame axis each) rather than a list
    of :class:`HoiFrame`; :attr:`frames` materializes the list view.
    """

    __slots__ = ("left_joints", "left_quat", "right_joints", "right_quat",
                 "obj_trans", "obj_quat", "active", "fps")

    def __init__(self, left_joints, left_quat, right_joints, right_quat,
                 obj_trans, obj_quat, active=None, fps=30, validate=True):
        lj = _frozen(left_joints)
        n = lj.shape[0] if lj.ndim == 3 else 0
        if n == 0:
            raise ValueError("sequence must contain at least one frame")
        if active is None:
            active = np.ones((n, 2), dtype=bool)
        fields = dict(
            left_joints=lj,
            left_quat=_frozen(left_quat),
            right_joints=_frozen(right_joints),
            right_quat=_frozen(right_quat),
            obj_trans=_frozen(obj_trans),
            obj_quat=_frozen(obj_quat),
            active=_frozen(active, dtype=bool),
        )
        shapes = dict(left_joints=(n, N_JOINTS, 3), left_quat=(n, 4),
                      right_joints=(n, N_JOINTS, 3), right_quat=(n, 4),
                      obj_trans=(n, 3), obj_quat=(n, 4), active=(n, 2))
        for name, shape in shapes.items():
            if fields[name].shape != shape:
                raise ValueError(f"{name} has shape {fields[name].shape}, expected {shape}")
        if int(fps) != fps or fps <= 0:
            raise ValueError("fps must be a positive integer")
        if validate:
            for name in ("left_joints", "right_joints", "obj_trans"):
                if not np.all(np.isfinite(fields[name])):
                    raise ValueError(f"{name} contains non-finite values")
            for name in ("left_quat", "right_quat", "obj_quat"):
                _check_unit(fields[name], name)
        for name, value in fields.items():
            object.__setattr__(self, name, value)
        object.__setattr__(self, "fps", int(fps))

    def __setattr__(self, name, value):
        raise AttributeError("HoiSequence is immutable")

    def __reduce__(self):
        return (_rebuild_sequence, (self.left_joints, self.left_quat, self.right_joints,
                                    self.right_quat, self.obj_trans, self.obj_quat, self.active, self.fps))

    def __len__(self):
        return self.left_joints.shape[0]

    @property
    def n_frames(self):
        return len(self)

    @property
    def flat_dim(self):
        return len(self) * FRAME_DIM

    @property
    def joints(self):
        """All hand joints, shape ``(n_frames, 42, 3)``; left hand first."""
        return np.concatenate([self.left_joints, self.right_joints], axis=1)

    @property
    def frames(self):
        return [self.frame(i) for i in range(len(self))]

    def frame(self, i):
        return HoiFrame(
            left=HandPose(self.left_joints[i], self.left_quat[i], self.active[i, 0]),
            right=HandPose(self.right_joints[i], self.right_quat[i], self.active[i, 1]),
            object_translation=self.obj_trans[i],
            object_quaternion=self.obj_quat[i],
        )

    @classmethod
    def from_frames(cls, frames, fps=30):
        frames = list(frames)
        if not frames:
            raise ValueError("sequence must contain at least one frame")
        return cls(
            left_joints=[f.left.joints for f in frames],
            left_quat=[f.left.wrist_orientation for f in frames],
            right_joints=[f.right.joints for f in frames],
            right_quat=[f.right.wrist_orientation for f in frames],
            obj_trans=[f.object_translation for f in frames],
            obj_quat=[f.object_quaternion for f in frames],
            active=[[f.left.active, f.right.active] for f in frames],
            fps=fps,
        )

    def slice(self, start, stop):
        return HoiSequence(self.left_joints[start:stop], self.left_quat[start:stop],
                           self.right_joints[start:stop], self.right_quat[start:stop],
                           self.obj_trans[start:stop], self.obj_quat[start:stop],
                           self.active[start:stop], self.fps, validate=False)

    def replace(self, **changes):
        fields = {name: getattr(self, name) for name in self.__slots__}
        fields.update(changes)
        return HoiSequence(**fields)

    def __eq__(self, other):
        if not isinstance(other, HoiSequence):
            return NotImplemented
        return self.fps == other.fps and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in self.__slots__ if n != "fps"
        )

    __hash__ = None

    def __repr__(self):
        return f"HoiSequence(n_frames={len(self)}, fps={self.fps})"


def _rebuild_sequence(*args):
    return HoiSequence(*args, validate=False)


def flatten(seq):
    """Flat float64 vector of length ``n_frames * FRAME_DIM``."""
    if len(seq) == 0:
        raise ValueError("cannot flatten an empty sequence")
    n = len(seq)
    out = np.empty((n, FRAME_DIM))
    out[:, LEFT_JOINTS] = seq.left_joints.reshape(n, -1)
    out[:, LEFT_QUAT] = seq.left_quat
    out[:, RIGHT_JOINTS] = seq.right_joints.reshape(n, -1)
    out[:, RIGHT_QUAT] = seq.right_quat
    out[:, OBJ_TRANS] = seq.obj_trans
    out[:, OBJ_QUAT] = seq.obj_quat
    return out.reshape(-1)


def frame_view(x):
    """Reshape a flat vector (or a batch of them) to ``(..., n_frames, FRAME_DIM)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] % FRAME_DIM:
        raise ValueError(f"length {x.shape[-1]} is not a multiple of {FRAME_DIM}")
    return x.reshape(x.shape[:-1] + (x.shape[-1] // FRAME_DIM, FRAME_DIM))


def split_frames(frames):
    """Named views into a ``(..., n_frames, FRAME_DIM)`` array."""
    lead = frames.shape[:-1]
    return dict(
        left_joints=frames[..., LEFT_JOINTS].reshape(lead + (N_JOINTS, 3)),
        left_quat=frames[..., LEFT_QUAT],
        right_joints=frames[..., RIGHT_JOINTS].reshape(lead + (N_JOINTS, 3)),
        right_quat=frames[..., RIGHT_QUAT],
        obj_trans=frames[..., OBJ_TRANS],
        obj_quat=frames[..., OBJ_QUAT],
    )


def unflatten(x, fps=30, active=None, normalize_quats=False):
    """Inverse of :func:`flatten`.

    ``active`` is an ``(n_frames, 2)`` boolean array (defaults to all True).
    Raw network outputs carry non-unit quaternions; pass
    ``normalize_quats=True`` for those.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0 or x.size % FRAME_DIM:
        raise ValueError(f"flat vector length must be a positive multiple of {FRAME_DIM}")
    parts = split_frames(frame_view(x))
    if normalize_quats:
        from .geometry import qnormalize
        for name in ("left_quat", "right_quat", "obj_quat"):
            parts[name] = qnormalize(parts[name])
    return HoiSequence(active=active, fps=fps, **parts)


def concatenate(seqs):
    seqs = list(seqs)
    fps = seqs[0].fps
    return HoiSequence(*(np.concatenate([getattr(s, n) for s in seqs])
                         for n in HoiSequence.__slots__[:-1]), fps=fps, validate=False)
