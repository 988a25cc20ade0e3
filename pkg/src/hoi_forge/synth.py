"""Procedural desk-scale HOI episodes: objects with labeled parts and scripted bimanual motion.

Each record is one sub-task episode of ``duration`` frames. Hands follow
keyframes (rest, pre-grasp, contact) joined by cubic Hermite segments with
zero velocity at every key; while a hand is attached it moves rigidly with
the object. Contact joints sit ``radius + 0.5 mm`` off the surface along
the outward normal, and every joint sphere is projected out of the object
after jitter, so the penetration depth of generated data is zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.spatial.transform import Rotation, Slerp

from . import hoi
from .conditioning import Action, SubTask, build_prior
from .geometry import (axis_angle_quat, make_continuous, matrix_to_quat, qmul, to_local,
                       transform_points)
from .objects import PART_LABELS, ObjectModel, Primitive, sdf_batch
from .planner import Plan, ground_affordance

CONTACT_CLEARANCE = 5e-4
PREGRASP_OFFSET = 0.04
CONTACT_RADIUS = 0.05
REST_WRIST = {"left": np.array([-0.05, -0.20, 0.12]), "right": np.array([-0.05, 0.20, 0.12])}
OBJECT_KINDS = ("bottle", "box", "mug", "jar")


class InfeasibleSpec(ValueError):
    pass


# -- objects ------------------------------------------------------------------------


def _ring_handle(cx, ring_r, tube_r, n=6):
    prims = []
    half = ring_r * np.sin(np.pi / n)
    for k in range(n):
        a = 2 * np.pi * (k + 0.5) / n
        center = (cx + ring_r * np.cos(a), 0.0, ring_r * np.sin(a))
        # capsule axis (local z) along the ring tangent in the xz plane
        tangent = np.array([-np.sin(a), 0.0, np.cos(a)])
        rot = Rotation.align_vectors([tangent], [[0.0, 0.0, 1.0]])[0]
        x, y, z, w = rot.as_quat()
        prims.append(Primitive("capsule", (tube_r, half), PART_LABELS["handle"], center, (w, x, y, z)))
    return prims


def object_primitives(kind, scale=1.0):
    """Primitive list of a template object, body bottom resting on ``z = 0``."""
    s = float(scale)
    if s <= 0:
        raise ValueError("scale must be positive")
    body, cap, lid = PART_LABELS["body"], PART_LABELS["cap"], PART_LABELS["lid"]
    if kind == "bottle":
        r, h = 0.035 * s, 0.09 * s
        cr, ch = 0.015 * s, 0.012 * s
        return [Primitive("cylinder", (r, h), body, (0, 0, h)),
                Primitive("cylinder", (cr, ch), cap, (0, 0, 2 * h + ch - 0.002 * s))]
    if kind == "box":
        hx, hy, hz = 0.045 * s, 0.06 * s, 0.04 * s
        return [Primitive("box", (hx, hy, hz), body, (0, 0, hz)),
                Primitive("box", (hx + 0.002 * s, hy + 0.002 * s, 0.006 * s), lid, (0, 0, 2 * hz + 0.004 * s))]
    if kind == "mug":
        r, h = 0.04 * s, 0.05 * s
        handle = _ring_handle(r + 0.018 * s, 0.022 * s, 0.006 * s)
        handle = [Primitive(p.kind, p.size, p.part, (p.translation[0], p.translation[1], p.translation[2] + h),
                            p.quaternion) for p in handle]
        return [Primitive("cylinder", (r, h), body, (0, 0, h))] + handle
    if kind == "jar":
        r, h = 0.045 * s, 0.05 * s
        return [Primitive("cylinder", (r, h), body, (0, 0, h)),
                Primitive("cylinder", (r + 0.002 * s, 0.008 * s), lid, (0, 0, 2 * h + 0.006 * s))]
    raise ValueError(f"unknown object kind {kind!r}; expected one of {OBJECT_KINDS}")


def make_object(kind, scale=1.0, rng=None, n_points=512, name=None):
    return ObjectModel.from_primitives(object_primitives(kind, scale), n_points=n_points, rng=rng,
                                       name=name or f"{kind}", kind=kind)


# Sub-task catalogue per object kind: (action, part, hands).
TASKS = {
    "bottle": [("Grasp", "cap", "both"), ("Twist", "cap", "right"), ("Lift", "body", "right"),
               ("Grasp", "body", "right"), ("Pour", "body", "right"), ("Place", "body", "right"),
               ("Release", "body", "right"), ("Push", "body", "right"), ("Approach", "body", "right"),
               ("Lift", "body", "both")],
    "box": [("Grasp", "lid", "right"), ("Lift", "lid", "right"), ("Lift", "body", "both"),
            ("Push", "body", "right"), ("Grasp", "body", "both"), ("Place", "body", "both"),
            ("Release", "lid", "right"), ("Approach", "lid", "right")],
    "mug": [("Grasp", "handle", "right"), ("Lift", "handle", "right"), ("Pour", "handle", "right"),
            ("Place", "handle", "right"), ("Release", "handle", "right"), ("Lift", "body", "left"),
            ("Push", "body", "right"), ("Approach", "handle", "right")],
    "jar": [("Grasp", "lid", "both"), ("Twist", "lid", "right"), ("Lift", "lid", "right"),
            ("Lift", "body", "both"), ("Grasp", "body", "left"), ("Place", "body", "both"),
            ("Release", "lid", "right")],
}


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one family of episodes."""

    kind: str = "bottle"
    scale_range: tuple = (0.9, 1.1)
    xy_range: float = 0.03
    yaw_range: float = 0.5
    task: tuple | None = None
    noise: float = 0.0
    duration: int = 150

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {self.kind!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale range must be positive and ordered")
        if self.noise < 0:
            raise ValueError("noise amplitude must be >= 0")
        if self.duration < 20:
            raise ValueError("duration must be at least 20 frames")
        if self.task is not None:
            object.__setattr__(self, "task", tuple(self.task))

    def to_dict(self):
        return dict(kind=self.kind, scale_range=list(self.scale_range), xy_range=self.xy_range,
                    yaw_range=self.yaw_range, task=list(self.task) if self.task else None,
                    noise=self.noise, duration=self.duration)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scale_range"] = tuple(d.get("scale_range", (0.9, 1.1)))
        if d.get("task") is not None:
            d["task"] = tuple(d["task"])
        return cls(**d)


# -- hands --------------------------------------------------------------------------

# Right hand in its own frame: x toward the fingers, y toward the thumb,
# z out of the back of the hand.
_RIGHT_TEMPLATE = np.array([
    [0.000, 0.000, 0.000],
    [0.025, 0.025, -0.010], [0.045, 0.040, -0.015], [0.065, 0.050, -0.020], [0.085, 0.055, -0.022],
    [0.090, 0.025, 0.000], [0.130, 0.027, 0.000], [0.155, 0.028, 0.000], [0.175, 0.029, 0.000],
    [0.095, 0.008, 0.000], [0.140, 0.008, 0.000], [0.168, 0.008, 0.000], [0.190, 0.008, 0.000],
    [0.090, -0.010, 0.000], [0.130, -0.011, 0.000], [0.155, -0.012, 0.000], [0.175, -0.013, 0.000],
    [0.080, -0.027, 0.000], [0.112, -0.030, 0.000], [0.132, -0.032, 0.000], [0.148, -0.034, 0.000],
])


def hand_template(side):
    return _RIGHT_TEMPLATE * (np.array([1.0, -1.0, 1.0]) if side == "left" else 1.0)


def wrist_quaternion(joints):
    """Hand orientation read off the joint layout (``(..., 21, 3)`` to ``(..., 4)``)."""
    j = np.asarray(joints, dtype=float)
    x = j[..., 9, :] - j[..., 0, :]
    side = j[..., 5, :] - j[..., 17, :]
    x = x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    z = np.cross(x, side)
    zn = np.linalg.norm(z, axis=-1, keepdims=True)
    fallback = np.cross(x, np.array([0.0, 0.0, 1.0]))
    z = np.where(zn > 1e-9, z / np.maximum(zn, 1e-12), fallback)
    z = z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-12)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=-1)
    return matrix_to_quat(rot)


def project_out(obj, local, radii, iters=20):
    """Move object-frame joint centers outward until ``sdf >= radius``."""
    p = np.array(local, dtype=float)
    for _ in range(iters):
        d, g, _ = sdf_batch(obj, p)
        short = radii - d
        if not np.any(short > 0):
            break
        p = p + np.maximum(short, 0.0)[..., None] * g + (short > 0)[..., None] * 1e-6 * g
    return p


def _fps(points, start, k):
    chosen = [start]
    d = np.linalg.norm(points - points[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def contact_config(obj, region, anchor_hint_local, side):
    """Object-frame joints of a hand grasping ``region``: wrist + 5 tips on the surface."""
    if region.size == 0:
        raise InfeasibleSpec(f"{side} hand has an empty affordance region")
    pts = obj.points[region]
    # only spots where a sphere resting on the surface touches no other face
    _, pts_n, _ = sdf_batch(obj, pts)
    lift = hoi.JOINT_RADIUS + CONTACT_CLEARANCE
    clear = sdf_batch(obj, pts + lift * pts_n)[0] >= hoi.JOINT_RADIUS
    pts, pts_n = pts[clear], pts_n[clear]
    if len(pts) == 0:
        raise InfeasibleSpec(f"contact region for the {side} hand has no exposed points")
    a = int(np.argmin(np.linalg.norm(pts - anchor_hint_local, axis=1)))
    dist = np.linalg.norm(pts - pts[a], axis=1)
    near = np.flatnonzero(dist <= CONTACT_RADIUS)
    if len(near) < 6:  # sparse clouds: widen to the six closest exposed points
        near = np.sort(np.argsort(dist, kind="stable")[:6])
    cand = pts[near]
    extent = np.ptp(cand, axis=0).max()
    if len(cand) < 6 or extent < 0.02:
        raise InfeasibleSpec(f"contact region for the {side} hand is smaller than the finger spacing "
                             f"({len(cand)} points, extent {extent * 100:.1f} cm)")
    order = _fps(cand, int(np.flatnonzero(near == a)[0]), 6)
    surf, normals = cand[order], pts_n[near][order]
    radii = np.array([hoi.JOINT_RADII[0]] + [hoi.JOINT_RADII[t] for t in hoi.FINGERTIPS])
    targets = surf + (radii + CONTACT_CLEARANCE)[:, None] * normals
    joints = np.zeros((hoi.N_JOINTS, 3))
    joints[hoi.WRIST] = targets[0]
    for f, tip in enumerate(hoi.FINGERTIPS):
        joints[tip] = targets[f + 1]
        n = normals[0] + normals[f + 1]
        n = n / max(np.linalg.norm(n), 1e-9)
        span = targets[f + 1] - targets[0]
        bulge = 0.015 + 0.25 * np.linalg.norm(span)
        for j, u in zip(hoi.FINGERS[f][:3], (0.35, 0.6, 0.8)):
            joints[j] = targets[0] + u * span + bulge * np.sin(np.pi * u) * n
    chain = [j for f in hoi.FINGERS for j in f[:3]]
    joints[chain] = project_out(obj, joints[chain], hoi.JOINT_RADII[chain])
    return joints, normals[0]


def pregrasp_config(obj, contact, normal):
    pre = contact + PREGRASP_OFFSET * normal
    tips = list(hoi.FINGERTIPS)
    centroid = pre[tips].mean(axis=0)
    pre[tips] += 0.3 * (pre[tips] - centroid)
    return project_out(obj, pre, hoi.JOINT_RADII)


def rest_config(side):
    """Open hand beside the object, palm down, fingers along +x."""
    return hand_template(side) + REST_WRIST[side]


# -- object motion ---------------------------------------------------------------


def _smooth_keys(frames, keys, n):
    """Hermite interpolation with zero velocity at every key, held constant outside."""
    frames = np.asarray(frames, dtype=float)
    keys = np.asarray(keys, dtype=float)
    flat = keys.reshape(len(keys), -1)
    t = np.arange(n, dtype=float)
    if len(frames) == 1:
        return np.broadcast_to(flat[0], (n, flat.shape[1])).reshape((n,) + keys.shape[1:]).copy()
    spline = CubicHermiteSpline(frames, flat, np.zeros_like(flat))
    out = spline(np.clip(t, frames[0], frames[-1]))
    return out.reshape((n,) + keys.shape[1:])


def _smooth_rotations(frames, quats, n):
    frames = np.asarray(frames, dtype=float)
    t = np.clip(np.arange(n, dtype=float), frames[0], frames[-1])
    seg = np.clip(np.searchsorted(frames, t, side="right") - 1, 0, len(frames) - 2)
    u = (t - frames[seg]) / (frames[seg + 1] - frames[seg])
    u = 3 * u * u - 2 * u ** 3
    warped = frames[seg] + u * (frames[seg + 1] - frames[seg])
    rots = Rotation.from_quat(np.asarray(quats)[:, [1, 2, 3, 0]])
    q = Slerp(frames, rots)(warped).as_quat()[:, [3, 0, 1, 2]]
    return make_continuous(q * np.where(q[:, :1] < 0, -1.0, 1.0))


def _phase_frames(n):
    f = lambda x: int(round(x * (n - 1)))
    return dict(pre=f(0.25), contact=f(0.40), move0=f(0.45), move1=f(0.85),
                grasp_pre=f(0.35), grasp_contact=f(0.60), approach=f(0.60),
                rel_hold=f(0.15), rel_pre=f(0.45), rel_rest=f(0.80))


def object_trajectory(action, pose0, n, rng, hand_dir):
    """Object translation ``(n, 3)`` and quaternion ``(n, 4)`` over the episode."""
    t0, q0 = np.asarray(pose0[0], dtype=float), np.asarray(pose0[1], dtype=float)
    ph = _phase_frames(n)
    a, b = ph["move0"], ph["move1"]
    tk, qk, fk = [t0, t0], [q0, q0], [0, a]
    up = np.array([0.0, 0.0, 1.0])
    if action == Action.Lift:
        tk.append(t0 + rng.uniform(0.12, 0.18) * up)
        qk.append(q0)
        fk.append(b)
    elif action == Action.Twist:
        tk.append(t0)
        qk.append(qmul(axis_angle_quat(up, np.pi / 2), q0))
        fk.append(b)
    elif action == Action.Place:
        ang = rng.uniform(-np.pi, np.pi)
        shift = rng.uniform(0.10, 0.15) * np.array([np.cos(ang), np.sin(ang), 0.0])
        m1, m2 = a + (b - a) // 3, a + 2 * (b - a) // 3
        tk += [t0 + 0.03 * up, t0 + shift + 0.03 * up, t0 + shift]
        qk += [q0, q0, q0]
        fk += [m1, m2, b]
    elif action == Action.Pour:
        m = a + (b - a) // 2
        lift = t0 + rng.uniform(0.08, 0.12) * up
        axis = np.cross(up, hand_dir)
        axis = axis / max(np.linalg.norm(axis), 1e-9)
        tk += [lift, lift]
        qk += [q0, qmul(axis_angle_quat(axis, np.deg2rad(rng.uniform(80, 110))), q0)]
        fk += [m, b]
    elif action == Action.Push:
        d = -np.array([hand_dir[0], hand_dir[1], 0.0])
        d = d / max(np.linalg.norm(d), 1e-9)
        tk.append(t0 + rng.uniform(0.10, 0.15) * d)
        qk.append(q0)
        fk.append(b)
    trans = _smooth_keys(fk, np.array(tk), n)
    if len(fk) > 2 and any(not np.allclose(q, q0) for q in qk):
        quat = _smooth_rotations(fk, np.array(qk), n)
    else:
        quat = np.tile(q0, (n, 1))
    return trans, quat


# -- episodes -----------------------------------------------------------------------


def generate_episode(obj, subtask, pose0, rng, noise=0.0, aff=None):
    """One ``(n_frames, FRAME_DIM)`` episode for ``subtask`` on ``obj`` starting at ``pose0``."""
    subtask.check_object(obj)
    aff = ground_affordance(obj, subtask) if aff is None else aff
    n = subtask.duration_frames
    act = subtask.action
    trans0, quat0 = np.asarray(pose0[0], dtype=float), np.asarray(pose0[1], dtype=float)
    center = transform_points(obj.points, trans0, quat0).mean(axis=0)
    active_dirs = [REST_WRIST[s] - center for s, on in zip(("left", "right"), subtask.active) if on]
    hand_dir = np.mean(active_dirs, axis=0)
    obj_t, obj_q = object_trajectory(act, (trans0, quat0), n, rng, hand_dir)
    ph = _phase_frames(n)

    hands = {}
    for side, on in zip(("left", "right"), subtask.active):
        rest = rest_config(side)
        if not on:
            hands[side] = np.tile(rest, (n, 1, 1))
            continue
        rot0 = Rotation.from_quat(quat0[[1, 2, 3, 0]])
        hint = rot0.inv().apply(REST_WRIST[side] - trans0)
        contact, normal = contact_config(obj, aff.region(side), hint, side)
        pre = pregrasp_config(obj, contact, normal)
        world = lambda local, k: transform_points(local, obj_t[k], obj_q[k])
        if act == Action.Approach:
            keys = [(0, rest), (ph["approach"], world(pre, 0))]
            attached = None
        elif act == Action.Release:
            keys = [(ph["rel_hold"], world(contact, 0)), (ph["rel_pre"], world(pre, 0)),
                    (ph["rel_rest"], rest)]
            attached = (0, ph["rel_hold"])
        elif act == Action.Grasp:
            keys = [(0, rest), (ph["grasp_pre"], world(pre, 0)), (ph["grasp_contact"], world(contact, 0))]
            attached = (ph["grasp_contact"], n - 1)
        else:
            keys = [(0, rest), (ph["pre"], world(pre, 0)), (ph["contact"], world(contact, 0))]
            attached = (ph["contact"], n - 1)
        seq = _smooth_keys([k for k, _ in keys], np.stack([v for _, v in keys]), n)
        if attached is not None:
            lo, hi = attached
            for k in range(lo, hi + 1):
                seq[k] = world(contact, k)
        hands[side] = seq

    if noise > 0:
        for side in ("left", "right"):
            hands[side] = hands[side] + rng.normal(0.0, noise, (hoi.N_JOINTS, 3))
    for side in ("left", "right"):
        local = _to_object(hands[side], obj_t, obj_q)
        local = project_out(obj, local, hoi.JOINT_RADII)
        hands[side] = transform_points(local, obj_t, obj_q)

    frames = np.zeros((n, hoi.FRAME_DIM))
    frames[:, hoi.LEFT_JOINTS] = hands["left"].reshape(n, -1)
    frames[:, hoi.RIGHT_JOINTS] = hands["right"].reshape(n, -1)
    frames[:, hoi.LEFT_QUAT] = make_continuous(wrist_quaternion(hands["left"]))
    frames[:, hoi.RIGHT_QUAT] = make_continuous(wrist_quaternion(hands["right"]))
    frames[:, hoi.OBJ_TRANS] = obj_t
    frames[:, hoi.OBJ_QUAT] = obj_q
    return frames


def _to_object(points, trans, quat):
    return to_local(points, trans, quat)[0]


# -- datasets -----------------------------------------------------------------------


@dataclass(eq=False)
class Record:
    sequence: hoi.HoiSequence
    object_id: int
    plan: Plan
    pose0: tuple

    @property
    def subtask(self):
        return self.plan.subtasks[0]


@dataclass(eq=False)
class Dataset:
    records: list
    objects: list
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def object_of(self, rec):
        return self.objects[rec.object_id]

    def priors(self):
        return [build_prior(self.object_of(r), r.plan.aff_markers[0], r.subtask, r.pose0) for r in self.records]

    def frames(self):
        return np.stack([hoi.frame_view(hoi.flatten(r.sequence)) for r in self.records])

    def subset(self, record_idx):
        return Dataset([self.records[i] for i in record_idx], self.objects, dict(self.config))


def random_pose(spec, rng):
    xy = rng.uniform(-spec.xy_range, spec.xy_range, 2)
    yaw = rng.uniform(-spec.yaw_range, spec.yaw_range)
    return np.array([xy[0], xy[1], 0.0]), axis_angle_quat(np.array([0.0, 0.0, 1.0]), yaw)


def generate_dataset(specs, count, seed=0, records_per_object=4, n_points=512):
    """``count`` episodes cycling through ``specs``; ``records_per_object`` share an instance.

    Object instance ``j`` uses spec ``j % len(specs)`` and draws from
    ``default_rng([seed, 0, j])``; record ``i`` draws from
    ``default_rng([seed, 1, i])``.
    """
    specs = [s if isinstance(s, SceneSpec) else SceneSpec(**s) for s in specs]
    if count < 1:
        raise ValueError("count must be >= 1")
    if not specs:
        raise ValueError("need at least one scene spec")
    n_obj = -(-count // records_per_object)
    objects, obj_spec = [], []
    for j in range(n_obj):
        spec = specs[j % len(specs)]
        rng = np.random.default_rng([seed, 0, j])
        scale = rng.uniform(*spec.scale_range)
        objects.append(make_object(spec.kind, scale, rng, n_points, name=f"{spec.kind}-{j:04d}"))
        obj_spec.append(spec)
    records = []
    for i in range(count):
        j = i // records_per_object
        spec, obj = obj_spec[j], objects[j]
        rng = np.random.default_rng([seed, 1, i])
        if spec.task is not None:
            action, part, hands = spec.task
        else:
            action, part, hands = TASKS[spec.kind][int(rng.integers(len(TASKS[spec.kind])))]
        sub = SubTask(Action[action], PART_LABELS[part], hands, spec.duration)
        aff = ground_affordance(obj, sub)
        pose0 = random_pose(spec, rng)
        frames = generate_episode(obj, sub, pose0, rng, spec.noise, aff)
        active = np.tile(np.array(sub.active), (sub.duration_frames, 1))
        seq = hoi.unflatten(frames.reshape(-1), active=active)
        plan = Plan((sub,), f"{action.lower()} the {part} with {hands} hand{'s' if hands == 'both' else ''}",
                    (aff,))
        records.append(Record(seq, j, plan, pose0))
    cfg = dict(specs=[s.to_dict() for s in specs], count=count, seed=seed,
               records_per_object=records_per_object, n_points=n_points)
    return Dataset(records, objects, cfg)


def split_dataset(dataset, ratio=0.8, seed=0):
    """Split by object instance: test objects never appear in training."""
    used = sorted({r.object_id for r in dataset.records})
    if len(used) < 5:
        raise ValueError(f"need at least 5 object instances to split, got {len(used)}")
    perm = np.random.default_rng(seed).permutation(used)
    n_train = int(round(ratio * len(used)))
    n_train = min(max(n_train, 1), len(used) - 1)
    train_ids = set(int(i) for i in perm[:n_train])
    tr = [i for i, r in enumerate(dataset.records) if r.object_id in train_ids]
    te = [i for i, r in enumerate(dataset.records) if r.object_id not in train_ids]
    return dataset.subset(tr), dataset.subset(te)
