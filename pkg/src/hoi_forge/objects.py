"""Analytic SDF object models, labeled surface point clouds and affordance maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import IDENTITY_QUAT, qnormalize, quat_to_matrix

PART_NAMES = {0: "body", 1: "cap", 2: "lid", 3: "handle"}
PART_LABELS = {v: k for k, v in PART_NAMES.items()}

PRIMITIVE_KINDS = ("sphere", "box", "cylinder", "capsule")
_FALLBACK_DIR = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class Primitive:
    """One SDF solid in object coordinates.

    ``size`` holds ``(radius,)`` for spheres, half extents for boxes,
    ``(radius, half_height)`` for z-aligned cylinders and capsules (the
    capsule's half_height is the half length of its core segment).
    """

    kind: str
    size: tuple
    part: int
    translation: tuple = (0.0, 0.0, 0.0)
    quaternion: tuple = tuple(IDENTITY_QUAT)

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        n = {"sphere": 1, "box": 3, "cylinder": 2, "capsule": 2}[self.kind]
        size = tuple(float(s) for s in self.size)
        if len(size) != n or min(size) <= 0:
            raise ValueError(f"{self.kind} expects {n} positive size values")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        q = qnormalize(np.asarray(self.quaternion, dtype=float))
        object.__setattr__(self, "quaternion", tuple(float(v) for v in q))
        object.__setattr__(self, "part", int(self.part))

    @property
    def rotation(self):
        return quat_to_matrix(np.asarray(self.quaternion))

    def local_sdf(self, p):
        """SDF and unit gradient for points already in primitive coordinates."""
        if self.kind == "sphere":
            return _sphere(p, *self.size)
        if self.kind == "box":
            return _box(p, np.asarray(self.size))
        if self.kind == "cylinder":
            return _cylinder(p, *self.size)
        return _capsule(p, *self.size)

    def sdf(self, points):
        rot = self.rotation
        local = (points - np.asarray(self.translation)) @ rot
        d, g = self.local_sdf(local)
        return d, g @ rot.T

    def area(self):
        if self.kind == "sphere":
            return 4 * np.pi * self.size[0] ** 2
        if self.kind == "box":
            a, b, c = (2 * s for s in self.size)
            return 2 * (a * b + b * c + a * c)
        r, h = self.size
        if self.kind == "cylinder":
            return 2 * np.pi * r * 2 * h + 2 * np.pi * r * r
        return 2 * np.pi * r * 2 * h + 4 * np.pi * r * r

    def sample_surface(self, n, rng):
        """``n`` points uniformly distributed over this primitive's surface."""
        p = _sample_local(self, n, rng)
        return p @ self.rotation.T + np.asarray(self.translation)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 0, v / safe, _FALLBACK_DIR)


def _sphere(p, r):
    n = np.linalg.norm(p, axis=-1)
    return n - r, _unit(p)


def _box(p, half):
    q = np.abs(p) - half
    outside = np.maximum(q, 0.0)
    out_norm = np.linalg.norm(outside, axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    d = out_norm + inside
    sign = np.where(p < 0, -1.0, 1.0)
    g_out = sign * outside / np.where(out_norm > 0, out_norm, 1.0)[..., None]
    axis = np.argmax(q, axis=-1)
    g_in = np.zeros_like(p)
    np.put_along_axis(g_in, axis[..., None], np.take_along_axis(sign, axis[..., None], -1), -1)
    return d, np.where((out_norm > 0)[..., None], g_out, g_in)


def _cylinder(p, r, h):
    rho = np.linalg.norm(p[..., :2], axis=-1)
    radial = np.zeros_like(p)
    radial[..., :2] = p[..., :2]
    radial = _unit(radial)
    zsign = np.where(p[..., 2] < 0, -1.0, 1.0)
    axial = np.zeros_like(p)
    axial[..., 2] = zsign
    q0 = rho - r
    q1 = np.abs(p[..., 2]) - h
    both = (q0 > 0) & (q1 > 0)
    out_norm = np.hypot(np.maximum(q0, 0), np.maximum(q1, 0))
    d = out_norm + np.minimum(np.maximum(q0, q1), 0.0)
    g_both = (q0[..., None] * radial + q1[..., None] * axial) / np.where(both, out_norm, 1.0)[..., None]
    g_single = np.where((q0 >= q1)[..., None], radial, axial)
    return d, np.where(both[..., None], g_both, g_single)


def _capsule(p, r, h):
    closest = np.zeros_like(p)
    closest[..., 2] = np.clip(p[..., 2], -h, h)
    v = p - closest
    return np.linalg.norm(v, axis=-1) - r, _unit(v)


def _sample_local(prim, n, rng):
    if prim.kind == "sphere":
        v = rng.standard_normal((n, 3))
        return prim.size[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
    if prim.kind == "box":
        half = np.asarray(prim.size)
        face_area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
        probs = np.repeat(face_area, 2) / (2 * face_area.sum())
        face = rng.choice(6, size=n, p=probs)
        p = rng.uniform(-1, 1, (n, 3)) * half
        axis = face // 2
        p[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0) * half[axis]
        return p
    r, h = prim.size
    side = 2 * np.pi * r * 2 * h
    ends = 2 * np.pi * r * r if prim.kind == "cylinder" else 4 * np.pi * r * r
    on_side = rng.random(n) < side / (side + ends)
    theta = rng.uniform(0, 2 * np.pi, n)
    p = np.empty((n, 3))
    p[:, 0] = r * np.cos(theta)
    p[:, 1] = r * np.sin(theta)
    p[:, 2] = rng.uniform(-h, h, n)
    k = np.flatnonzero(~on_side)
    if prim.kind == "cylinder":
        rad = r * np.sqrt(rng.random(k.size))
        p[k, 0] = rad * np.cos(theta[k])
        p[k, 1] = rad * np.sin(theta[k])
        p[k, 2] = np.where(rng.random(k.size) < 0.5, -h, h)
    else:
        v = rng.standard_normal((k.size, 3))
        v = r * v / np.linalg.norm(v, axis=1, keepdims=True)
        v[:, 2] += np.where(v[:, 2] < 0, -h, h)
        p[k] = v
    return p


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Union of SDF primitives plus a labeled surface point cloud (object frame)."""

    primitives: tuple
    points: np.ndarray
    point_parts: np.ndarray
    part_catalog: dict
    name: str = "object"
    kind: str = "custom"

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("an object needs at least one primitive")
        pts = np.array(self.points, dtype=float)
        labels = np.array(self.point_parts, dtype=int)
        if pts.ndim != 2 or pts.shape[1] != 3 or labels.shape != (pts.shape[0],):
            raise ValueError("points must be (N, 3) with one part label each")
        pts.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "point_parts", labels)
        object.__setattr__(self, "part_catalog", {int(k): str(v) for k, v in self.part_catalog.items()})

    @classmethod
    def from_primitives(cls, primitives, n_points=512, rng=None, name="object", kind="custom",
                        surface_tol=1e-4):
        """Sample ``n_points`` surface points of the primitive union."""
        rng = np.random.default_rng(rng)
        primitives = tuple(primitives)
        areas = np.array([p.area() for p in primitives])
        pts, labels = [], []
        have = 0
        while have < n_points:
            want = 2 * (n_points - have) + 16
            counts = rng.multinomial(want, areas / areas.sum())
            for i, (prim, c) in enumerate(zip(primitives, counts)):
                if c == 0:
                    continue
                cand = prim.sample_surface(c, rng)
                d = _union_sdf_only(primitives, cand)
                keep = cand[np.abs(d) < surface_tol]
                pts.append(keep)
                labels.append(np.full(len(keep), prim.part))
                have += len(keep)
        # uniform subset, so later primitives are not starved by truncation
        keep = np.sort(rng.choice(have, size=n_points, replace=False))
        pts = np.concatenate(pts)[keep]
        labels = np.concatenate(labels)[keep]
        catalog = {p.part: PART_NAMES.get(p.part, f"part{p.part}") for p in primitives}
        return cls(primitives, pts, labels, dict(sorted(catalog.items())), name=name, kind=kind)

    @property
    def n_points(self):
        return len(self.points)

    def part_indices(self, part):
        return np.flatnonzero(self.point_parts == int(part))

    def part_label(self, name):
        for label, n in self.part_catalog.items():
            if n == name:
                return label
        raise KeyError(name)


def _union_sdf_only(primitives, points):
    return np.min([p.sdf(points)[0] for p in primitives], axis=0)


def sdf_batch(obj, points):
    """Signed distance, unit gradient and active primitive index for ``(..., 3)`` points.

    Min-combination over primitives, ties resolved toward the lowest index.
    """
    points = np.asarray(points, dtype=float)
    flat = points.reshape(-1, 3)
    best_d = np.full(len(flat), np.inf)
    best_g = np.zeros_like(flat)
    best_i = np.zeros(len(flat), dtype=int)
    for i, prim in enumerate(obj.primitives):
        d, g = prim.sdf(flat)
        better = d < best_d
        best_d = np.where(better, d, best_d)
        best_g = np.where(better[:, None], g, best_g)
        best_i = np.where(better, i, best_i)
    lead = points.shape[:-1]
    return best_d.reshape(lead), best_g.reshape(lead + (3,)), best_i.reshape(lead)


def sdf_query(obj, p):
    """Signed distance (m) and unit gradient at a single point."""
    d, g, _ = sdf_batch(obj, np.asarray(p, dtype=float)[None])
    return float(d[0]), g[0]


@dataclass(frozen=True, eq=False)
class AffordanceMap:
    """Per-point scores in [0, 1] and the active contact region of each hand."""

    scores: np.ndarray
    left_region: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    right_region: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        s = np.array(self.scores, dtype=float)
        if s.ndim != 1 or not np.all((s >= 0) & (s <= 1)):
            raise ValueError("affordance scores must be a 1-D array in [0, 1]")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)
        for name in ("left_region", "right_region"):
            r = np.unique(np.array(getattr(self, name), dtype=int).reshape(-1))
            if r.size and (r.min() < 0 or r.max() >= s.size):
                raise ValueError(f"{name} holds invalid point indices")
            r.setflags(write=False)
            object.__setattr__(self, name, r)

    def region(self, side):
        if side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
        return self.left_region if side == "left" else self.right_region

    @property
    def active(self):
        return (self.left_region.size > 0, self.right_region.size > 0)


def closest_affordance_point(obj, aff, side, p):
    """Index and object-frame position of the nearest active point for ``side``."""
    region = aff.region(side)
    if region.size == 0:
        raise ValueError(f"{side} affordance region is empty")
    pts = obj.points[region]
    d2 = np.sum((pts - np.asarray(p, dtype=float)) ** 2, axis=1)
    k = int(np.argmin(d2))
    return int(region[k]), pts[k].copy()
