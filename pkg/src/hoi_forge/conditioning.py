"""Sub-task descriptions and the interaction prior that conditions the denoiser."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geometry import IDENTITY_QUAT, quat_to_matrix
from .objects import PART_NAMES, AffordanceMap

OBJECT_FEATURE_DIM = 48
N_PART_SLOTS = 4


class Action(enum.Enum):
    Approach = 0
    Grasp = 1
    Twist = 2
    Lift = 3
    Place = 4
    Release = 5
    Pour = 6
    Push = 7


HANDS = ("left", "right", "both")
N_EMBED_IDS = len(Action) * len(HANDS)


def embedding_id(action, hands):
    return Action(action).value * len(HANDS) + HANDS.index(hands)


@dataclass(frozen=True)
class SubTask:
    action: Action
    target_part: int
    hands: str
    duration_frames: int = 150

    def __post_init__(self):
        object.__setattr__(self, "action", Action[self.action] if isinstance(self.action, str)
                           else Action(self.action))
        if self.hands not in HANDS:
            raise ValueError(f"hands must be one of {HANDS}")
        if int(self.duration_frames) <= 0:
            raise ValueError("duration_frames must be positive")
        object.__setattr__(self, "target_part", int(self.target_part))
        object.__setattr__(self, "duration_frames", int(self.duration_frames))

    @property
    def embedding_id(self):
        return embedding_id(self.action, self.hands)

    @property
    def active(self):
        """(left, right) hand indicator flags."""
        return (self.hands in ("left", "both"), self.hands in ("right", "both"))

    def describe(self):
        part = PART_NAMES.get(self.target_part, str(self.target_part))
        return f"{self.action.name}({part}, {self.hands})"

    def check_object(self, obj):
        if self.target_part not in obj.part_catalog:
            raise KeyError(f"part {self.target_part} not in object part catalog {obj.part_catalog}")


def world_points(obj, pose=None):
    if pose is None:
        return np.array(obj.points)
    trans, quat = pose
    return obj.points @ quat_to_matrix(np.asarray(quat)).T + np.asarray(trans)


def object_features(obj, pose=None):
    """Fixed-width geometric summary of the posed point cloud (48 values)."""
    pts = world_points(obj, pose)
    centroid = pts.mean(axis=0)
    evals = np.linalg.eigvalsh(np.cov((pts - centroid).T))
    feats = [centroid, pts.min(axis=0), pts.max(axis=0), np.sqrt(np.maximum(evals, 0))]
    for label in range(N_PART_SLOTS):
        mask = obj.point_parts == label
        if mask.any():
            p = pts[mask]
            feats += [p.mean(axis=0), p.max(axis=0) - p.min(axis=0), [mask.mean(), 1.0]]
        else:
            feats += [np.zeros(3), np.zeros(3), [0.0, 0.0]]
    rot = quat_to_matrix(np.asarray(pose[1] if pose is not None else IDENTITY_QUAT))
    feats += [rot[:, 2], [len(obj.part_catalog) / N_PART_SLOTS]]
    out = np.concatenate([np.ravel(f) for f in feats])
    assert out.size == OBJECT_FEATURE_DIM
    return out


def affordance_features(obj, aff, pose=None):
    """Scores followed by left/right region centroids (world) and active flags."""
    pts = world_points(obj, pose)
    cents = []
    for region in (aff.left_region, aff.right_region):
        cents.append(pts[region].mean(axis=0) if region.size else np.zeros(3))
    flags = np.array(aff.active, dtype=float)
    return np.concatenate([aff.scores, cents[0], cents[1], flags])


@dataclass(frozen=True, eq=False)
class InteractionPrior:
    """Conditioning bundle: affordance map, sub-task embedding id, object features.

    The sub-task embedding itself is a row of the denoiser's learned table,
    looked up by ``embedding_id``.
    """

    affordance: AffordanceMap
    embedding_id: int
    object_features: np.ndarray
    affordance_features: np.ndarray

    def __post_init__(self):
        for name in ("object_features", "affordance_features"):
            v = np.array(getattr(self, name), dtype=float)
            if v.ndim != 1 or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite vector")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if not 0 <= int(self.embedding_id) < N_EMBED_IDS:
            raise ValueError("embedding_id out of range")
        object.__setattr__(self, "embedding_id", int(self.embedding_id))

    @property
    def cond_vector(self):
        return np.concatenate([self.affordance_features, self.object_features])

    @property
    def cond_dim(self):
        return self.affordance_features.size + self.object_features.size


def build_prior(obj, aff, subtask, pose=None):
    return InteractionPrior(
        affordance=aff,
        embedding_id=subtask.embedding_id,
        object_features=object_features(obj, pose),
        affordance_features=affordance_features(obj, aff, pose),
    )


def uniform_affordance_prior(obj, prior, pose=None):
    """Same prior with the affordance scores flattened to a uniform map."""
    uniform = AffordanceMap(np.ones(obj.n_points), np.arange(obj.n_points), np.arange(obj.n_points))
    feats = affordance_features(obj, uniform, pose)
    feats[-2:] = prior.affordance_features[-2:]
    return InteractionPrior(prior.affordance, prior.embedding_id, prior.object_features, feats)
