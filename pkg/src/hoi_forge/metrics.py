"""Evaluation metrics: pose errors, feature-space distribution metrics, contact physics.

Motion features are deterministic hand-crafted statistics, so FID-style
numbers are only meaningful relative to each other within this package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import hoi
from .geometry import qnormalize, to_local
from .objects import sdf_batch

FEATURE_DIM = 64
JOINT_GROUPS = ((0,),) + hoi.FINGERS
CONTACT_DISTANCE = 0.08


def _frames(seq):
    if isinstance(seq, hoi.HoiSequence):
        return hoi.frame_view(hoi.flatten(seq)), seq.fps
    arr = np.asarray(seq, dtype=float)
    return (arr if arr.ndim == 2 else hoi.frame_view(arr)), 30


def _joints(frames):
    p = hoi.split_frames(frames)
    return np.concatenate([p["left_joints"], p["right_joints"]], axis=1)


# -- pose errors -----------------------------------------------------------------


def mpjpe(pred, gt):
    """Mean per-joint position error in millimeters."""
    a, _ = _frames(pred)
    b, _ = _frames(gt)
    if a.shape != b.shape:
        raise ValueError(f"frame counts differ: {a.shape[0]} vs {b.shape[0]}")
    return float(np.mean(np.linalg.norm(_joints(a) - _joints(b), axis=-1)) * 1000.0)


def fol(pred, gt):
    """Final object location error in meters."""
    a, _ = _frames(pred)
    b, _ = _frames(gt)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sequences must be non-empty")
    return float(np.linalg.norm(a[-1, hoi.OBJ_TRANS] - b[-1, hoi.OBJ_TRANS]))


# -- features ---------------------------------------------------------------------


@dataclass(frozen=True)
class MotionFeatures:
    """Fixed-width (64) kinematic summary of a sequence or window.

    Per hand and joint group (wrist + five fingers): mean and std of speed
    and of acceleration magnitude (48). Per hand: mean and std of pairwise
    fingertip distance (4). Object: net displacement, mean and max speed,
    total rotation angle, mean angular speed (5). Per hand: mean and min
    wrist-to-object distance and the fraction of frames with a fingertip
    within 8 cm of the object origin (6). Mean wrist-to-wrist distance (1).
    """

    values: np.ndarray

    @classmethod
    def of(cls, seq, fps=None):
        frames, f0 = _frames(seq)
        return cls(motion_features(frames, fps or f0))


def motion_features(frames, fps=30):
    frames = np.asarray(frames, dtype=float)
    if len(frames) < 3:
        raise ValueError("need at least 3 frames for motion features")
    J = _joints(frames)
    vel = np.linalg.norm(np.diff(J, axis=0), axis=-1) * fps
    acc = np.linalg.norm(np.diff(J, 2, axis=0), axis=-1) * fps * fps
    feats = []
    for h in range(2):
        for g in JOINT_GROUPS:
            idx = [h * hoi.N_JOINTS + j for j in g]
            v, a = vel[:, idx], acc[:, idx]
            feats += [v.mean(), v.std(), a.mean(), a.std()]
    tips = list(hoi.FINGERTIPS)
    iu = np.triu_indices(len(tips), 1)
    for h in range(2):
        T = J[:, [h * hoi.N_JOINTS + t for t in tips]]
        d = np.linalg.norm(T[:, :, None] - T[:, None], axis=-1)[:, iu[0], iu[1]]
        feats += [d.mean(), d.std()]
    ot = frames[:, hoi.OBJ_TRANS]
    oq = qnormalize(frames[:, hoi.OBJ_QUAT])
    ov = np.linalg.norm(np.diff(ot, axis=0), axis=-1) * fps
    dots = np.clip(np.abs(np.sum(oq[1:] * oq[:-1], axis=-1)), 0.0, 1.0)
    ang = 2.0 * np.arccos(dots)
    rel0 = np.clip(np.abs(oq @ oq[0]), 0.0, 1.0)
    feats += [np.linalg.norm(ot[-1] - ot[0]), ov.mean(), ov.max(), 2.0 * np.arccos(rel0[-1]),
              ang.mean() * fps]
    for h in range(2):
        wd = np.linalg.norm(J[:, h * hoi.N_JOINTS] - ot, axis=-1)
        td = np.linalg.norm(J[:, [h * hoi.N_JOINTS + t for t in tips]] - ot[:, None], axis=-1).min(axis=1)
        feats += [wd.mean(), wd.min(), float(np.mean(td < CONTACT_DISTANCE))]
    feats.append(np.linalg.norm(J[:, 0] - J[:, hoi.N_JOINTS], axis=-1).mean())
    out = np.asarray(feats, dtype=float)
    assert out.size == FEATURE_DIM
    return out


def feature_matrix(seqs):
    return np.stack([MotionFeatures.of(s).values for s in seqs])


# -- distribution metrics ------------------------------------------------------------


def gaussian_stats(feats):
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValueError("need at least 2 feature vectors")
    return feats.mean(axis=0), np.cov(feats, rowvar=False)


def _psd_sqrt(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps=1e-6):
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` with ``S <- S + eps I``.

    ``tr((S1 S2)^(1/2))`` is evaluated as the nuclear norm of
    ``S1^(1/2) S2^(1/2)``: its singular values are the square roots of the
    eigenvalues of ``S1 S2``, without squaring the spectrum first.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    s1 = np.atleast_2d(sigma1).astype(float) + eps * np.eye(mu1.size)
    s2 = np.atleast_2d(sigma2).astype(float) + eps * np.eye(mu2.size)
    tr_sqrt = np.linalg.svd(_psd_sqrt(s1) @ _psd_sqrt(s2), compute_uv=False).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)


def fid_from_features(fa, fb, eps=1e-6):
    return frechet_distance(*gaussian_stats(fa), *gaussian_stats(fb), eps=eps)


def fid(set_a, set_b, eps=1e-6):
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("each set needs at least 2 sequences")
    return fid_from_features(feature_matrix(set_a), feature_matrix(set_b), eps)


def _pair_distance(feats, pairs, rng):
    n = len(feats)
    if 2 * pairs > n:
        raise ValueError(f"{pairs} disjoint pairs need {2 * pairs} samples, got {n}")
    perm = rng.permutation(n)[:2 * pairs]
    a, b = feats[perm[:pairs]], feats[perm[pairs:]]
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def diversity_from_features(feats, pairs=100, rng=None):
    return _pair_distance(np.asarray(feats, dtype=float), pairs, np.random.default_rng(rng))


def diversity(seqs, pairs=100, rng=None):
    """Mean feature distance over ``pairs`` random disjoint pairs."""
    return diversity_from_features(feature_matrix(seqs), pairs, rng)


def mmodality_from_features(groups, pairs=10, rng=None):
    rng = np.random.default_rng(rng)
    if not groups:
        raise ValueError("need at least one prompt group")
    return float(np.mean([_pair_distance(np.asarray(g, dtype=float), pairs, rng) for g in groups]))


def mmodality(groups, pairs=10, rng=None):
    """Within-prompt diversity averaged over prompts; ``groups`` is a list of sequence lists."""
    return mmodality_from_features([feature_matrix(g) for g in groups], pairs, rng)


# -- contact physics ---------------------------------------------------------------


def _ball_offsets(radius, voxel):
    """Sample points of a ball on a body-centered cubic lattice of pitch ``voxel``."""
    n = int(np.ceil(radius / voxel)) + 1
    grids = []
    for shift in (0.0, 0.5):
        g = (np.arange(-n, n + 1) + shift) * voxel
        grids.append(np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3))
    grid = np.concatenate(grids)
    return grid[np.linalg.norm(grid, axis=1) <= radius]


def _local_joints(frames):
    p = hoi.split_frames(frames)
    local, _ = to_local(_joints(frames), p["obj_trans"], p["obj_quat"])
    return local


def joint_depths(seq, obj, radii=hoi.JOINT_RADII):
    """Per-frame, per-joint penetration depth in meters, ``(n_frames, 42)``."""
    frames, _ = _frames(seq)
    d, _, _ = sdf_batch(obj, _local_joints(frames))
    return np.maximum(0.0, np.concatenate([radii, radii]) - d)


def intersection_volume(seq, obj, voxel=0.002, radii=hoi.JOINT_RADII):
    """Mean over frames of the summed joint-sphere volume inside the object (cm^3).

    Each penetrating sphere is sampled on a lattice of pitch ``voxel`` (see
    :func:`_ball_offsets`); the fraction of samples with negative SDF scales
    the exact sphere volume, so a fully embedded sphere counts exactly.
    """
    frames, _ = _frames(seq)
    local = _local_joints(frames)
    d, _, _ = sdf_batch(obj, local)
    r = np.concatenate([radii, radii])
    offsets = {float(x): _ball_offsets(x, voxel) for x in np.unique(r)}
    total = 0.0
    for f, j in zip(*np.nonzero(d < r)):
        cells = local[f, j] + offsets[float(r[j])]
        inside = sdf_batch(obj, cells)[0] < 0
        total += inside.mean() * (4.0 / 3.0) * np.pi * r[j] ** 3
    return float(total / len(frames) * 1e6)


def max_penetration_depth(seq, obj):
    """Largest joint-sphere penetration over the sequence in millimeters."""
    return float(joint_depths(seq, obj).max() * 1000.0)


def mean_penetration_depth(seq, obj):
    """Mean over frames of the deepest joint penetration, in millimeters."""
    return float(joint_depths(seq, obj).max(axis=1).mean() * 1000.0)


def physical_realism(seq, obj, aff, active=None, max_depth=0.002, reach=0.01):
    """Contact-consistency score in [0, 1].

    Contact-phase frames are those where an active hand has a contact joint
    within ``reach`` of the object surface (beyond its radius). The score is
    the fraction of those frames with penetration at most ``max_depth`` and
    every active hand's nearest contact joint within ``reach`` of its
    affordance region. Returns 0.0 when no contact-phase frame exists.
    """
    frames, _ = _frames(seq)
    active = aff.active if active is None else active
    local = _local_joints(frames)
    sd, _, _ = sdf_batch(obj, local)
    depth = np.maximum(0.0, np.concatenate([hoi.JOINT_RADII, hoi.JOINT_RADII]) - sd)
    cj = np.array(hoi.CONTACT_JOINTS)
    near = np.zeros(len(frames), dtype=bool)
    on_aff = np.ones(len(frames), dtype=bool)
    for h, side in enumerate(("left", "right")):
        if not active[h]:
            continue
        idx = h * hoi.N_JOINTS + cj
        near |= np.any(sd[:, idx] - hoi.JOINT_RADII[cj] < reach, axis=1)
        pts = obj.points[aff.region(side)]
        dist = np.linalg.norm(local[:, idx, None] - pts[None, None], axis=-1).min(axis=-1)
        on_aff &= (dist - hoi.JOINT_RADII[cj]).min(axis=1) <= reach
    if not near.any():
        return 0.0
    ok = (depth.max(axis=1) <= max_depth) & on_aff
    return float(ok[near].mean())


# -- smoothness -------------------------------------------------------------------


def window_starts(n_frames, window=30, stride=10):
    if n_frames < window + stride:
        raise ValueError(f"sequence of {n_frames} frames is shorter than two windows")
    return np.arange(0, n_frames - window + 1, stride)


@dataclass(frozen=True, eq=False)
class WindowReference:
    """Gaussian fit of window features over a reference corpus."""

    mean: np.ndarray
    cov: np.ndarray
    window: int = 30
    stride: int = 10

    @classmethod
    def fit(cls, seqs, window=30, stride=10):
        feats = []
        for s in seqs:
            frames, fps = _frames(s)
            for a in window_starts(len(frames), window, stride):
                feats.append(motion_features(frames[a:a + window], fps))
        mu, cov = gaussian_stats(np.stack(feats))
        return cls(mu, cov, window, stride)


def window_scores(seq, reference):
    frames, fps = _frames(seq)
    starts = window_starts(len(frames), reference.window, reference.stride)
    zero = np.zeros_like(reference.cov)
    return np.array([frechet_distance(motion_features(frames[a:a + reference.window], fps), zero,
                                      reference.mean, reference.cov) for a in starts])


def smooth_rate(seq, reference):
    """Largest absolute change of the windowed Frechet curve per second."""
    _, fps = _frames(seq)
    curve = window_scores(seq, reference)
    return float(np.max(np.abs(np.diff(curve))) / (reference.stride / fps))


# -- statistics ----------------------------------------------------------------------


def paired_test(a, b, alternative="less"):
    """Paired t-test of ``a`` against ``b``; ``less`` tests mean(a - b) < 0."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("paired samples must have equal length >= 2")
    if np.allclose(a, b):
        return 0.0, 1.0
    res = stats.ttest_rel(a, b, alternative=alternative)
    return float(res.statistic), float(res.pvalue)


def mean_std(values):
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
