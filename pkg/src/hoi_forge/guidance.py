"""Classifier-free guidance, physical refinement losses and the guided reverse step.

The refinement losses work on physical frame arrays ``(n_frames, FRAME_DIM)``
and return their gradient with the same shape. Nearest-point
correspondences and the active SDF primitive are frozen within one
evaluation, so the returned gradient is exact for the frozen assignment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hoi
from .diffusion import posterior_params
from .geometry import to_local, to_local_vjp
from .objects import sdf_batch


@dataclass
class GuidanceConfig:
    cfg_scale: float = 2.5
    guidance_rate: float = 0.2
    lambda_aff: float = 1.0
    lambda_pen: float = 1000.0
    lambda_trans: float = 10.0
    guide_start: int | None = None
    guide_end: int | None = None
    window_size: int = 5
    transition_frames: int = 30

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if not 0.0 <= self.guidance_rate <= 1.0:
            raise ValueError("guidance_rate must lie in [0, 1]")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")

    def guides(self, t):
        lo = 1 if self.guide_start is None else self.guide_start
        hi = np.inf if self.guide_end is None else self.guide_end
        return lo <= t <= hi


def _as_frames(x):
    if isinstance(x, hoi.HoiSequence):
        x = hoi.flatten(x)
    x = np.asarray(x, dtype=float)
    return x if x.ndim == 2 else hoi.frame_view(x)


# -- classifier-free guidance ------------------------------------------------


def cfg_combine(uncond, cond, s):
    """``uncond + s * (cond - uncond)`` written so s = 0 and s = 1 are exact."""
    return (1.0 - s) * uncond + s * cond


def cfg_predict(model, x_t, t, cond, s, cache=False):
    """Guided ``x0`` prediction for a batch.

    ``cond`` is ``(cond_vecs, embed_ids)`` or None (then the unconditional
    prediction is returned for every ``s``).
    """
    x_t = np.atleast_2d(x_t)
    if cond is None:
        out, c_u = model.forward(x_t, t, cache=True)
        return (out, dict(uncond=c_u, cond=None, s=0.0)) if cache else out
    vecs, ids = cond
    out_u, c_u = model.forward(x_t, t, cache=True)
    out_c, c_c = model.forward(x_t, t, vecs, ids, cache=True)
    out = cfg_combine(out_u, out_c, s)
    return (out, dict(uncond=c_u, cond=c_c, s=s)) if cache else out


def cfg_backward(model, caches, upstream):
    """``d l / d x_t`` through the guided combination."""
    s = caches["s"]
    if caches["cond"] is None:
        return model.backward(caches["uncond"], upstream, need_params=False)[1]
    g = 0.0
    if s != 0:
        g = g + s * model.backward(caches["cond"], upstream, need_params=False)[1]
    if s != 1:
        g = g + (1.0 - s) * model.backward(caches["uncond"], upstream, need_params=False)[1]
    return g


# -- refinement losses -----------------------------------------------------------


def _hand_joints(parts, side):
    return parts["left_joints" if side == "left" else "right_joints"]


def loss_affordance(x0, obj, aff, active=None, contact_joints=hoi.CONTACT_JOINTS, frame_weights=None):
    """Squared distance of contact joints to their nearest active affordance point.

    Summed over active hands, frames and ``contact_joints``. Returns the loss
    and its gradient w.r.t. the frame array.
    """
    frames = _as_frames(x0)
    if active is None:
        active = aff.active
    parts = hoi.split_frames(frames)
    F = frames.shape[0]
    w = np.ones(F) if frame_weights is None else np.asarray(frame_weights, dtype=float)
    cj = list(contact_joints)
    g_joints = np.zeros((F, 2 * hoi.N_JOINTS, 3))
    g_trans = np.zeros((F, 3))
    g_quat = np.zeros((F, 4))
    loss = 0.0
    for h, side in enumerate(("left", "right")):
        if not active[h]:
            continue
        region = aff.region(side)
        if region.size == 0:
            raise ValueError(f"{side} hand is active but its affordance region is empty")
        joints = _hand_joints(parts, side)[:, cj]
        local, rot = to_local(joints, parts["obj_trans"], parts["obj_quat"])
        pts = obj.points[region]
        d2 = (np.sum(local ** 2, axis=-1)[..., None] - 2 * local @ pts.T
              + np.sum(pts ** 2, axis=-1))
        nearest = pts[np.argmin(d2, axis=-1)]
        res = local - nearest
        loss += float(np.sum(w[:, None] * np.sum(res * res, axis=-1)))
        g_local = 2.0 * w[:, None, None] * res
        gj, gt, gq = to_local_vjp(joints, parts["obj_trans"], parts["obj_quat"], rot, g_local)
        g_joints[:, h * hoi.N_JOINTS + np.array(cj)] += gj
        g_trans += gt
        g_quat += gq
    grad = _pose_grad(frames.shape, g_joints, g_trans, g_quat)
    return loss, grad.reshape(np.shape(x0)) if not isinstance(x0, hoi.HoiSequence) else grad.reshape(-1)


def _pose_grad(shape, g_joints, g_trans, g_quat):
    out = np.zeros(shape)
    out[:, hoi.LEFT_JOINTS] = g_joints[:, :hoi.N_JOINTS].reshape(shape[0], -1)
    out[:, hoi.RIGHT_JOINTS] = g_joints[:, hoi.N_JOINTS:].reshape(shape[0], -1)
    out[:, hoi.OBJ_TRANS] = g_trans
    out[:, hoi.OBJ_QUAT] = g_quat
    return out


def penetration_depths(frames, obj, radii=hoi.JOINT_RADII):
    """Per-joint penetration depth ``max(0, r - sdf)``, shape ``(n_frames, 42)``."""
    frames = _as_frames(frames)
    parts = hoi.split_frames(frames)
    joints = np.concatenate([parts["left_joints"], parts["right_joints"]], axis=1)
    local, rot = to_local(joints, parts["obj_trans"], parts["obj_quat"])
    dist, grad, _ = sdf_batch(obj, local)
    r = np.concatenate([radii, radii])
    return np.maximum(0.0, r - dist), dict(joints=joints, local=local, rot=rot, grad=grad, parts=parts)


def loss_penetration(x0, obj, active=(True, True), radii=hoi.JOINT_RADII):
    """Sum of squared joint-sphere penetration depths; pushes centers out along the SDF gradient."""
    frames = _as_frames(x0)
    depth, aux = penetration_depths(frames, obj, radii)
    mask = np.repeat(np.asarray(active, dtype=float), hoi.N_JOINTS)
    depth = depth * mask
    loss = float(np.sum(depth ** 2))
    g_local = -2.0 * depth[..., None] * aux["grad"]
    parts = aux["parts"]
    gj, gt, gq = to_local_vjp(aux["joints"], parts["obj_trans"], parts["obj_quat"], aux["rot"], g_local)
    grad = _pose_grad(frames.shape, gj, gt, gq)
    return loss, grad.reshape(np.shape(x0)) if not isinstance(x0, hoi.HoiSequence) else grad.reshape(-1)


@dataclass(eq=False)
class TransitionSegment:
    """Transition frames between two segments plus copies of their boundary frames."""

    frames: np.ndarray
    boundary_pre: np.ndarray
    boundary_after: np.ndarray
    window_size: int = 5

    def __post_init__(self):
        self.frames = _as_frames(self.frames)
        self.boundary_pre = np.array(self.boundary_pre, dtype=float).reshape(hoi.FRAME_DIM)
        self.boundary_after = np.array(self.boundary_after, dtype=float).reshape(hoi.FRAME_DIM)


def taper_weights(window_size, n_frames):
    """Linear taper ``1, 1 - 1/W, ..., 1/W`` over the first ``W`` frames (clipped to ``n_frames``)."""
    k = np.arange(min(window_size, n_frames))
    return 1.0 - k / window_size


def loss_transition(trans, frames=None):
    """Boundary matching loss and its window-tapered guidance gradient.

    The loss is ``|first - boundary_pre|^2 + |last - boundary_after|^2``.
    The gradient spreads each boundary residual ``2 * (frame - boundary)``
    over the ``window_size`` frames nearest that boundary with linear weights
    (1 at the boundary frame, falling toward 0), so for ``window_size = 1`` it
    is the exact gradient.
    """
    x = trans.frames if frames is None else _as_frames(frames)
    r0 = x[0] - trans.boundary_pre
    r1 = x[-1] - trans.boundary_after
    loss = float(r0 @ r0 + r1 @ r1)
    n = x.shape[0]
    w = taper_weights(trans.window_size, n)
    grad = np.zeros_like(x)
    grad[: w.size] += 2.0 * w[:, None] * r0
    grad[n - w.size:] += 2.0 * w[::-1, None] * r1
    return loss, grad


# -- guided step ------------------------------------------------------------


@dataclass
class StepInfo:
    loss: np.ndarray
    grad_norm: np.ndarray
    fallback: np.ndarray
    terms: dict = field(default_factory=dict)


def dsg_step(model, schedule, x_t, t, cond, config, noise, loss_fn=None):
    """One reverse step with the spherical-Gaussian constrained guidance.

    ``x_t`` and ``noise`` are ``(B, d)`` in model space. ``loss_fn`` maps the
    guided ``x0`` prediction ``(B, d)`` to ``(loss (B,), grad (B, d), terms)``.
    The update ``x_{t-1} - mu_t`` always has norm ``sqrt(d) * sigma_t`` unless
    the mixed direction vanishes, in which case the row falls back to the
    plain ancestral step ``mu_t + sigma_t * eps``.

    At ``t = 1`` the guided prediction is returned as is.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    B, d = x_t.shape
    x0, caches = cfg_predict(model, x_t, t, cond, config.cfg_scale, cache=True)
    mu, sigma = posterior_params(schedule, x_t, x0, t)
    zeros = np.zeros(B)
    if t == 1:
        return x0, StepInfo(zeros, zeros, np.zeros(B, dtype=bool))
    eps = np.atleast_2d(np.asarray(noise, dtype=float))
    w = config.guidance_rate
    loss, grad_x, terms = zeros, np.zeros_like(x_t), {}
    if loss_fn is not None and w > 0 and config.guides(t):
        loss, g0, terms = loss_fn(x0)
        grad_x = cfg_backward(model, caches, g0)
    scale = np.sqrt(d) * sigma
    d_star = -scale * grad_x
    d_sample = sigma * eps
    d_mix = d_sample + w * (d_star - d_sample)
    norm = np.linalg.norm(d_mix, axis=1, keepdims=True)
    fallback = (norm[:, 0] == 0)
    step = np.where(norm > 0, scale * d_mix / np.where(norm > 0, norm, 1.0), d_sample)
    info = StepInfo(np.asarray(loss, dtype=float), np.linalg.norm(grad_x, axis=1), fallback, terms)
    return mu + step, info
