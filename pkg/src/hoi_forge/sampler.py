"""Reverse diffusion chains: single sub-tasks, segment batches and long-horizon stitching.

Every chain runs in the denoiser's normalized space. Refinement losses are
evaluated on the physical frames and their gradients pulled back through the
normalizer's linear map. Randomness is per sample: row ``b`` of a
batch owns ``np.random.default_rng(seed_b)`` (or a derived stream for plan
segments and transitions), so batching changes a sample only by float rounding.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import hoi
from .conditioning import SubTask, build_prior
from .denoiser import Normalizer
from .geometry import qconj, qmul, qnormalize, quat_to_matrix
from .guidance import (GuidanceConfig, TransitionSegment, dsg_step, loss_affordance,
                       loss_penetration, loss_transition)

LOG_FIELDS = ("segment", "sample", "t", "l_aff", "l_pen", "l_trans", "grad_norm")


@dataclass
class ScaledDenoiser:
    """A denoiser together with the normalizer that defines its working space."""

    model: object
    normalizer: Normalizer

    @property
    def d(self):
        return self.model.config.d

    @property
    def n_frames(self):
        return self.normalizer.n_frames

    def to_frames(self, z):
        return hoi.frame_view(self.normalizer.to_physical(z))


def clean_frames(frames):
    """Copy of ``frames`` with unit quaternions."""
    out = np.array(frames, dtype=float)
    for sl in (hoi.LEFT_QUAT, hoi.RIGHT_QUAT, hoi.OBJ_QUAT):
        out[..., sl] = qnormalize(out[..., sl])
    return out


def _rngs(seeds, *stream):
    return [np.random.default_rng([int(s), *stream] if stream else int(s)) for s in seeds]


def reverse_chain(net, schedule, cond, config, rngs, phys_loss=None, log=None, segment=0):
    """Run ``t = T .. 1`` for a batch and return physical frames ``(B, n_frames, FRAME_DIM)``.

    ``cond`` is ``(cond_vecs, embed_ids)`` or None. ``phys_loss(b, frames)``
    returns ``(loss, grad, terms)`` for row ``b``; ``log`` (a list) collects
    one dict per guided step and row.
    """
    B, d = len(rngs), net.d
    if cond is not None and np.shape(cond[0])[1] != net.model.config.cond_dim:
        raise ValueError(f"conditioning has {np.shape(cond[0])[1]} features, the model expects "
                         f"{net.model.config.cond_dim} (objects must use the training point count)")
    x = np.stack([r.standard_normal(d) for r in rngs])

    def loss_fn(x0):
        frames = net.to_frames(x0)
        losses = np.zeros(B)
        grads = np.zeros_like(x0)
        terms = {k: np.zeros(B) for k in ("l_aff", "l_pen", "l_trans")}
        for b in range(B):
            l, g, tm = phys_loss(b, frames[b])
            losses[b] = l
            grads[b] = net.normalizer.grad_to_model(g.reshape(-1))
            for k, v in tm.items():
                terms[k][b] = v
        return losses, grads, terms

    for t in range(schedule.T, 0, -1):
        noise = np.stack([r.standard_normal(d) for r in rngs]) if t > 1 else None
        x, info = dsg_step(net.model, schedule, x, t, cond, config, noise,
                           loss_fn if phys_loss is not None else None)
        if log is not None and info.terms:
            for b in range(B):
                log.append(dict(segment=segment, sample=b, t=t,
                                **{k: float(info.terms[k][b]) for k in ("l_aff", "l_pen", "l_trans")},
                                grad_norm=float(info.grad_norm[b])))
    return net.to_frames(x)


def subtask_loss(obj, aff, config, active=None):
    """``lambda_aff * l_aff + lambda_pen * l_pen`` on one physical frame array."""
    active = aff.active if active is None else active

    def fn(b, frames):
        la, ga = loss_affordance(frames, obj, aff, active)
        lp, gp = loss_penetration(frames, obj)
        return (config.lambda_aff * la + config.lambda_pen * lp,
                config.lambda_aff * ga + config.lambda_pen * gp,
                dict(l_aff=la, l_pen=lp))
    return fn


def _cond_arrays(prior, B):
    return np.tile(prior.cond_vector, (B, 1)), np.full(B, prior.embedding_id)


def _active_flags(subtask, n):
    return np.tile(np.array(subtask.active, dtype=bool), (n, 1))


def sample_subtask(net, schedule, prior, obj, config, seeds, subtask=None, log=None, segment=0,
                   fps=30, return_frames=False):
    """Guided samples for one interaction prior, one per seed.

    Returns a list of :class:`HoiSequence` (or the raw ``(B, F, FRAME_DIM)``
    array with ``return_frames``). ``config.guidance_rate = 0`` gives the
    unguided sampler.
    """
    seeds = [seeds] if np.isscalar(seeds) else list(seeds)
    loss = subtask_loss(obj, prior.affordance, config) if config.guidance_rate > 0 else None
    frames = reverse_chain(net, schedule, _cond_arrays(prior, len(seeds)), config, _rngs(seeds),
                           loss, log, segment)
    frames = clean_frames(frames)
    if return_frames:
        return frames
    active = None if subtask is None else _active_flags(subtask, frames.shape[1])
    return [hoi.unflatten(f.reshape(-1), fps=fps, active=active) for f in frames]


# -- long horizon -------------------------------------------------------------


def reanchor(frames, trans, quat):
    """Rigidly move ``frames`` so the first object pose becomes ``(trans, quat)``."""
    frames = np.array(frames, dtype=float)
    p = hoi.split_frames(frames)
    q0 = qnormalize(p["obj_quat"][0])
    q_delta = qmul(qnormalize(np.asarray(quat, dtype=float)), qconj(q0))
    rot = quat_to_matrix(q_delta)
    t0 = p["obj_trans"][0].copy()
    out = np.empty_like(frames)
    F = len(frames)
    for sl, key in ((hoi.LEFT_JOINTS, "left_joints"), (hoi.RIGHT_JOINTS, "right_joints")):
        out[:, sl] = ((p[key] - t0) @ rot.T + trans).reshape(F, -1)
    out[:, hoi.OBJ_TRANS] = (p["obj_trans"] - t0) @ rot.T + trans
    for sl, key in ((hoi.LEFT_QUAT, "left_quat"), (hoi.RIGHT_QUAT, "right_quat"), (hoi.OBJ_QUAT, "obj_quat")):
        out[:, sl] = qmul(q_delta, p[key])
    return out


def _plan_subtasks(plan):
    subtasks = list(getattr(plan, "subtasks", plan))
    if not subtasks:
        raise ValueError("plan is empty")
    return subtasks


def sample_segments(net, schedule, plan, obj, config, seeds, affordances=None, pose=None, log=None,
                    prior_builder=build_prior):
    """Independently sampled sub-task segments, re-anchored end to start.

    Returns a list (one entry per sub-task) of ``(n_seeds, F, FRAME_DIM)``
    arrays. Segment ``k`` of seed ``s`` draws from ``default_rng([s, k])``.
    ``prior_builder(obj, aff, subtask, pose)`` makes the conditioning prior;
    guidance always uses the grounded affordance.
    """
    from .planner import ground_affordance

    subtasks = _plan_subtasks(plan)
    seeds = list(seeds)
    segs = []
    for k, sub in enumerate(subtasks):
        sub.check_object(obj)
        if sub.duration_frames != net.n_frames:
            raise ValueError(f"sub-task lasts {sub.duration_frames} frames but the model "
                             f"generates {net.n_frames}")
        aff = affordances[k] if affordances is not None else ground_affordance(obj, sub)
        prior = prior_builder(obj, aff, sub, pose)
        loss = subtask_loss(obj, aff, config) if config.guidance_rate > 0 else None
        frames = clean_frames(reverse_chain(net, schedule, _cond_arrays(prior, len(seeds)), config,
                                            _rngs(seeds, k), loss, log, segment=2 * k))
        if k > 0:
            prev = segs[-1]
            frames = np.stack([reanchor(f, p[-1, hoi.OBJ_TRANS], p[-1, hoi.OBJ_QUAT])
                               for f, p in zip(frames, prev)])
        segs.append(frames)
    return segs


def transition_loss(pre, after, obj, config, window_size=None):
    w = config.window_size if window_size is None else window_size

    def fn(b, frames):
        seg = TransitionSegment(frames, pre[b], after[b], window_size=w)
        lt, gt = loss_transition(seg)
        lp, gp = loss_penetration(frames, obj)
        return (config.lambda_trans * lt + config.lambda_pen * lp,
                config.lambda_trans * gt + config.lambda_pen * gp,
                dict(l_trans=lt, l_pen=lp))
    return fn


def sample_transitions(trans_net, schedule, segments, obj, config, seeds, log=None):
    """One guided transition per seam; ``segments`` as returned by :func:`sample_segments`."""
    if trans_net.n_frames != config.transition_frames:
        raise ValueError(f"transition model generates {trans_net.n_frames} frames, "
                         f"config asks for {config.transition_frames}")
    seeds = list(seeds)
    out = []
    for k in range(len(segments) - 1):
        pre = segments[k][:, -1].copy()
        after = segments[k + 1][:, 0].copy()
        loss = transition_loss(pre, after, obj, config)
        frames = reverse_chain(trans_net, schedule, None, config, _rngs(seeds, k, 1), loss, log,
                               segment=2 * k + 1)
        out.append(clean_frames(frames))
    return out


def stitch(segments, transitions):
    """Interleave segments and transitions along time: ``(n_seeds, total, FRAME_DIM)``."""
    parts = [segments[0]]
    for trans, seg in zip(transitions, segments[1:]):
        parts += [trans, seg]
    return np.concatenate(parts, axis=1)


def hard_concatenate(segments):
    """Baseline without transitions."""
    return np.concatenate(list(segments), axis=1)


def stitched_active(subtasks, transition_frames):
    flags = [_active_flags(subtasks[0], subtasks[0].duration_frames)]
    for prev, sub in zip(subtasks, subtasks[1:]):
        both = np.logical_or(prev.active, sub.active)
        flags += [np.tile(both, (transition_frames, 1)), _active_flags(sub, sub.duration_frames)]
    return np.concatenate(flags)


def synthesize_long_horizon(net, trans_net, schedule, plan, obj, config, seeds, affordances=None,
                            pose=None, log=None, fps=30):
    """Stitched sequences for a whole plan, one per seed."""
    seeds = [seeds] if np.isscalar(seeds) else list(seeds)
    subtasks = _plan_subtasks(plan)
    segs = sample_segments(net, schedule, subtasks, obj, config, seeds, affordances, pose, log)
    trans = sample_transitions(trans_net, schedule, segs, obj, config, seeds, log) if len(segs) > 1 else []
    frames = stitch(segs, trans)
    active = stitched_active(subtasks, config.transition_frames)
    return [hoi.unflatten(f.reshape(-1), fps=fps, active=active) for f in frames]


def guidance_log_csv(log):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in log:
        w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})
    return buf.getvalue()


__all__ = [
    "GuidanceConfig", "ScaledDenoiser", "SubTask", "clean_frames", "guidance_log_csv",
    "hard_concatenate", "reanchor", "reverse_chain", "sample_segments", "sample_subtask",
    "sample_transitions", "stitch", "synthesize_long_horizon",
]
