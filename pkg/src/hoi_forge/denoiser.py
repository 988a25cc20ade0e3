"""MLP denoiser predicting ``x0`` from ``(x_t, t, C)`` with hand-written backprop.

With ``skip`` enabled the prediction is ``sqrt(abar_t) x_t + sqrt(1 - abar_t) F``
where ``F`` is the MLP output. For unit-variance data this is the minimum
error affine use of ``x_t``, so the prediction follows ``x_t`` at small ``t``
instead of having to learn the identity map. The network sees ``[x_t + positional encoding, time embedding, condition]``
where the condition is either ``cond_proj([cond_vector, embed[id]])`` or the
learned ``null_cond`` vector (classifier-free guidance masking).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.fft import dct, idct
from scipy.special import expit

from . import hoi
from .diffusion import cosine_schedule, forward_diffuse

log = logging.getLogger(__name__)

ACTIVATIONS = ("silu", "tanh", "identity")


@dataclass(frozen=True)
class DenoiserConfig:
    d: int
    hidden_width: int = 512
    n_hidden: int = 4
    time_dim: int = 64
    cond_dim: int = 0
    cond_width: int = 128
    embed_dim: int = 64
    n_embed: int = 1
    activation: str = "silu"
    channels_per_frame: int = hoi.FRAME_DIM
    skip: bool = False
    T: int = 1000
    s0: float = 0.008

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.d <= 0 or self.n_hidden < 1:
            raise ValueError("d and n_hidden must be positive")


def timestep_embedding(t, dim):
    t = np.asarray(t, dtype=float).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def positional_encoding(d, channels_per_frame=hoi.FRAME_DIM, scale=0.1):
    """Frame-level sinusoid per channel plus an agent-level offset per channel block."""
    cpf = channels_per_frame if d % channels_per_frame == 0 else d
    n_frames = d // cpf
    c = np.arange(cpf)
    omega = 10000.0 ** (-(2 * (c // 2)) / cpf)
    ang = np.arange(n_frames)[:, None] * omega[None]
    frame = np.where(c % 2 == 0, np.sin(ang), np.cos(ang))
    if cpf == hoi.FRAME_DIM:
        agent = np.zeros(cpf, dtype=int)
        agent[hoi.RIGHT_JOINTS.start:hoi.OBJ_TRANS.start] = 1
        agent[hoi.OBJ_TRANS.start:] = 2
    else:
        agent = np.zeros(cpf, dtype=int)
    agent_enc = np.sin(agent * omega + 0.5 * np.pi * (c % 2)) - (c % 2)
    return (scale * (frame + agent_enc[None])).reshape(-1)


def _act(name, z):
    if name == "silu":
        return z * expit(z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "silu":
        s = expit(z)
        return s * (1.0 + z * (1.0 - s))
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class DenoiserModel:
    """Parameters live in one flat vector; named arrays are views into it."""

    def __init__(self, config, params=None, rng=None):
        self.config = config
        self._layout = self._build_layout(config)
        self.n_params = sum(int(np.prod(s)) for _, s in self._layout)
        if params is None:
            params = self._init_params(np.random.default_rng(rng))
        params = np.array(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params
        self.pos_enc = positional_encoding(config.d, config.channels_per_frame)
        self._alpha_bar = cosine_schedule(config.T, config.s0).alpha_bar if config.skip else None

    def _skip_coefficients(self, t):
        ab = self._alpha_bar[np.asarray(t, dtype=int) - 1][:, None]
        return np.sqrt(ab), np.sqrt(1.0 - ab)

    @staticmethod
    def _build_layout(c):
        H = c.hidden_width
        layout = [
            ("cond_W", (c.cond_dim + c.embed_dim, c.cond_width)),
            ("cond_b", (c.cond_width,)),
            ("null_cond", (c.cond_width,)),
            ("embed", (c.n_embed, c.embed_dim)),
            ("W0", (c.d + c.time_dim + c.cond_width, H)),
            ("b0", (H,)),
        ]
        for i in range(1, c.n_hidden):
            layout += [(f"W{i}", (H, H)), (f"b{i}", (H,))]
        layout += [("W_out", (H, c.d)), ("b_out", (c.d,))]
        return layout

    def _init_params(self, rng):
        parts = []
        for name, shape in self._layout:
            if name.startswith("W") or name == "cond_W":
                std = 1.0 / math.sqrt(shape[0])
                if name == "W_out":
                    std *= 0.1
                parts.append(rng.standard_normal(shape).ravel() * std)
            elif name in ("embed", "null_cond"):
                parts.append(rng.standard_normal(shape).ravel() * 0.1)
            else:
                parts.append(np.zeros(int(np.prod(shape))))
        return np.concatenate(parts)

    def views(self, flat=None):
        flat = self.params if flat is None else flat
        out, k = {}, 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            out[name] = flat[k:k + n].reshape(shape)
            k += n
        return out

    def copy(self):
        return DenoiserModel(self.config, self.params.copy())

    # -- forward / backward -------------------------------------------------

    def forward(self, x_t, t, cond_vecs=None, embed_ids=None, use_cond=None, cache=False):
        """Batched prediction of ``x0``.

        ``x_t`` is ``(B, d)``; ``t`` a scalar or ``(B,)``. Rows with
        ``use_cond`` False (or all rows when ``cond_vecs`` is None) are routed
        through ``null_cond``.
        """
        c = self.config
        x_t = np.asarray(x_t, dtype=float)
        if x_t.ndim != 2 or x_t.shape[1] != c.d:
            raise ValueError(f"x_t must be (B, {c.d}), got {x_t.shape}")
        B = x_t.shape[0]
        p = self.views()
        t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
        if cond_vecs is None:
            use_cond = np.zeros(B, dtype=bool)
            cond_in = None
            cond = np.broadcast_to(p["null_cond"], (B, c.cond_width))
        else:
            cond_vecs = np.asarray(cond_vecs, dtype=float).reshape(B, c.cond_dim)
            embed_ids = np.broadcast_to(np.asarray(embed_ids if embed_ids is not None else 0, dtype=int), (B,))
            use_cond = np.ones(B, dtype=bool) if use_cond is None else np.asarray(use_cond, dtype=bool)
            cond_in = np.concatenate([cond_vecs, p["embed"][embed_ids]], axis=1)
            proj = cond_in @ p["cond_W"] + p["cond_b"]
            cond = np.where(use_cond[:, None], proj, p["null_cond"])
        h = np.concatenate([x_t + self.pos_enc, timestep_embedding(t, c.time_dim), cond], axis=1)
        acts = [h]
        pre = []
        for i in range(c.n_hidden):
            z = acts[-1] @ p[f"W{i}"] + p[f"b{i}"]
            pre.append(z)
            acts.append(_act(c.activation, z))
        out = acts[-1] @ p["W_out"] + p["b_out"]
        coef = None
        if c.skip:
            coef = self._skip_coefficients(t)
            out = coef[0] * x_t + coef[1] * out
        if cache:
            return out, dict(acts=acts, pre=pre, cond_in=cond_in, embed_ids=embed_ids, use_cond=use_cond,
                             skip=coef)
        return out

    def backward(self, cache, upstream, need_params=True, need_x=True):
        """Reverse-mode gradients for a cached forward pass.

        Returns ``(grad_params, grad_x_t)``; parameter gradients are summed
        over the batch. Either may be None when not requested.
        """
        c = self.config
        p = self.views()
        up = np.asarray(upstream, dtype=float)
        acts, pre = cache["acts"], cache["pre"]
        coef = cache.get("skip")
        g = up if coef is None else coef[1] * up
        grads = np.zeros(self.n_params) if need_params else None
        gp = self.views(grads) if need_params else None
        if need_params:
            gp["W_out"][...] = acts[-1].T @ g
            gp["b_out"][...] = g.sum(axis=0)
        ga = g @ p["W_out"].T
        d_in = c.d + c.time_dim
        grad_x = None
        for i in reversed(range(c.n_hidden)):
            gz = ga * _act_grad(c.activation, pre[i], acts[i + 1])
            if need_params:
                gp[f"W{i}"][...] = acts[i].T @ gz
                gp[f"b{i}"][...] = gz.sum(axis=0)
            if i > 0:
                ga = gz @ p[f"W{i}"].T
            else:
                if need_x:
                    grad_x = gz @ p["W0"][:c.d].T
                    if coef is not None:
                        grad_x += coef[0] * up
                g_cond = gz @ p["W0"][d_in:].T if need_params else None
        if need_params:
            use = cache["use_cond"]
            gp["null_cond"][...] = g_cond[~use].sum(axis=0)
            if cache["cond_in"] is not None and use.any():
                gc = g_cond[use]
                gp["cond_W"][...] = cache["cond_in"][use].T @ gc
                gp["cond_b"][...] = gc.sum(axis=0)
                g_in = gc @ p["cond_W"].T
                np.add.at(gp["embed"], cache["embed_ids"][use], g_in[:, c.cond_dim:])
        return grads, grad_x


def forward(model, x_t, t, cond=None):
    """Single-sample prediction; ``cond`` is an InteractionPrior or None."""
    x = np.asarray(x_t, dtype=float)[None]
    if cond is None:
        return model.forward(x, t)[0]
    return model.forward(x, t, cond.cond_vector[None], [cond.embedding_id])[0]


def backward(model, x_t, t, cond, upstream):
    """Single-sample ``(grad_params, grad_x_t)`` for ``upstream = dL/dx0_hat``."""
    x = np.asarray(x_t, dtype=float)[None]
    if cond is None:
        _, cache = model.forward(x, t, cache=True)
    else:
        _, cache = model.forward(x, t, cond.cond_vector[None], [cond.embedding_id], cache=True)
    gp, gx = model.backward(cache, np.asarray(upstream, dtype=float)[None])
    return gp, gx[0]


# -- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    steps: int = 2000
    cond_mask_prob: float = 0.10
    w_diff: float = 1.0
    w_dist: float = 0.1
    w_orient: float = 0.1
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not 0.0 <= self.cond_mask_prob <= 1.0:
            raise ValueError("cond_mask_prob must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    total: float
    diff: float
    dist: float
    orient: float

    def as_tuple(self):
        return (self.total, self.diff, self.dist, self.orient)


@dataclass
class Normalizer:
    """Linear map between physical flat vectors and the model's unit-scale space.

    With ``n_coeffs`` set, each channel's trajectory over ``n_frames`` frames
    is replaced by its first ``n_coeffs`` orthonormal DCT-II coefficients
    before standardizing. Model samples are then band-limited (smooth in time)
    and the model space shrinks from ``n_frames * C`` to ``n_coeffs * C``.
    Without it the map is a per-dimension affine rescaling.
    """

    mean: np.ndarray
    scale: np.ndarray
    n_frames: int | None = None
    n_coeffs: int | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if self.n_frames is None:
            self.n_frames = self.mean.size // hoi.FRAME_DIM
        if self.n_coeffs is not None and not 0 < self.n_coeffs <= self.n_frames:
            raise ValueError(f"n_coeffs must lie in [1, {self.n_frames}]")

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    @classmethod
    def fit(cls, x, floor=1e-2, n_coeffs=None):
        x = np.asarray(x, dtype=float)
        n_frames = x.shape[-1] // hoi.FRAME_DIM
        coeffs = cls(np.zeros(1), np.ones(1), n_frames, n_coeffs).project(x) if n_coeffs else x
        return cls(coeffs.mean(axis=0), np.maximum(coeffs.std(axis=0), floor), n_frames, n_coeffs)

    @property
    def d(self):
        return self.mean.size

    def _shape(self, x, rows):
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-1] + (rows, -1))

    def project(self, x):
        """Truncated DCT coefficients of physical flat vectors (no standardizing)."""
        c = dct(self._shape(x, self.n_frames), axis=-2, norm="ortho")[..., :self.n_coeffs, :]
        return c.reshape(c.shape[:-2] + (-1,))

    def reconstruct(self, c):
        c = self._shape(c, self.n_coeffs)
        pad = np.zeros(c.shape[:-2] + (self.n_frames - self.n_coeffs, c.shape[-1]))
        x = idct(np.concatenate([c, pad], axis=-2), axis=-2, norm="ortho")
        return x.reshape(x.shape[:-2] + (-1,))

    def to_model(self, x):
        x = self.project(x) if self.n_coeffs else np.asarray(x, dtype=float)
        return (x - self.mean) / self.scale

    def to_physical(self, z):
        c = np.asarray(z, dtype=float) * self.scale + self.mean
        return self.reconstruct(c) if self.n_coeffs else c

    def grad_to_model(self, g):
        """Pull a gradient w.r.t. physical flat vectors back to model space."""
        g = self.project(g) if self.n_coeffs else np.asarray(g, dtype=float)
        return g * self.scale


@dataclass
class TrainingSet:
    """Physical sequences ``(n, n_frames, FRAME_DIM)`` plus conditioning.

    ``window`` < n_frames trains on random temporal crops (used for the
    transition prior).
    """

    frames: np.ndarray
    cond_vecs: np.ndarray | None
    embed_ids: np.ndarray | None
    objects: list
    window: int | None = None
    normalizer: Normalizer | None = None
    n_coeffs: int | None = None
    _gt_dist: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if len(self.frames) == 0:
            raise ValueError("training set is empty")
        if self.window is None:
            self.window = self.frames.shape[1]
        if self.normalizer is None:
            self.normalizer = self._fit_normalizer()

    @property
    def d(self):
        return self.normalizer.d

    def _fit_normalizer(self, floor=1e-2):
        """Mean and spread over every window position of every sequence."""
        n, F, C = self.frames.shape
        W = self.window
        basis = Normalizer(np.zeros(1), np.ones(1), W, self.n_coeffs)
        s1 = s2 = 0.0
        for seq in self.frames:
            wins = np.lib.stride_tricks.sliding_window_view(seq, W, axis=0).transpose(0, 2, 1)
            x = wins.reshape(len(wins), -1)
            if self.n_coeffs:
                x = basis.project(x)
            s1 = s1 + x.sum(axis=0)
            s2 = s2 + (x ** 2).sum(axis=0)
        count = n * (F - W + 1)
        mean = s1 / count
        std = np.sqrt(np.maximum(s2 / count - mean ** 2, 0.0))
        return Normalizer(mean, np.maximum(std, floor), W, self.n_coeffs)

    def batch(self, rng, size):
        idx = rng.integers(0, len(self.frames), size)
        F = self.frames.shape[1]
        off = rng.integers(0, F - self.window + 1, size) if self.window < F else np.zeros(size, dtype=int)
        win = np.stack([self.frames[i, o:o + self.window] for i, o in zip(idx, off)])
        return idx, off, win

    def gt_distances(self, i, off):
        key = (int(i), int(off))
        if key not in self._gt_dist:
            win = self.frames[i, off:off + self.window]
            self._gt_dist[key] = joint_object_distance(win, self.objects[i])[0]
        return self._gt_dist[key]


def joint_object_distance(frames, obj):
    """SDF of every hand joint in the object frame: ``(n_frames, 42)`` plus intermediates."""
    from .geometry import to_local
    from .objects import sdf_batch

    parts = hoi.split_frames(frames)
    joints = np.concatenate([parts["left_joints"], parts["right_joints"]], axis=-2)
    local, rot = to_local(joints, parts["obj_trans"], parts["obj_quat"])
    dist, grad, _ = sdf_batch(obj, local)
    return dist, dict(joints=joints, rot=rot, grad=grad, parts=parts)


def _scatter_pose_grads(shape, g_joints, g_trans, g_quat):
    out = np.zeros(shape)
    out[..., hoi.LEFT_JOINTS] = g_joints[..., :hoi.N_JOINTS, :].reshape(shape[:-1] + (63,))
    out[..., hoi.RIGHT_JOINTS] = g_joints[..., hoi.N_JOINTS:, :].reshape(shape[:-1] + (63,))
    out[..., hoi.OBJ_TRANS] = g_trans
    out[..., hoi.OBJ_QUAT] = g_quat
    return out


def distance_map_loss(pred_frames, gt_dist, obj, tau=0.05):
    """Proximity-weighted squared error of joint-to-surface distances.

    Weight ``exp(-max(gt_dist, 0) / tau)``. Returns the sum over frames and
    joints and its gradient w.r.t. ``pred_frames``.
    """
    from .geometry import to_local_vjp

    dist, aux = joint_object_distance(pred_frames, obj)
    w = np.exp(-np.maximum(gt_dist, 0.0) / tau)
    r = dist - gt_dist
    loss = float(np.sum(w * r * r))
    g_local = (2 * w * r)[..., None] * aux["grad"]
    parts = aux["parts"]
    gj, gt, gq = to_local_vjp(aux["joints"], parts["obj_trans"], parts["obj_quat"], aux["rot"], g_local)
    return loss, _scatter_pose_grads(pred_frames.shape, gj, gt, gq)


def relative_quats(frames):
    from .geometry import qconj, qmul, qnormalize

    parts = hoi.split_frames(frames)
    qo = qnormalize(parts["obj_quat"])
    return [qmul(qconj(qnormalize(parts[k])), qo) for k in ("left_quat", "right_quat")]


def orientation_loss(pred_frames, gt_frames):
    """Sum of squared geodesic angles between predicted and true hand-object relative rotations."""
    from .geometry import normalize_vjp, qconj, qleft_matrix, qright_matrix

    parts = hoi.split_frames(pred_frames)
    gt_rel = relative_quats(gt_frames)
    qo_raw = parts["obj_quat"]
    no = np.maximum(np.linalg.norm(qo_raw, axis=-1, keepdims=True), 1e-12)
    qo = qo_raw / no
    loss = 0.0
    g_qo = np.zeros_like(qo)
    g_hands = {}
    conj = np.array([1.0, -1.0, -1.0, -1.0])
    for key, ref in zip(("left_quat", "right_quat"), gt_rel):
        qh_raw = parts[key]
        nh = np.maximum(np.linalg.norm(qh_raw, axis=-1, keepdims=True), 1e-12)
        qh = qh_raw / nh
        rel = np.einsum("...ij,...j->...i", qleft_matrix(qconj(qh)), qo)
        c = np.sum(rel * ref, axis=-1)
        u = np.minimum(np.abs(c), 1.0)
        theta = 2.0 * np.arccos(u)
        loss += float(np.sum(theta ** 2))
        half_sin = np.sqrt(np.maximum(1.0 - u * u, 0.0))
        ratio = np.where(theta > 1e-6, theta / np.where(half_sin > 0, half_sin, 1.0), 2.0)
        dc = -4.0 * ratio * np.sign(c)
        # c = ref . (conj(qh) (x) qo)
        g_qo += dc[..., None] * np.einsum("...ji,...j->...i", qleft_matrix(qconj(qh)), ref)
        g_conj = dc[..., None] * np.einsum("...ji,...j->...i", qright_matrix(qo), ref)
        g_hands[key] = normalize_vjp(qh, nh, g_conj * conj)
    grad = np.zeros_like(pred_frames)
    grad[..., hoi.LEFT_QUAT] = g_hands["left_quat"]
    grad[..., hoi.RIGHT_QUAT] = g_hands["right_quat"]
    grad[..., hoi.OBJ_QUAT] = normalize_vjp(qo, no, g_qo)
    return loss, grad


def training_losses(model, data, schedule, rng, config, batch=None, return_grad=False):
    """Sampled ``L_total`` and its parts for one minibatch.

    ``L_diff`` is the mean squared error in model space over batch and
    dimensions. ``L_dist`` and ``L_orient`` are per-(frame, joint) and
    per-(frame, hand) means in physical units.
    """
    if batch is None:
        batch = data.batch(rng, config.batch_size)
    idx, off, win = batch
    B = len(idx)
    if B == 0:
        raise ValueError("empty batch")
    norm = data.normalizer
    x0 = norm.to_model(win.reshape(B, -1))
    t = rng.integers(1, schedule.T + 1, B)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t - 1][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    use_cond = rng.random(B) >= config.cond_mask_prob
    if data.cond_vecs is None:
        out, cache = model.forward(x_t, t, cache=True)
    else:
        out, cache = model.forward(x_t, t, data.cond_vecs[idx], data.embed_ids[idx], use_cond, cache=True)
    resid = out - x0
    l_diff = float(np.mean(resid ** 2))
    g = 2.0 * resid / resid.size * config.w_diff

    pred_frames = hoi.frame_view(norm.to_physical(out))
    F = pred_frames.shape[1]
    l_dist = 0.0
    l_orient = 0.0
    g_phys = np.zeros_like(pred_frames)
    n_dist = B * F * 2 * hoi.N_JOINTS
    n_orient = B * F * 2
    for b in range(B):
        gt_d = data.gt_distances(idx[b], off[b])
        ld, gd = distance_map_loss(pred_frames[b], gt_d, data.objects[idx[b]])
        l_dist += ld / n_dist
        g_phys[b] += config.w_dist * gd / n_dist
        lo, go = orientation_loss(pred_frames[b], win[b])
        l_orient += lo / n_orient
        g_phys[b] += config.w_orient * go / n_orient
    g = g + norm.grad_to_model(g_phys.reshape(B, -1))
    total = config.w_diff * l_diff + config.w_dist * l_dist + config.w_orient * l_orient
    losses = LossBreakdown(total, l_diff, l_dist, l_orient)
    if not return_grad:
        return losses
    grads, _ = model.backward(cache, g, need_params=True, need_x=False)
    return losses, grads


class Adam:
    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self._buf = np.empty(n)
        self.k = 0

    def step(self, params, grad):
        """In place; same arithmetic as ``m_hat / (sqrt(v_hat) + eps)`` without temporaries."""
        self.k += 1
        b1, b2, buf = self.beta1, self.beta2, self._buf
        self.m *= b1
        np.multiply(grad, 1 - b1, out=buf)
        self.m += buf
        self.v *= b2
        np.multiply(grad, grad, out=buf)
        buf *= 1 - b2
        self.v += buf
        np.divide(self.v, 1 - b2 ** self.k, out=buf)
        np.sqrt(buf, out=buf)
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= self.lr / (1 - b1 ** self.k)
        params -= buf


class TrainingDiverged(RuntimeError):
    pass


def train(model, data, config, schedule):
    """Adam on sampled minibatches; returns ``(model, loss_curve)``.

    The loss curve is a list of ``(step, L_total, L_diff, L_dist, L_orient)``.
    Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    mc = model.config
    if mc.skip and (mc.T != schedule.T or not np.allclose(cosine_schedule(mc.T, mc.s0).alpha_bar,
                                                          schedule.alpha_bar)):
        raise ValueError("the model's skip coefficients use a different noise schedule")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.n_params, lr=config.learning_rate)
    curve = []
    for step in range(1, config.steps + 1):
        losses, grads = training_losses(model, data, schedule, rng, config, return_grad=True)
        if not np.isfinite(losses.total) or not np.all(np.isfinite(grads)):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: total={losses.total} diff={losses.diff} "
                f"dist={losses.dist} orient={losses.orient}")
        opt.step(model.params, grads)
        curve.append((step,) + losses.as_tuple())
        if config.log_every and step % config.log_every == 0:
            log.info("step %d  L=%.4f  diff=%.4f  dist=%.3g  orient=%.3g", step, *losses.as_tuple())
    return model, curve


def probe_diff_loss(model, data, schedule, n=16, seed=12345):
    """Deterministic ``L_diff`` on a fixed batch, noise and step draw (conditional rows)."""
    rng = np.random.default_rng(seed)
    idx, off, win = data.batch(rng, n)
    x0 = data.normalizer.to_model(win.reshape(n, -1))
    t = rng.integers(1, schedule.T + 1, n)
    x_t = np.stack([forward_diffuse(schedule, x0[i], t[i], rng.standard_normal(x0.shape[1]))
                    for i in range(n)])
    if data.cond_vecs is None:
        out = model.forward(x_t, t)
    else:
        out = model.forward(x_t, t, data.cond_vecs[idx], data.embed_ids[idx])
    return float(np.mean((out - x0) ** 2))
