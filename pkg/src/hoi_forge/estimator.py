"""scikit-learn style wrapper around training, guided sampling and checkpoints."""
from __future__ import annotations

import logging
from dataclasses import asdict

import numpy as np
from sklearn.base import BaseEstimator

from . import __version__, hoi
from . import io as hio
from ._validation import check_frames, check_is_fitted, check_positive_int, check_seeds
from .conditioning import N_EMBED_IDS
from .denoiser import DenoiserConfig, DenoiserModel, Normalizer, TrainConfig, TrainingSet, train
from .diffusion import cosine_schedule
from .guidance import GuidanceConfig
from .sampler import (ScaledDenoiser, _rngs, clean_frames, reverse_chain, sample_subtask,
                      subtask_loss, synthesize_long_horizon)

log = logging.getLogger(__name__)


class HoiDiffusion(BaseEstimator):
    """Conditional motion diffusion model plus an unconditional transition prior.

    ``fit`` takes a :class:`~hoi_forge.synth.Dataset`. After fitting,
    ``predict`` draws one guided sample per record (seed ``random_state + i``),
    ``sample`` draws from a single interaction prior and ``synthesize``
    renders a whole plan with stitched transitions.

    Both models work on truncated per-channel DCT coefficients (``n_coeffs``
    and ``transition_coeffs``; None keeps raw frames), and with ``skip`` their
    ``x0`` prediction includes the ``sqrt(abar_t) x_t`` pass-through.
    """

    def __init__(self, T=1000, s0=0.008, hidden_width=512, n_hidden=4, time_dim=64, cond_width=128,
                 embed_dim=64, activation="silu", skip=True, n_coeffs=16, steps=2000, batch_size=32,
                 learning_rate=1e-3,
                 cond_mask_prob=0.1, w_diff=1.0, w_dist=0.1, w_orient=0.1,
                 transition_frames=30, transition_coeffs=8, transition_width=256, transition_hidden=4,
                 transition_steps=1500, transition_learning_rate=1e-3,
                 cfg_scale=2.5, guidance_rate=0.2, lambda_aff=1.0, lambda_pen=1000.0, lambda_trans=10.0,
                 window_size=5, guide_start=None, guide_end=None, random_state=0):
        self.T = T
        self.s0 = s0
        self.hidden_width = hidden_width
        self.n_hidden = n_hidden
        self.time_dim = time_dim
        self.cond_width = cond_width
        self.embed_dim = embed_dim
        self.activation = activation
        self.skip = skip
        self.n_coeffs = n_coeffs
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.cond_mask_prob = cond_mask_prob
        self.w_diff = w_diff
        self.w_dist = w_dist
        self.w_orient = w_orient
        self.transition_frames = transition_frames
        self.transition_coeffs = transition_coeffs
        self.transition_width = transition_width
        self.transition_hidden = transition_hidden
        self.transition_steps = transition_steps
        self.transition_learning_rate = transition_learning_rate
        self.cfg_scale = cfg_scale
        self.guidance_rate = guidance_rate
        self.lambda_aff = lambda_aff
        self.lambda_pen = lambda_pen
        self.lambda_trans = lambda_trans
        self.window_size = window_size
        self.guide_start = guide_start
        self.guide_end = guide_end
        self.random_state = random_state

    # -- configuration views ------------------------------------------------

    def guidance_config(self, **changes):
        base = dict(cfg_scale=self.cfg_scale, guidance_rate=self.guidance_rate,
                    lambda_aff=self.lambda_aff, lambda_pen=self.lambda_pen,
                    lambda_trans=self.lambda_trans, window_size=self.window_size,
                    transition_frames=self.transition_frames, guide_start=self.guide_start,
                    guide_end=self.guide_end)
        base.update(changes)
        return GuidanceConfig(**base)

    def _train_config(self, steps, lr, batch_size, cond_mask_prob, seed):
        return TrainConfig(batch_size=batch_size, learning_rate=lr, steps=steps,
                           cond_mask_prob=cond_mask_prob, w_diff=self.w_diff, w_dist=self.w_dist,
                           w_orient=self.w_orient, seed=seed)

    # -- fitting -----------------------------------------------------------------

    def fit(self, X, y=None):
        """Train on a :class:`~hoi_forge.synth.Dataset` (``y`` is ignored)."""
        check_positive_int(self.steps, "steps")
        frames = check_frames(X.frames(), frame_dim=hoi.FRAME_DIM)
        priors = X.priors()
        cond = np.stack([p.cond_vector for p in priors])
        ids = np.array([p.embedding_id for p in priors])
        objects = [X.object_of(r) for r in X.records]
        seed = int(self.random_state)
        self.schedule_ = cosine_schedule(self.T, self.s0)

        data = TrainingSet(frames, cond, ids, objects, n_coeffs=self.n_coeffs)
        dcfg = DenoiserConfig(d=data.d, hidden_width=self.hidden_width, n_hidden=self.n_hidden,
                              time_dim=self.time_dim, cond_dim=cond.shape[1],
                              cond_width=self.cond_width, embed_dim=self.embed_dim,
                              n_embed=N_EMBED_IDS, activation=self.activation,
                              skip=self.skip, T=self.T, s0=self.s0)
        model = DenoiserModel(dcfg, rng=np.random.default_rng([seed, 0]))
        tcfg = self._train_config(self.steps, self.learning_rate, self.batch_size,
                                  self.cond_mask_prob, seed)
        log.info("training denoiser: d=%d, %d parameters, %d steps", data.d, model.n_params, self.steps)
        self.model_, self.loss_curve_ = train(model, data, tcfg, self.schedule_)
        self.normalizer_ = data.normalizer

        self.transition_model_ = self.transition_normalizer_ = None
        self.transition_curve_ = []
        if self.transition_steps:
            if self.transition_frames > frames.shape[1]:
                raise ValueError("transition_frames exceeds the sequence length")
            tdata = TrainingSet(frames, None, None, objects, window=self.transition_frames,
                                n_coeffs=self.transition_coeffs)
            tcfg_model = DenoiserConfig(d=tdata.d, hidden_width=self.transition_width,
                                        n_hidden=self.transition_hidden, time_dim=self.time_dim,
                                        activation=self.activation, skip=self.skip, T=self.T, s0=self.s0)
            tmodel = DenoiserModel(tcfg_model, rng=np.random.default_rng([seed, 1]))
            ttcfg = self._train_config(self.transition_steps, self.transition_learning_rate,
                                       self.batch_size, 0.0, seed + 1)
            log.info("training transition prior: d=%d, %d steps", tdata.d, self.transition_steps)
            self.transition_model_, self.transition_curve_ = train(tmodel, tdata, ttcfg, self.schedule_)
            self.transition_normalizer_ = tdata.normalizer
        self.n_frames_ = frames.shape[1]
        self.cond_dim_ = cond.shape[1]
        return self

    # -- sampling ---------------------------------------------------------------

    @property
    def net_(self):
        check_is_fitted(self, "model_")
        return ScaledDenoiser(self.model_, self.normalizer_)

    @property
    def transition_net_(self):
        check_is_fitted(self, "model_")
        if self.transition_model_ is None:
            raise ValueError("this estimator was fitted without a transition prior")
        return ScaledDenoiser(self.transition_model_, self.transition_normalizer_)

    def sample(self, prior, obj, seeds, subtask=None, config=None, log=None, return_frames=False):
        config = config or self.guidance_config()
        return sample_subtask(self.net_, self.schedule_, prior, obj, config, check_seeds(seeds),
                              subtask=subtask, log=log, return_frames=return_frames)

    def predict(self, X, seeds=None, config=None):
        """One sample per record of ``X``, conditioned on that record's prior and object."""
        net = self.net_
        config = config or self.guidance_config()
        priors = X.priors()
        seeds = check_seeds(seeds if seeds is not None
                            else [int(self.random_state) + i for i in range(len(priors))])
        if len(seeds) != len(priors):
            raise ValueError("need one seed per record")
        cond = (np.stack([p.cond_vector for p in priors]), np.array([p.embedding_id for p in priors]))
        loss = None
        if config.guidance_rate > 0:
            fns = [subtask_loss(X.object_of(r), r.plan.aff_markers[0], config) for r in X.records]
            loss = lambda b, frames: fns[b](0, frames)  # noqa: E731
        frames = clean_frames(reverse_chain(net, self.schedule_, cond, config, _rngs(seeds), loss))
        return [hoi.unflatten(f.reshape(-1), fps=r.sequence.fps, active=r.sequence.active)
                for f, r in zip(frames, X.records)]

    def synthesize(self, plan, obj, seeds, config=None, pose=None, log=None):
        config = config or self.guidance_config()
        return synthesize_long_horizon(self.net_, self.transition_net_, self.schedule_, plan, obj,
                                       config, check_seeds(seeds), pose=pose, log=log)

    # -- persistence ---------------------------------------------------------

    def save(self, path, run_config=None):
        check_is_fitted(self, "model_")
        header = {"version": __version__, "params": self.get_params(),
                  "config": run_config if run_config is not None else {},
                  "model": asdict(self.model_.config), "n_frames": self.n_frames_,
                  "cond_dim": self.cond_dim_, "basis": self._basis(self.normalizer_),
                  "transition_basis": (self._basis(self.transition_normalizer_)
                                       if self.transition_model_ is not None else None),
                  "transition_model": (asdict(self.transition_model_.config)
                                       if self.transition_model_ is not None else None)}
        arrays = {"params": self.model_.params, "norm_mean": self.normalizer_.mean,
                  "norm_scale": self.normalizer_.scale}
        if self.transition_model_ is not None:
            arrays.update(trans_params=self.transition_model_.params,
                          trans_mean=self.transition_normalizer_.mean,
                          trans_scale=self.transition_normalizer_.scale)
        hio.write_checkpoint(path, header, arrays)

    @staticmethod
    def _basis(norm):
        return {"n_frames": norm.n_frames, "n_coeffs": norm.n_coeffs}

    @classmethod
    def load(cls, path):
        header, arrays = hio.read_checkpoint(path)
        est = cls(**header["params"])
        est.schedule_ = cosine_schedule(est.T, est.s0)
        est.model_ = DenoiserModel(DenoiserConfig(**header["model"]), arrays["params"])
        est.normalizer_ = Normalizer(arrays["norm_mean"], arrays["norm_scale"], **header.get("basis", {}))
        est.transition_model_ = est.transition_normalizer_ = None
        if header.get("transition_model"):
            est.transition_model_ = DenoiserModel(DenoiserConfig(**header["transition_model"]),
                                                  arrays["trans_params"])
            est.transition_normalizer_ = Normalizer(arrays["trans_mean"], arrays["trans_scale"],
                                                  **(header.get("transition_basis") or {}))
        est.n_frames_ = header["n_frames"]
        est.cond_dim_ = header["cond_dim"]
        est.loss_curve_ = est.transition_curve_ = []
        est.run_config_ = header.get("config", {})
        return est


def estimator_from_config(cfg):
    """Build an unfitted :class:`HoiDiffusion` from a resolved run configuration."""
    m, t, tr, g = cfg["model"], cfg["train"], cfg["transition"], cfg["guidance"]
    return HoiDiffusion(
        T=cfg["schedule"]["T"], s0=cfg["schedule"]["s0"],
        hidden_width=m["hidden_width"], n_hidden=m["n_hidden"], time_dim=m["time_dim"],
        cond_width=m["cond_width"], embed_dim=m["embed_dim"], activation=m["activation"],
        skip=m["skip"], n_coeffs=m["n_coeffs"], transition_coeffs=tr["n_coeffs"],
        steps=t["steps"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
        cond_mask_prob=t["cond_mask_prob"], w_diff=t["w_diff"], w_dist=t["w_dist"],
        w_orient=t["w_orient"], transition_frames=g["transition_frames"],
        transition_width=tr["hidden_width"], transition_hidden=tr["n_hidden"],
        transition_steps=tr["steps"], transition_learning_rate=tr["learning_rate"],
        cfg_scale=g["cfg_scale"], guidance_rate=g["guidance_rate"], lambda_aff=g["lambda_aff"],
        lambda_pen=g["lambda_pen"], lambda_trans=g["lambda_trans"], window_size=g["window_size"],
        guide_start=g["guide_start"], guide_end=g["guide_end"], random_state=cfg["seed"])
