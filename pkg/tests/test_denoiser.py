import numpy as np
import pytest

from hoi_forge import denoiser as Dn, hoi
from hoi_forge.conditioning import N_EMBED_IDS
from hoi_forge.diffusion import cosine_schedule

from conftest import random_frames
from oracles import central_diff, rel_error


def _inputs(model, B=3, seed=0):
    rng = np.random.default_rng(seed)
    c = model.config
    return (rng.standard_normal((B, c.d)), rng.integers(1, 1000, B), rng.standard_normal((B, c.cond_dim)),
            rng.integers(0, c.n_embed, B), np.array([True, False, True][:B]))


def test_backward_input_gradient(tiny_model):
    x, t, cv, ids, use = _inputs(tiny_model)
    up = np.random.default_rng(1).standard_normal(x.shape)
    _, cache = tiny_model.forward(x, t, cv, ids, use, cache=True)
    _, gx = tiny_model.backward(cache, up)
    num = central_diff(lambda z: float(np.sum(tiny_model.forward(z, t, cv, ids, use) * up)), x)
    assert rel_error(gx, num) < 1e-6


def test_backward_parameter_gradient(tiny_model):
    m = tiny_model.copy()
    x, t, cv, ids, use = _inputs(m, seed=2)
    up = np.random.default_rng(3).standard_normal(x.shape)
    _, cache = m.forward(x, t, cv, ids, use, cache=True)
    gp, _ = m.backward(cache, up, need_x=False)
    idx = np.random.default_rng(4).choice(m.n_params, 60, replace=False)
    # make sure every parameter block is probed at least once
    starts = np.cumsum([0] + [int(np.prod(s)) for _, s in m._layout])[:-1]
    idx = np.unique(np.concatenate([idx, starts]))
    base = m.params.copy()

    def f(sub):
        m.params[:] = base
        m.params[idx] = sub
        return float(np.sum(m.forward(x, t, cv, ids, use) * up))

    num = central_diff(f, base[idx])
    m.params[:] = base
    assert rel_error(gp[idx], num) < 1e-6


def test_unconditional_rows_ignore_condition(tiny_model):
    x, t, cv, ids, _ = _inputs(tiny_model)
    a = tiny_model.forward(x, t, cv, ids, np.zeros(3, dtype=bool))
    b = tiny_model.forward(x, t)
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_wrong_width(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.forward(np.zeros((1, 5)), 1)


def test_params_shape_checked(tiny_model):
    with pytest.raises(ValueError):
        Dn.DenoiserModel(tiny_model.config, np.zeros(3))


def test_timestep_embedding_is_bounded():
    e = Dn.timestep_embedding(np.array([1, 500, 1000]), 9)
    assert e.shape == (3, 9) and np.all(np.abs(e) <= 1)


def test_normalizer_roundtrip():
    x = np.random.default_rng(0).standard_normal((50, 4)) * [1, 2, 0.001, 5]
    n = Dn.Normalizer.fit(x)
    np.testing.assert_allclose(n.to_physical(n.to_model(x)), x)
    assert n.scale[2] == 1e-2


def test_adam_matches_textbook():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(5)
    ref = p.copy()
    opt = Dn.Adam(5, lr=0.01)
    m = v = np.zeros(5)
    for k in range(1, 6):
        g = rng.standard_normal(5)
        opt.step(p, g)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_distance_map_loss_gradient(bottle):
    rng = np.random.default_rng(5)
    f = random_frames(rng, 2)
    gt = rng.uniform(-0.005, 0.03, (2, 42))
    _, g = Dn.distance_map_loss(f, gt, bottle)
    num = central_diff(lambda z: Dn.distance_map_loss(z, gt, bottle)[0], f, h=1e-7)
    assert rel_error(g, num) < 1e-4


def test_orientation_loss_gradient_and_zero():
    rng = np.random.default_rng(6)
    f = random_frames(rng, 2)
    gt = random_frames(rng, 2)
    _, g = Dn.orientation_loss(f, gt)
    num = central_diff(lambda z: Dn.orientation_loss(z, gt)[0], f)
    assert rel_error(g, num) < 1e-5
    assert Dn.orientation_loss(gt, gt)[0] == pytest.approx(0.0, abs=1e-12)


def _tiny_data(obj, n=4, frames=2, cond_dim=6, seed=0):
    rng = np.random.default_rng(seed)
    seqs = np.stack([random_frames(rng, frames) for _ in range(n)])
    return Dn.TrainingSet(seqs, rng.standard_normal((n, cond_dim)), rng.integers(0, 24, n), [obj] * n)


def test_training_loss_gradient(tiny_model, bottle):
    m = tiny_model.copy()
    data = _tiny_data(bottle)
    sched = cosine_schedule(50)
    cfg = Dn.TrainConfig(batch_size=3, cond_mask_prob=0.3)
    batch = data.batch(np.random.default_rng(9), 3)
    _, gp = Dn.training_losses(m, data, sched, np.random.default_rng(1), cfg, batch, return_grad=True)
    idx = np.random.default_rng(2).choice(m.n_params, 40, replace=False)
    base = m.params.copy()

    def f(sub):
        m.params[:] = base
        m.params[idx] = sub
        return Dn.training_losses(m, data, sched, np.random.default_rng(1), cfg, batch).total

    num = central_diff(f, base[idx], h=1e-6)
    m.params[:] = base
    assert rel_error(gp[idx], num) < 1e-4


def test_training_reduces_loss(tiny_model, bottle):
    data = _tiny_data(bottle, n=6)
    sched = cosine_schedule(50)
    before = Dn.probe_diff_loss(tiny_model, data, sched)
    m, curve = Dn.train(tiny_model.copy(), data, Dn.TrainConfig(steps=150, batch_size=6, learning_rate=3e-3,
                                                                 log_every=0), sched)
    assert len(curve) == 150 and len(curve[0]) == 5
    assert Dn.probe_diff_loss(m, data, sched) < before


def test_training_is_deterministic(tiny_model, bottle):
    data = _tiny_data(bottle)
    sched = cosine_schedule(20)
    cfg = Dn.TrainConfig(steps=5, batch_size=2, log_every=0)
    a, _ = Dn.train(tiny_model.copy(), data, cfg, sched)
    b, _ = Dn.train(tiny_model.copy(), data, cfg, sched)
    np.testing.assert_array_equal(a.params, b.params)


def test_nan_training_aborts(tiny_model, bottle):
    data = _tiny_data(bottle)
    m = tiny_model.copy()
    m.params[:] = np.nan
    with pytest.raises(Dn.TrainingDiverged):
        Dn.train(m, data, Dn.TrainConfig(steps=2, batch_size=2, log_every=0), cosine_schedule(20))


def test_windowed_training_set_normalizer_matches_crops(bottle):
    rng = np.random.default_rng(3)
    seqs = np.stack([random_frames(rng, 6) for _ in range(3)])
    data = Dn.TrainingSet(seqs, None, None, [bottle] * 3, window=4)
    crops = np.stack([s[o:o + 4].reshape(-1) for s in seqs for o in range(3)])
    np.testing.assert_allclose(data.normalizer.mean, crops.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(data.normalizer.scale, np.maximum(crops.std(axis=0), 1e-2), atol=1e-9)
    assert data.d == 4 * hoi.FRAME_DIM


def _skip_model(d, T=50, seed=5, cond_dim=6):
    cfg = Dn.DenoiserConfig(d=d, hidden_width=16, n_hidden=2, time_dim=8, cond_dim=cond_dim, cond_width=8,
                            embed_dim=4, n_embed=N_EMBED_IDS, activation="silu", skip=True, T=T)
    return Dn.DenoiserModel(cfg, rng=np.random.default_rng(seed))


def test_skip_model_gradients():
    m = _skip_model(2 * hoi.FRAME_DIM)
    rng = np.random.default_rng(0)
    x, t = rng.standard_normal((2, m.config.d)), np.array([1, 37])
    cv, ids = rng.standard_normal((2, 6)), np.array([0, 3])
    up = rng.standard_normal(x.shape)
    _, cache = m.forward(x, t, cv, ids, cache=True)
    gp, gx = m.backward(cache, up)
    assert rel_error(gx, central_diff(lambda z: float(np.sum(m.forward(z, t, cv, ids) * up)), x)) < 1e-6
    idx = rng.choice(m.n_params, 40, replace=False)
    base = m.params.copy()

    def f(sub):
        m.params[:] = base
        m.params[idx] = sub
        return float(np.sum(m.forward(x, t, cv, ids) * up))
    num = central_diff(f, base[idx])
    m.params[:] = base
    assert rel_error(gp[idx], num) < 1e-6


def test_skip_passes_input_through_at_small_t():
    m = _skip_model(hoi.FRAME_DIM, T=1000)
    v = m.views()
    v["W_out"][...] = 0.0
    v["b_out"][...] = 0.0
    x = np.random.default_rng(1).standard_normal((2, m.config.d))
    ab = cosine_schedule(1000).alpha_bar
    np.testing.assert_allclose(m.forward(x, [1, 1000]), np.sqrt(ab[[0, 999]])[:, None] * x, rtol=1e-12)


def test_skip_model_rejects_other_schedule(bottle):
    data = Dn.TrainingSet(np.stack([random_frames(np.random.default_rng(0), 4)]), None, None, [bottle])
    with pytest.raises(ValueError, match="schedule"):
        Dn.train(_skip_model(data.d, T=50, cond_dim=0), data, Dn.TrainConfig(steps=1), cosine_schedule(60))


def test_basis_normalizer_roundtrip_and_pullback():
    rng = np.random.default_rng(2)
    n = Dn.Normalizer(rng.standard_normal(3 * hoi.FRAME_DIM), rng.uniform(0.5, 2.0, 3 * hoi.FRAME_DIM), 7, 3)
    assert n.d == 3 * hoi.FRAME_DIM
    z = rng.standard_normal(n.d)
    np.testing.assert_allclose(n.to_model(n.to_physical(z)), z, atol=1e-12)
    g = rng.standard_normal(7 * hoi.FRAME_DIM)
    num = central_diff(lambda q: float(n.to_physical(q) @ g), z)
    assert rel_error(n.grad_to_model(g), num) < 1e-7


def test_basis_keeps_slow_motion_and_drops_jitter():
    n = Dn.Normalizer(np.zeros(4 * hoi.FRAME_DIM), np.ones(4 * hoi.FRAME_DIM), 20, 4)
    k = np.arange(20)
    slow = np.tile(np.cos(np.pi * (k + 0.5) * 2 / 20)[:, None], (1, hoi.FRAME_DIM))
    jitter = np.tile(np.cos(np.pi * (k + 0.5) * 19 / 20)[:, None], (1, hoi.FRAME_DIM))
    np.testing.assert_allclose(n.to_physical(n.to_model(slow.reshape(-1))), slow.reshape(-1), atol=1e-12)
    np.testing.assert_allclose(n.to_model(jitter.reshape(-1)), 0.0, atol=1e-12)


def test_basis_training_set_normalizer_matches_crop_coefficients(bottle):
    rng = np.random.default_rng(3)
    seqs = np.stack([random_frames(rng, 6) for _ in range(3)])
    data = Dn.TrainingSet(seqs, None, None, [bottle] * 3, window=4, n_coeffs=2)
    crops = np.stack([s[o:o + 4].reshape(-1) for s in seqs for o in range(3)])
    coeffs = data.normalizer.project(crops)
    np.testing.assert_allclose(data.normalizer.mean, coeffs.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(data.normalizer.scale, np.maximum(coeffs.std(axis=0), 1e-2), atol=1e-9)
    assert data.d == 2 * hoi.FRAME_DIM


def test_basis_training_loss_gradient(bottle):
    rng = np.random.default_rng(4)
    seqs = np.stack([random_frames(rng, 5, spread=0.05) for _ in range(2)])
    data = Dn.TrainingSet(seqs, rng.standard_normal((2, 6)), np.array([1, 2]), [bottle] * 2, n_coeffs=2)
    m = _skip_model(data.d)
    sched = cosine_schedule(50)
    cfg = Dn.TrainConfig(batch_size=2, cond_mask_prob=0.3)
    batch = data.batch(np.random.default_rng(9), 2)
    _, gp = Dn.training_losses(m, data, sched, np.random.default_rng(1), cfg, batch, return_grad=True)
    idx = np.random.default_rng(2).choice(m.n_params, 40, replace=False)
    base = m.params.copy()

    def f(sub):
        m.params[:] = base
        m.params[idx] = sub
        return Dn.training_losses(m, data, sched, np.random.default_rng(1), cfg, batch).total

    num = central_diff(f, base[idx], h=1e-6)
    m.params[:] = base
    assert rel_error(gp[idx], num) < 1e-4
