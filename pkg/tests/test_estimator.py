import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hoi_forge import config, hoi
from hoi_forge.estimator import HoiDiffusion, estimator_from_config

from conftest import TINY_PARAMS


def test_params_round_trip():
    est = HoiDiffusion(**TINY_PARAMS)
    assert est.get_params()["hidden_width"] == 32
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(cfg_scale=3.0)
    assert est.guidance_config().cfg_scale == 3.0
    assert est.guidance_config(window_size=3).window_size == 3


def test_unfitted_errors(tiny_data):
    est = HoiDiffusion(**TINY_PARAMS)
    with pytest.raises(NotFittedError):
        est.predict(tiny_data)
    with pytest.raises(NotFittedError):
        est.save("unused.ckpt")
    with pytest.raises(ValueError):
        HoiDiffusion(steps=0).fit(tiny_data)


def test_fit_attributes(tiny_estimator):
    assert tiny_estimator.n_frames_ == 40
    assert len(tiny_estimator.loss_curve_) == 40 and len(tiny_estimator.transition_curve_) == 20
    assert tiny_estimator.transition_net_.n_frames == 10
    assert np.all(np.isfinite([row[0] for row in tiny_estimator.loss_curve_]))


def test_fit_is_deterministic(tiny_data, tiny_estimator):
    again = HoiDiffusion(**TINY_PARAMS).fit(tiny_data)
    np.testing.assert_array_equal(again.model_.params, tiny_estimator.model_.params)
    np.testing.assert_array_equal(again.transition_model_.params, tiny_estimator.transition_model_.params)


def test_without_transition_prior(tiny_data):
    est = HoiDiffusion(**{**TINY_PARAMS, "steps": 2, "transition_steps": 0}).fit(tiny_data)
    with pytest.raises(ValueError):
        est.transition_net_


def test_predict_one_sample_per_record(tiny_estimator, tiny_data):
    sub = tiny_data.subset(range(3))
    out = tiny_estimator.predict(sub)
    assert len(out) == 3 and all(len(s) == 40 for s in out)
    np.testing.assert_array_equal(out[2].active, sub.records[2].sequence.active)
    with pytest.raises(ValueError):
        tiny_estimator.predict(sub, seeds=[1, 2])


def test_save_load_equivalence(tmp_path, tiny_estimator, tiny_data):
    p = tmp_path / "m.ckpt"
    tiny_estimator.save(p, run_config={"seed": 0})
    back = HoiDiffusion.load(p)
    assert back.get_params() == tiny_estimator.get_params() and back.run_config_ == {"seed": 0}
    np.testing.assert_array_equal(back.model_.params, tiny_estimator.model_.params)
    sub = tiny_data.subset([0])
    cfg = tiny_estimator.guidance_config(guidance_rate=0.0)
    a = tiny_estimator.predict(sub, [9], config=cfg)[0]
    b = back.predict(sub, [9], config=cfg)[0]
    np.testing.assert_array_equal(hoi.flatten(a), hoi.flatten(b))
    back.save(tmp_path / "again.ckpt", run_config={"seed": 0})
    assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()


def test_from_config():
    cfg = config.resolve(overrides=["model.hidden_width=64", "guidance.cfg_scale=2", "seed=4"])
    est = estimator_from_config(cfg)
    assert (est.hidden_width, est.cfg_scale, est.random_state) == (64, 2, 4)
    assert est.lambda_pen == cfg["guidance"]["lambda_pen"]
