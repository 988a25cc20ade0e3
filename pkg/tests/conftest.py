import numpy as np
import pytest

from hoi_forge import hoi
from hoi_forge.conditioning import N_EMBED_IDS
from hoi_forge.denoiser import DenoiserConfig, DenoiserModel
from hoi_forge.geometry import axis_angle_quat, qnormalize
from hoi_forge.synth import make_object


@pytest.fixture(scope="session")
def bottle():
    return make_object("bottle", 1.0, np.random.default_rng(0), n_points=256)


@pytest.fixture(scope="session")
def box():
    return make_object("box", 1.0, np.random.default_rng(1), n_points=256)


def random_frames(rng, n_frames=2, spread=0.06, center=(0.0, 0.0, 0.06)):
    """Frames with joints scattered around ``center`` and a slightly rotated object."""
    f = np.zeros((n_frames, hoi.FRAME_DIM))
    for sl in (hoi.LEFT_JOINTS, hoi.RIGHT_JOINTS):
        f[:, sl] = (np.asarray(center) + spread * rng.standard_normal((n_frames, hoi.N_JOINTS, 3))
                    ).reshape(n_frames, -1)
    for sl in (hoi.LEFT_QUAT, hoi.RIGHT_QUAT):
        f[:, sl] = qnormalize(rng.standard_normal((n_frames, 4)))
    f[:, hoi.OBJ_TRANS] = 0.01 * rng.standard_normal((n_frames, 3))
    axis = rng.standard_normal(3)
    f[:, hoi.OBJ_QUAT] = axis_angle_quat(axis / np.linalg.norm(axis), 0.2) * (1 + 0.05 * rng.standard_normal(4))
    return f


@pytest.fixture
def frames_rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    cfg = DenoiserConfig(d=2 * hoi.FRAME_DIM, hidden_width=16, n_hidden=2, time_dim=8, cond_dim=6,
                         cond_width=8, embed_dim=4, n_embed=N_EMBED_IDS, activation="tanh")
    return DenoiserModel(cfg, rng=np.random.default_rng(7))


TINY_PARAMS = dict(T=50, hidden_width=32, n_hidden=2, time_dim=16, cond_width=16, embed_dim=8, steps=40,
                   batch_size=8, transition_frames=10, transition_width=32, transition_hidden=2,
                   transition_steps=20, random_state=0)


@pytest.fixture(scope="session")
def tiny_data():
    from hoi_forge.synth import generate_dataset
    specs = [dict(kind="bottle", duration=40), dict(kind="box", duration=40)]
    return generate_dataset(specs, 16, seed=0, records_per_object=4)


@pytest.fixture(scope="session")
def tiny_estimator(tiny_data):
    from hoi_forge.estimator import HoiDiffusion
    return HoiDiffusion(**TINY_PARAMS).fit(tiny_data)
