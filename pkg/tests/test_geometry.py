import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hoi_forge import geometry as G

from oracles import central_diff, quat_wxyz_to_matrix, rel_error


def unit_quats(n, seed=0):
    return G.qnormalize(np.random.default_rng(seed).standard_normal((n, 4)))


def test_quat_matrix_matches_scipy():
    for q in unit_quats(20):
        np.testing.assert_allclose(G.quat_to_matrix(q), quat_wxyz_to_matrix(q), atol=1e-12)


def test_matrix_quat_roundtrip_up_to_sign():
    for q in unit_quats(20, 1):
        back = G.matrix_to_quat(G.quat_to_matrix(q))
        assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-10


def test_qmul_composes_rotations():
    a, b = unit_quats(2, 2)
    np.testing.assert_allclose(G.quat_to_matrix(G.qmul(a, b)),
                               G.quat_to_matrix(a) @ G.quat_to_matrix(b), atol=1e-12)


def test_axis_angle_quarter_turn():
    q = G.axis_angle_quat(np.array([0.0, 0.0, 1.0]), np.pi / 2)
    np.testing.assert_allclose(G.quat_to_matrix(q) @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)


def test_make_continuous_removes_sign_flips():
    q = unit_quats(1, 3)[0]
    seq = np.stack([q, -q, q, -q])
    out = G.make_continuous(seq)
    assert np.all(np.sum(out[1:] * out[:-1], axis=1) > 0)


def test_quat_to_matrix_vjp_matches_finite_differences():
    rng = np.random.default_rng(4)
    q = rng.standard_normal(4)
    gm = rng.standard_normal((3, 3))
    num = central_diff(lambda x: float(np.sum(G.quat_to_matrix(x) * gm)), q)
    assert rel_error(G.quat_to_matrix_vjp(q, gm), num) < 1e-7


def test_to_local_vjp_matches_finite_differences():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((4, 3))
    trans = rng.standard_normal(3)
    quat = rng.standard_normal(4)
    gl = rng.standard_normal((4, 3))
    _, rot = G.to_local(pts, trans, quat)
    gp, gt, gq = G.to_local_vjp(pts, trans, quat, rot, gl)
    f = lambda p, t, q: float(np.sum(G.to_local(p, t, q)[0] * gl))
    assert rel_error(gp, central_diff(lambda x: f(x, trans, quat), pts)) < 1e-7
    assert rel_error(gt, central_diff(lambda x: f(pts, x, quat), trans)) < 1e-7
    assert rel_error(gq, central_diff(lambda x: f(pts, trans, x), quat)) < 1e-7


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_to_local_inverts_transform(q, p):
    q = np.array(q)
    pts = np.array(p)[None]
    trans = np.array([0.1, -0.2, 0.3])
    world = G.transform_points(pts, trans, q)
    back, _ = G.to_local(world, trans, q)
    np.testing.assert_allclose(back, pts, atol=1e-9)


def test_qnormalize_rejects_nothing_but_keeps_zero_finite():
    assert np.all(np.isfinite(G.qnormalize(np.zeros(4))))


@pytest.mark.parametrize("angle", [0.0, 0.5, np.pi])
def test_rotation_is_orthonormal(angle):
    m = G.quat_to_matrix(G.axis_angle_quat(np.array([1.0, 2.0, 2.0]) / 3, angle))
    np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(m) == pytest.approx(1.0)
