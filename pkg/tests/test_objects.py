import numpy as np
import pytest

from hoi_forge.geometry import axis_angle_quat
from hoi_forge.objects import AffordanceMap, ObjectModel, Primitive, sdf_batch, sdf_query
from hoi_forge.synth import make_object, object_primitives

from oracles import box_sdf, central_diff, cylinder_sdf


def _points(seed, n=200, scale=0.1):
    return scale * np.random.default_rng(seed).standard_normal((n, 3))


def test_box_sdf_matches_oracle():
    half = np.array([0.03, 0.05, 0.02])
    prim = Primitive("box", half, 0)
    p = _points(0)
    d, _ = prim.sdf(p)
    np.testing.assert_allclose(d, [box_sdf(x, half) for x in p], atol=1e-12)


def test_cylinder_sdf_matches_oracle():
    prim = Primitive("cylinder", (0.03, 0.05), 0)
    p = _points(1)
    d, _ = prim.sdf(p)
    np.testing.assert_allclose(d, [cylinder_sdf(x, 0.03, 0.05) for x in p], atol=1e-12)


def test_sphere_and_capsule_closed_form():
    s = Primitive("sphere", (0.04,), 0, translation=(0.1, 0, 0))
    d, g = s.sdf(np.array([[0.1, 0.0, 0.1]]))
    assert d[0] == pytest.approx(0.06)
    np.testing.assert_allclose(g[0], [0, 0, 1])
    c = Primitive("capsule", (0.02, 0.05), 0)
    d, _ = c.sdf(np.array([[0.0, 0.0, 0.09], [0.03, 0.0, 0.0]]))
    np.testing.assert_allclose(d, [0.02, 0.01])


@pytest.mark.parametrize("kind", ["sphere", "box", "cylinder", "capsule"])
def test_sdf_gradient_is_finite_difference(kind):
    size = {"sphere": (0.04,), "box": (0.03, 0.04, 0.05), "cylinder": (0.03, 0.05), "capsule": (0.02, 0.04)}
    prim = Primitive(kind, size[kind], 0, translation=(0.01, -0.02, 0.03),
                     quaternion=axis_angle_quat(np.array([0.0, 0.6, 0.8]), 0.7))
    rng = np.random.default_rng(2)
    for p in 0.08 * rng.standard_normal((30, 3)):
        _, g = prim.sdf(p[None])
        num = central_diff(lambda z: float(prim.sdf(z[None])[0][0]), p, h=1e-7)
        if abs(np.linalg.norm(num) - 1) < 1e-3:  # away from creases
            np.testing.assert_allclose(g[0], num, atol=1e-5)


def test_rotated_primitive_is_rigid():
    q = axis_angle_quat(np.array([1.0, 0.0, 0.0]), np.pi / 2)
    prim = Primitive("box", (0.01, 0.02, 0.03), 0, quaternion=q)
    d, _ = prim.sdf(np.array([[0.0, 0.0, 0.025], [0.0, 0.035, 0.0]]))
    np.testing.assert_allclose(d, [0.005, 0.005], atol=1e-12)


def test_union_picks_minimum():
    prims = object_primitives("bottle")
    obj = ObjectModel.from_primitives(prims, 64, np.random.default_rng(0))
    p = _points(3)
    d, _, idx = sdf_batch(obj, p)
    each = np.stack([pr.sdf(p)[0] for pr in prims])
    np.testing.assert_allclose(d, each.min(0))
    np.testing.assert_array_equal(idx, each.argmin(0))
    assert sdf_query(obj, p[0])[0] == pytest.approx(d[0])


@pytest.mark.parametrize("kind", ["bottle", "box", "mug", "jar"])
def test_surface_points_lie_on_surface(kind):
    obj = make_object(kind, 1.0, np.random.default_rng(4), 300)
    d, _, _ = sdf_batch(obj, obj.points)
    assert obj.n_points == 300 and np.max(np.abs(d)) < 1e-4
    assert set(np.unique(obj.point_parts)) == set(obj.part_catalog)


def test_make_object_deterministic():
    a = make_object("mug", 1.05, np.random.default_rng(9), 128)
    b = make_object("mug", 1.05, np.random.default_rng(9), 128)
    np.testing.assert_array_equal(a.points, b.points)


def test_invalid_primitives():
    with pytest.raises(ValueError):
        Primitive("cone", (1.0,), 0)
    with pytest.raises(ValueError):
        Primitive("box", (1.0, -1.0, 1.0), 0)
    with pytest.raises(ValueError):
        ObjectModel((), np.zeros((0, 3)), np.zeros(0), {})


def test_affordance_map_validation():
    with pytest.raises(ValueError):
        AffordanceMap(np.array([0.5, 1.5]))
    with pytest.raises(ValueError):
        AffordanceMap(np.ones(3), [5])
    aff = AffordanceMap(np.ones(4), [2, 1, 2], [])
    np.testing.assert_array_equal(aff.left_region, [1, 2])
    assert aff.active == (True, False)
