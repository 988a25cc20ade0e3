import numpy as np
import pytest

from hoi_forge import hoi, metrics
from hoi_forge.conditioning import Action, SubTask
from hoi_forge.objects import PART_LABELS, sdf_batch
from hoi_forge.planner import ground_affordance
from hoi_forge.synth import (OBJECT_KINDS, TASKS, SceneSpec, generate_dataset, generate_episode,
                             hand_template, make_object, object_primitives, random_pose,
                             split_dataset)

SPECS = [dict(kind="bottle"), dict(kind="box")]


@pytest.fixture(scope="module")
def small():
    return generate_dataset(SPECS, 12, seed=3, records_per_object=2, n_points=128)


def test_dataset_layout(small):
    assert len(small) == 12 and len(small.objects) == 6
    assert [r.object_id for r in small.records] == [i // 2 for i in range(12)]
    assert [o.kind for o in small.objects] == ["bottle", "box"] * 3
    assert small.frames().shape == (12, 150, hoi.FRAME_DIM)


def test_dataset_deterministic(small):
    again = generate_dataset(SPECS, 12, seed=3, records_per_object=2, n_points=128)
    np.testing.assert_array_equal(small.frames(), again.frames())
    other = generate_dataset(SPECS, 12, seed=4, records_per_object=2)
    assert not np.array_equal(small.frames(), other.frames())


def test_records_are_independent_of_count(small):
    """Record ``i`` only depends on ``(seed, i)`` and its object."""
    head = generate_dataset(SPECS, 4, seed=3, records_per_object=2, n_points=128)
    np.testing.assert_array_equal(head.frames(), small.frames()[:4])


def test_generated_motion_is_clean(small):
    for r in small.records:
        obj = small.object_of(r)
        f = hoi.frame_view(hoi.flatten(r.sequence))
        assert metrics.max_penetration_depth(f, obj) < 1e-6
        for sl in (hoi.LEFT_QUAT, hoi.RIGHT_QUAT, hoi.OBJ_QUAT):
            np.testing.assert_allclose(np.linalg.norm(f[:, sl], axis=1), 1.0, atol=1e-9)
        assert np.all(np.isfinite(f))


def test_contact_reaches_affordance(small):
    scores = [metrics.physical_realism(r.sequence, small.object_of(r), r.plan.aff_markers[0], r.subtask.active)
              for r in small.records if r.subtask.action not in (Action.Approach, Action.Release)]
    assert np.mean(scores) > 0.75 and min(scores) > 0.5


def test_idle_hand_stays_at_rest():
    obj = make_object("box", 1.0, np.random.default_rng(0), 128)
    sub = SubTask(Action.Push, PART_LABELS["body"], "right", 60)
    f = generate_episode(obj, sub, random_pose(SceneSpec("box"), np.random.default_rng(1)),
                         np.random.default_rng(2))
    left = f[:, hoi.LEFT_JOINTS]
    np.testing.assert_allclose(left, np.tile(left[0], (60, 1)), atol=1e-12)
    assert np.ptp(f[:, hoi.RIGHT_JOINTS], axis=0).max() > 0.02


@pytest.mark.parametrize("action", ["Lift", "Place", "Push", "Pour", "Twist"])
def test_attached_hand_moves_with_object(action):
    obj = make_object("bottle", 1.0, np.random.default_rng(0), 128)
    part = "cap" if action == "Twist" else "body"
    sub = SubTask(Action[action], PART_LABELS[part], "right", 90)
    f = generate_episode(obj, sub, random_pose(SceneSpec(), np.random.default_rng(5)), np.random.default_rng(6))
    p = hoi.split_frames(f)
    from hoi_forge.geometry import to_local
    local, _ = to_local(p["right_joints"], p["obj_trans"], p["obj_quat"])
    np.testing.assert_allclose(local[-1], local[-10], atol=1e-6)
    assert np.linalg.norm(p["obj_trans"][-1] - p["obj_trans"][0]) + abs(
        p["obj_quat"][-1] @ p["obj_quat"][0]) != 1.0


def test_noise_keeps_hands_outside():
    obj = make_object("mug", 1.0, np.random.default_rng(0), 128)
    sub = SubTask(Action.Grasp, PART_LABELS["handle"], "right", 60)
    f = generate_episode(obj, sub, random_pose(SceneSpec("mug"), np.random.default_rng(1)),
                         np.random.default_rng(2), noise=0.01)
    assert metrics.max_penetration_depth(f, obj) < 1e-6


@pytest.mark.parametrize("kind", OBJECT_KINDS)
def test_templates_rest_on_table_and_tasks_ground(kind):
    obj = make_object(kind, 1.0, np.random.default_rng(0), 256)
    assert obj.points[:, 2].min() == pytest.approx(0.0, abs=1e-4)
    for action, part, hands in TASKS[kind]:
        aff = ground_affordance(obj, SubTask(Action[action], PART_LABELS[part], hands, 150))
        assert aff.active[0] == (hands != "right") and aff.active[1] == (hands != "left")


def test_scale_is_uniform():
    a, b = object_primitives("jar", 1.0), object_primitives("jar", 2.0)
    for p, q in zip(a, b):
        np.testing.assert_allclose(np.asarray(q.size), 2 * np.asarray(p.size))
        np.testing.assert_allclose(np.asarray(q.translation), 2 * np.asarray(p.translation))
    with pytest.raises(ValueError):
        object_primitives("jar", 0.0)
    with pytest.raises(ValueError):
        object_primitives("vase")


def test_hand_template_mirror():
    r, l = hand_template("right"), hand_template("left")
    np.testing.assert_allclose(l[:, 1], -r[:, 1])
    assert r.shape == (hoi.N_JOINTS, 3)


def test_split_is_by_object(small):
    tr, te = split_dataset(small, 0.8, seed=0)
    a = {r.object_id for r in tr.records}
    b = {r.object_id for r in te.records}
    assert a and b and not (a & b) and len(tr) + len(te) == len(small)
    with pytest.raises(ValueError):
        split_dataset(small.subset(range(4)))


@pytest.mark.parametrize("kw", [dict(kind="vase"), dict(scale_range=(1.0, 0.5)), dict(noise=-1.0),
                                dict(duration=5)])
def test_scene_spec_validation(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


def test_scene_spec_round_trip():
    s = SceneSpec("jar", task=("Twist", "lid", "right"), noise=0.002)
    assert SceneSpec.from_dict(s.to_dict()) == s


def test_sdf_of_points_near_zero():
    obj = make_object("box", 0.95, np.random.default_rng(3), 200)
    assert np.abs(sdf_batch(obj, obj.points)[0]).max() < 1e-4
