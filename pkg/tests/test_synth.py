import numpy as np
import pytest

from rigidflow import synth
from rigidflow.cloud import RigidTransform
from rigidflow.clustering import euclidean_clusters
from rigidflow.synth import ObjectSpec, SceneSpec, generate


def test_static_scene_is_constant():
    frames = generate(synth.static_room(ego_motion=RigidTransform.identity()))
    for f in frames:
        assert np.array_equal(f.points, frames[0].points)
        assert not f.gt_flow.any()


def test_translation_gt():
    box = ObjectSpec("box", (1, 1, 1), synth._at(0, 0, 0.5), synth._move(0.1), 50)
    for f in generate(SceneSpec([box])):
        assert np.allclose(f.gt_flow, [0.1, 0, 0], atol=1e-15)


def test_rotation_gt_closed_form():
    centre = np.array([2.0, 1.0, 0.5])
    box = ObjectSpec("box", (1, 2, 1), synth._at(*centre), synth._move(yaw=5.0), 60)
    frame = generate(SceneSpec([box], num_frames=2))[0]
    rot = RigidTransform.from_rotvec([0, 0, np.deg2rad(5.0)], [0, 0, 0]).rotation
    expect = (frame.points - centre) @ rot.T + centre - frame.points
    assert np.abs(frame.gt_flow - expect).max() <= 1e-12


@pytest.mark.parametrize("name", sorted(synth.SCENES))
def test_gt_flow_reproduces_next_frame(name):
    spec = synth.make_scene(name)
    frames = generate(spec)
    step = spec.ego_motion.inverse()
    for a, b in zip(frames, frames[1:]):
        if len(a) != len(b):
            continue  # occlusion changes which points are visible
        assert np.abs(step.apply(a.points) + a.gt_flow - b.points).max() <= 1e-12


def test_occluded_scene_keeps_points_aligned():
    spec = synth.occlusion_split()
    frames = generate(spec)
    assert len(frames[0]) < len(frames[-1])
    for t, f in enumerate(frames):
        assert len(synth.object_ids(spec, t)) == len(f)


def test_fig2_clustering():
    for sep, want in ((0.5, 2), (0.25, 1)):
        frame = generate(synth.fig2_scene(sep))[0]
        assert euclidean_clusters(frame.points, 0.3).num_clusters == want


def test_fig2_defaults():
    spec = synth.fig2_scene()
    assert len(spec.objects) == 2 and spec.num_frames == 5
    a, b = (o.motion.translation for o in spec.objects)
    assert np.array_equal(a, -b) and a[0] != 0
    still = generate(synth.fig2_scene(speed=0.0))
    assert not still[0].gt_flow.any()


def test_determinism_and_catalogue():
    suite_a = synth.benchmark_suite(3)
    suite_b = synth.benchmark_suite(3)
    assert [n for _, n in suite_a] == ["static_room", "single_mover", "fig2_0.25", "fig2_0.5", "crowd",
                                       "occlusion_split", "rotating_vehicle"]
    for (sa, _), (sb, _) in zip(suite_a, suite_b):
        for fa, fb in zip(generate(sa), generate(sb)):
            assert fa.points.tobytes() == fb.points.tobytes()
            assert fa.gt_flow.tobytes() == fb.gt_flow.tobytes()


def test_foreground_flags():
    spec = synth.crowd_scene()
    frame = generate(spec)[0]
    ids = synth.object_ids(spec, 0)
    for k, obj in enumerate(spec.objects):
        assert np.all(frame.is_foreground[ids == k] == obj.is_foreground)
    assert frame.is_foreground.any() and not frame.is_foreground.all()


def test_noise_and_resampling():
    base = synth.single_mover()
    clean = generate(base)
    noisy = generate(SceneSpec(base.objects, ego_motion=base.ego_motion, noise_sigma=0.01))
    assert np.array_equal(noisy[0].gt_flow, clean[0].gt_flow)
    assert 0 < np.abs(noisy[0].points - clean[0].points).max() < 0.1
    fresh = generate(SceneSpec(base.objects, ego_motion=base.ego_motion, resample=True))
    assert np.array_equal(fresh[0].points, clean[0].points)
    assert not np.array_equal(fresh[1].points, clean[1].points)
    assert len(synth.object_ids(SceneSpec(base.objects, resample=True), 2)) == len(fresh[2])


def test_wall_sampled_on_near_face():
    wall = ObjectSpec("wall", (4, 0.2, 2), synth._at(0, 3, 1), points_per_object=50)
    frame = generate(SceneSpec([wall], num_frames=1))[0]
    assert np.allclose(frame.points[:, 1], 2.9)
    assert not frame.is_foreground.any()


def test_spec_validation():
    with pytest.raises(ValueError):
        ObjectSpec("sphere", (1, 1, 1))
    with pytest.raises(ValueError):
        ObjectSpec("box", (1, 1, 1), points_per_object=0)
    with pytest.raises(ValueError):
        SceneSpec([ObjectSpec("box", (1, 1, 1))], noise_sigma=-1.0)
    with pytest.raises(KeyError):
        synth.make_scene("nowhere")
