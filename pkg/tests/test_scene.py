import colorsys
from dataclasses import replace

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from structvid.camera import rotation_about
from structvid.scene import (
    EntitySpec,
    PropSpec,
    SceneSpec,
    camera_path,
    hue_rgb,
    random_scene,
    render_clip,
    render_layers,
    reproject_check,
)

from conftest import two_person_scene


def test_empty_static_scene_is_constant():
    clip = render_clip(SceneSpec(frames=3, height=24, width=24))
    assert np.array_equal(clip.rgb[0], clip.rgb[1]) and np.array_equal(clip.rgb[1], clip.rgb[2])
    assert not clip.mask.any() and not clip.normal.any() and not clip.pose.any()
    assert clip.keypoints == [[], [], []]


def test_fronto_parallel_panel_has_the_facing_normal():
    spec = SceneSpec(entities=(EntitySpec(kind="panel", z=3.0, height=1.0, width=0.8, hue=0.3),),
                     frames=2, height=32, width=32)
    clip = render_clip(spec)
    on = clip.mask > 0
    assert on.sum() > 50
    np.testing.assert_allclose(clip.normal[on], np.tile([0.5, 0.5, 1.0], (on.sum(), 1)), atol=1e-6)


def test_too_many_entities_is_rejected():
    spec = SceneSpec(entities=tuple(EntitySpec(x=0.3 * i) for i in range(6)))
    with pytest.raises(ValueError):
        render_clip(spec)
    with pytest.raises(ValueError):
        render_clip(SceneSpec(entities=(EntitySpec(),), motion="swap"))


def test_render_is_deterministic():
    spec = random_scene(3, frames=3, height=24, width=24)
    a, b = render_clip(spec), render_clip(spec)
    for name in ("rgb", "depth", "normal", "mask", "pose"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.keypoints == b.keypoints
    assert random_scene(3, frames=3, height=24, width=24) == spec


def test_nearer_entity_owns_the_overlap():
    spec = replace(two_person_scene(frames=9, size=48), motion="swap")
    cam = camera_path(spec)
    overlaps = 0
    for f in range(spec.frames):
        full = render_layers(spec, cam, f)
        # z-buffer oracle: render every part alone and keep the nearest
        parts = [(i + 1, render_layers(spec, cam, f, only={i}, room=False)) for i in range(2)]
        parts.append((0, render_layers(spec, cam, f, only={-1}, room=False)))
        parts.append((0, render_layers(spec, cam, f, only=set())))
        depth = np.stack([np.where(p["kind"] > 0, p["depth"], np.inf) for _, p in parts])
        owner = np.array([lbl for lbl, _ in parts])[depth.argmin(0)]
        assert np.array_equal(full["label"], owner)
        overlaps += int((np.isfinite(depth[:2]).all(0)).sum())
    assert overlaps > 0  # the two figures do cross


def test_annotations_agree_with_each_other():
    spec = replace(two_person_scene(frames=4, size=48), props=())
    clip = render_clip(spec)
    for i, e in enumerate(spec.entities):
        on = clip.mask == i + 1
        hues = np.array([colorsys.rgb_to_hsv(*px)[0] for px in clip.rgb[on]])
        assert np.abs(hues - colorsys.rgb_to_hsv(*hue_rgb(e.hue))[0]).max() < 1e-3
    person = clip.mask > 0
    n = 2 * clip.normal[person].astype(np.float64) - 1
    assert np.abs(np.linalg.norm(n, axis=-1) - 1).max() < 1e-3
    for f, people in enumerate(clip.keypoints):
        for p in people:
            grown = binary_dilation(clip.mask[f] == p["id"], iterations=2)
            for u, v, conf in p["joints"].values():
                if conf == 1.0:
                    assert grown[int(v), int(u)]


@pytest.mark.parametrize("motion", ["walk", "swap", "handoff"])
def test_identities_move_continuously(motion):
    spec = replace(two_person_scene(frames=12, size=64), motion=motion, props=(PropSpec(holder=0, receiver=1),))
    clip = render_clip(spec)
    for label in (1, 2):
        centroids = [np.argwhere(m == label).mean(0) for m in clip.mask if (m == label).any()]
        steps = np.linalg.norm(np.diff(centroids, axis=0), axis=-1)
        assert steps.max() < 10


def test_props_carry_the_background_label():
    spec = SceneSpec(props=(PropSpec(holder=None, size=0.4, position=(0.0, 0.5, 3.0)),), frames=1, height=32, width=32)
    layers = render_layers(spec, camera_path(spec), 0)
    assert (layers["kind"] == 3).any() and not layers["label"].any()


def test_static_camera_reprojects_exactly():
    stats = reproject_check(render_clip(two_person_scene(frames=3, size=48)))
    assert stats.count > 0 and stats.median < 1e-6


@pytest.mark.parametrize("camera, amount", [("dolly", 0.5), ("dolly", -0.4), ("orbit", 8.0)])
def test_moving_camera_reprojects_within_a_pixel(camera, amount):
    clip = render_clip(two_person_scene(frames=4, size=64, camera=camera, amount=amount))
    assert reproject_check(clip).median < 1.0


def test_corrupted_extrinsics_are_caught():
    clip = render_clip(two_person_scene(frames=4, size=64, camera="dolly", amount=0.5))
    ext = clip.camera.extrinsics.copy()
    ext[1::2, :, :3] = rotation_about([0, 1, 0], 5.0) @ ext[1::2, :, :3]
    assert reproject_check(clip, ext).median > 1.0


def test_reprojection_preconditions(small_clip):
    with pytest.raises(ValueError):
        reproject_check(replace(small_clip, depth=None))
    with pytest.raises(ValueError):
        reproject_check(replace(small_clip, tracks=None))
    one = replace(small_clip, rgb=small_clip.rgb[:1])
    with pytest.raises(ValueError):
        reproject_check(one)


def test_metric_depth_recovers_z(small_clip):
    spec = two_person_scene()
    z = render_layers(spec, camera_path(spec), 0)["depth"]
    np.testing.assert_allclose(small_clip.metric_depth()[0], z, rtol=1e-5)
    assert small_clip.modality("depth").shape == small_clip.rgb.shape
    with pytest.raises(ValueError):
        small_clip.modality("albedo")


def test_random_scene_respects_bounds():
    for seed in range(20):
        spec = random_scene(seed, frames=2, height=16, width=16, max_entities=5)
        assert 1 <= len(spec.entities) <= 5
        spec.validate()
    assert SceneSpec.from_json(spec.to_json()) == spec
