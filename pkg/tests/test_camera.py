import json

import numpy as np
import pytest

from structvid.camera import (
    CameraPose,
    default_intrinsic,
    look_at,
    pixel_grid,
    plucker_embed,
    project,
    rotation_about,
    unproject,
)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_intrinsic(rng, h, w) -> np.ndarray:
    f = rng.uniform(20, 200)
    return np.array([[f * rng.uniform(0.8, 1.2), rng.uniform(-2, 2), w * rng.uniform(0.3, 0.7)],
                     [0.0, f, h * rng.uniform(0.3, 0.7)],
                     [0.0, 0.0, 1.0]])


def random_pose(rng, frames=1, h=6, w=7) -> CameraPose:
    ext = []
    for _ in range(frames):
        R = random_rotation(rng)
        ext.append(np.concatenate([R, rng.uniform(-5, 5, (3, 1))], axis=1))
    return CameraPose(np.stack(ext), random_intrinsic(rng, h, w))


def test_plucker_invariants_over_random_poses():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        pl = plucker_embed(random_pose(rng), 6, 7).astype(np.float64)
        m, d = pl[..., :3], pl[..., 3:]
        assert np.abs(np.linalg.norm(d, axis=-1) - 1).max() < 1e-5
        assert np.abs((m * d).sum(-1)).max() < 1e-5


def test_origin_camera_has_zero_moment():
    rng = np.random.default_rng(1)
    for _ in range(20):
        ext = np.concatenate([random_rotation(rng), np.zeros((3, 1))], axis=1)
        pl = plucker_embed(CameraPose(ext, default_intrinsic(5, 8)), 5, 8)
        assert np.abs(pl[..., :3]).max() == 0.0


def test_optical_axis_at_the_centre_pixel():
    K = np.array([[30.0, 0, 2.5], [0, 30.0, 2.5], [0, 0, 1]])
    pl = plucker_embed(CameraPose(np.eye(3, 4), K), 5, 5)
    np.testing.assert_allclose(pl[0, 2, 2, 3:], [0, 0, 1], atol=1e-7)


def test_moving_camera_along_a_pixel_ray_keeps_that_pixel():
    rng = np.random.default_rng(2)
    for _ in range(50):
        cam = random_pose(rng)
        h, w = int(rng.integers(0, 6)), int(rng.integers(0, 7))
        before = plucker_embed(cam, 6, 7)[0, h, w]
        R = cam.rotations[0]
        center = cam.centers[0] + rng.uniform(-3, 3) * before[3:].astype(np.float64)
        moved = CameraPose(np.concatenate([R, (-R @ center)[:, None]], axis=1), cam.intrinsic)
        after = plucker_embed(moved, 6, 7)[0, h, w]
        np.testing.assert_allclose(after, before, atol=1e-5)


def test_plucker_rejects_invalid_cameras():
    K = default_intrinsic(4, 4)
    bad_rotation = np.concatenate([np.diag([1.0, 1.0, -1.0]), np.zeros((3, 1))], axis=1)
    with pytest.raises(ValueError):
        plucker_embed(CameraPose(bad_rotation, K), 4, 4)
    with pytest.raises(ValueError):
        plucker_embed(CameraPose(np.concatenate([2 * np.eye(3), np.zeros((3, 1))], axis=1), K), 4, 4)
    singular = K.copy()
    singular[1, 1] = 0.0
    with pytest.raises(ValueError):
        plucker_embed(CameraPose(np.eye(3, 4), singular), 4, 4)
    lower = K.copy()
    lower[1, 0] = 1.0
    with pytest.raises(ValueError):
        plucker_embed(CameraPose(np.eye(3, 4), lower), 4, 4)
    with pytest.raises(ValueError):
        CameraPose(np.eye(3), K)


def test_pixel_grid_uses_pixel_centres():
    g = pixel_grid(2, 3)
    assert g.shape == (2, 3, 3)
    np.testing.assert_array_equal(g[1, 2], [2.5, 1.5, 1.0])


def test_project_unproject_round_trip():
    rng = np.random.default_rng(3)
    cam = random_pose(rng)
    uv = rng.uniform(0, 7, (20, 2))
    depth = rng.uniform(0.5, 9, 20)
    world = unproject(uv, depth, cam.extrinsics[0], cam.intrinsic)
    uv2, z = project(world, cam.extrinsics[0], cam.intrinsic)
    np.testing.assert_allclose(uv2, uv, atol=1e-9)
    np.testing.assert_allclose(z, depth, atol=1e-9)


def test_look_at_centres_the_target():
    K = default_intrinsic(48, 64)
    target = np.array([0.3, 0.5, 4.0])
    ext = look_at([1.0, -0.5, 0.0], target)
    CameraPose(ext, K).validate()
    uv, z = project(target, ext, K)
    np.testing.assert_allclose(uv, [32, 24], atol=1e-9)
    assert z > 0


def test_relative_to_puts_reference_at_identity():
    rng = np.random.default_rng(4)
    cam = random_pose(rng, frames=5)
    rel = cam.relative_to(2)
    np.testing.assert_allclose(rel.extrinsics[2], np.eye(3, 4), atol=1e-12)
    rel.validate()
    # same relative geometry: every camera sees the same rays up to the rigid map
    R0, t0 = cam.rotations[2], cam.translations[2]
    d_orig = plucker_embed(cam, 6, 7)[..., 3:].astype(np.float64)
    d_rel = plucker_embed(rel, 6, 7)[..., 3:].astype(np.float64)
    np.testing.assert_allclose(d_rel, d_orig @ R0.T, atol=1e-5)
    np.testing.assert_allclose(rel.centers, cam.centers @ R0.T + t0, atol=1e-9)


def test_rotation_about_is_a_rotation():
    R = rotation_about([1, 2, 3], 37.0)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(R @ np.array([1, 2, 3]), [1, 2, 3], atol=1e-12)


def test_camera_file_round_trip(tmp_path):
    cam = random_pose(np.random.default_rng(5), frames=3)
    path = tmp_path / "camera.json"
    cam.save(path)
    payload = json.loads(path.read_text())
    assert np.array(payload["intrinsic"]).shape == (3, 3)
    assert np.array(payload["extrinsics"]).shape == (3, 3, 4)
    back = CameraPose.load(path)
    np.testing.assert_array_equal(back.extrinsics, cam.extrinsics)
    np.testing.assert_array_equal(back.intrinsic, cam.intrinsic)
