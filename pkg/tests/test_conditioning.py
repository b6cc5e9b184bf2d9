import numpy as np
import pytest
import torch

from structvid.camera import CameraPose, default_intrinsic, look_at, plucker_embed
from structvid.conditioning import (
    CameraEncoder,
    ClipConditions,
    PoseGuider,
    ReferenceEncoder,
    collate_conditions,
    encode_camera,
    encode_pose,
    encode_reference,
    id_maps,
)
from structvid.identity import IdEmbeddingTable, expand_masks
from structvid.latent import IdentityCodec, SpaceToDepthCodec

from conftest import random_bundle


def randomize_head(encoder):
    torch.manual_seed(11)
    torch.nn.init.normal_(encoder.head.weight, std=0.1)
    return encoder


def blob_pose(y, x, size=64, frames=1):
    pose = torch.zeros(1, frames, 3, size, size)
    pose[..., y - 2:y + 2, x - 2:x + 2] = 1.0
    return pose


def test_zero_pose_with_zero_init_head_gives_zero_features():
    guider = PoseGuider(8, factor=4)
    out = encode_pose(guider, torch.zeros(2, 3, 3, 32, 32), (32, 32))
    assert out.shape == (6, 8, 8, 8)
    assert torch.count_nonzero(out) == 0
    # a zero-init head silences any pose
    assert torch.count_nonzero(encode_pose(guider, torch.rand(1, 2, 3, 32, 32), (32, 32))) == 0


@pytest.mark.parametrize("factor", [1, 2, 4, 8])
def test_feature_grid_matches_latent_grid(factor):
    out = encode_camera(CameraEncoder(5, factor=factor), torch.randn(1, 2, 6, 32, 48), (32, 48))
    assert out.shape == (2, 5, 32 // factor, 48 // factor)


def test_shape_mismatch_is_rejected():
    with pytest.raises(ValueError):
        encode_pose(PoseGuider(4), torch.zeros(1, 2, 3, 16, 16), (32, 32))
    with pytest.raises(ValueError):
        encode_camera(CameraEncoder(4), torch.zeros(1, 2, 5, 16, 16), (16, 16))
    with pytest.raises(ValueError):
        PoseGuider(4, factor=3)
    with pytest.raises(ValueError):
        PoseGuider(4, factor=16)


@pytest.mark.parametrize("shift", [(8, 0), (0, 12), (-8, 4)])
def test_pose_features_follow_the_skeleton(shift):
    guider = randomize_head(PoseGuider(8, factor=4))
    with torch.no_grad():
        base = guider(torch.zeros(1, 3, 64, 64))

        def peak(pose):
            resp = (encode_pose(guider, pose, (64, 64)) - base).abs().sum(1)[0]
            return np.array(np.unravel_index(int(resp.argmax()), resp.shape))

        a = peak(blob_pose(30, 30))
        b = peak(blob_pose(30 + shift[0], 30 + shift[1]))
    assert np.abs((b - a) - np.array(shift) / 4).max() <= 1


def static_and_moving_plucker(size=16, frames=3):
    K = default_intrinsic(size, size)
    static = np.stack([look_at([0, 0, 0], [0, 0, 1])] * frames)
    moving = np.stack([look_at([0.3 * i, 0, 0], [0, 0, 3]) for i in range(frames)])
    to_t = lambda cam: torch.from_numpy(plucker_embed(cam, size, size)).permute(0, 3, 1, 2)[None]
    return to_t(CameraPose(static, K)), to_t(CameraPose(moving, K))


def test_static_camera_gives_identical_features_per_frame():
    enc = randomize_head(CameraEncoder(6, factor=2))
    static, _ = static_and_moving_plucker()
    with torch.no_grad():
        out = encode_camera(enc, static, (16, 16))
    assert torch.equal(out[0], out[1]) and torch.equal(out[0], out[2])
    assert torch.count_nonzero(encode_camera(CameraEncoder(6), static, (16, 16))) == 0


def test_distinct_trajectories_give_distinct_features():
    enc = randomize_head(CameraEncoder(6, factor=2))
    rng = np.random.default_rng(0)
    K = default_intrinsic(16, 16)
    with torch.no_grad():
        for _ in range(10):
            feats = []
            for _ in range(2):
                ext = np.stack([look_at(rng.uniform(-2, 2, 3), rng.uniform(-1, 1, 3) + [0, 0, 4]) for _ in range(2)])
                pl = torch.from_numpy(plucker_embed(CameraPose(ext, K), 16, 16)).permute(0, 3, 1, 2)[None]
                feats.append(encode_camera(enc, pl, (16, 16)))
            assert (feats[0] - feats[1]).abs().max() > 1e-4


def reference_encoder(modalities=("rgb",), **kw):
    torch.manual_seed(3)
    return ReferenceEncoder(modalities, latent_ch=3, channels=[8, 16], id_channels=4, **kw)


def test_reference_bundle_layout():
    enc = reference_encoder(("rgb", "depth"))
    ref = {m: torch.randn(2, 3, 16, 16) for m in ("rgb", "depth")}
    out = encode_reference(enc, ref)
    assert [f.shape for f in out["levels"]] == [(2, 8, 16, 16), (2, 16, 8, 8)]
    assert out["mid"].shape == (2, 16, 8, 8)


def test_rgb_only_bundle_ignores_other_inputs():
    enc = reference_encoder(("rgb",))
    rgb = torch.randn(1, 3, 16, 16)
    a = encode_reference(enc, {"rgb": rgb})
    b = encode_reference(enc, {"rgb": rgb, "depth": torch.randn(1, 3, 16, 16)})
    for x, y in zip(a["levels"] + [a["mid"]], b["levels"] + [b["mid"]]):
        assert torch.equal(x, y)


def test_missing_reference_modality_is_rejected():
    with pytest.raises(ValueError, match="depth"):
        encode_reference(reference_encoder(("rgb", "depth")), {"rgb": torch.zeros(1, 3, 8, 8)})


def test_zero_reference_with_zero_init_entry_is_zero():
    enc = reference_encoder(("rgb", "depth"), zero_init_entry=True)
    out = encode_reference(enc, {m: torch.zeros(1, 3, 16, 16) for m in ("rgb", "depth")})
    assert all(torch.count_nonzero(f) == 0 for f in out["levels"] + [out["mid"]])


def test_swapping_identity_rows_only_changes_masked_neighbourhood():
    enc = reference_encoder(("rgb",))
    torch.nn.init.normal_(enc.id_proj.weight)
    table = IdEmbeddingTable(3, 4)
    torch.nn.init.normal_(table.weight)
    swapped = table.weight.detach()[[1, 0, 2]]
    masks = torch.zeros(1, 24, 24, dtype=torch.long)
    masks[0, 3:7, 4:9] = 1
    masks[0, 5:9, 10:13] = 2
    rgb = {"rgb": torch.randn(1, 3, 24, 24)}
    with torch.no_grad():
        a = encode_reference(enc, rgb, expand_masks(masks, table))["levels"][0]
        b = encode_reference(enc, rgb, expand_masks(masks, swapped))["levels"][0]
    changed = (a - b).abs().sum(1)[0] > 0
    assert changed.any()
    # five 3x3 convolutions separate the input from level-0 features
    reach = torch.nn.functional.max_pool2d((masks > 0).float()[None], 11, stride=1, padding=5)[0, 0] > 0
    assert not (changed & ~reach).any()


def test_id_maps_requires_latent_grid_masks():
    cond = random_bundle(size=8)
    table = IdEmbeddingTable(5, 4)
    emap, ref_emap = id_maps(cond, table)
    assert emap.shape == (1, 2, 8, 8, 4) and ref_emap.shape == (1, 8, 8, 4)
    bad = random_bundle(size=8)
    bad.masks = torch.zeros(1, 2, 16, 16, dtype=torch.long)
    with pytest.raises(ValueError):
        id_maps(bad, table)
    assert id_maps(cond.without("masks", "ref_masks"), table) == (None, None)
    with pytest.raises(ValueError):
        cond.without("reference")


@pytest.mark.parametrize("codec, grid", [(IdentityCodec(), 16), (SpaceToDepthCodec(2), 8)])
def test_collate_puts_masks_on_the_latent_grid(codec, grid):
    rng = np.random.default_rng(0)
    item = ClipConditions(
        reference={"rgb": rng.random((16, 16, 3)), "depth": rng.random((16, 16, 3))},
        masks=rng.integers(0, 3, (2, 16, 16)), ref_mask=rng.integers(0, 3, (16, 16)),
        pose=rng.random((2, 16, 16, 3)).astype(np.float32), plucker=rng.random((2, 16, 16, 6)).astype(np.float32),
    )
    cond = collate_conditions([item, item], codec, ("rgb", "depth"))
    assert cond.batch == 2 and cond.frames == 2 and cond.latent_size == (grid, grid)
    assert cond.masks.shape == (2, 2, grid, grid) and cond.ref_masks.shape == (2, grid, grid)
    assert cond.pose.shape == (2, 2, 3, 16, 16) and cond.plucker.shape == (2, 2, 6, 16, 16)
    with pytest.raises(ValueError):
        collate_conditions([], codec, ("rgb",))
