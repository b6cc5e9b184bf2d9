from __future__ import annotations

import numpy as np
import pytest
import torch

from structvid.conditioning import ConditioningBundle
from structvid.denoiser import DenoiserConfig, ModalityConfig, StructuralDenoiser
from structvid.scene import EntitySpec, PropSpec, SceneSpec, render_clip

TINY = DenoiserConfig(base_channels=8, channel_mult=(1, 2), heads=2, guider_widths=(8, 8, 8, 8))


def tiny_model(modalities=("rgb",), config: DenoiserConfig = TINY, seed: int = 0) -> StructuralDenoiser:
    torch.manual_seed(seed)
    return StructuralDenoiser(config, ModalityConfig(tuple(modalities)))


def random_bundle(modalities=("rgb",), b=1, f=2, size=16, seed=0, labels=4, latent_channels=3) -> ConditioningBundle:
    g = torch.Generator().manual_seed(seed)
    return ConditioningBundle(
        reference={m: torch.randn(b, latent_channels, size, size, generator=g) for m in modalities},
        frames=f,
        masks=torch.randint(0, labels, (b, f, size, size), generator=g),
        ref_masks=torch.randint(0, labels, (b, size, size), generator=g),
        pose=torch.rand(b, f, 3, size, size, generator=g),
        plucker=torch.randn(b, f, 6, size, size, generator=g),
        modalities=tuple(modalities),
    )


def random_latents(modalities, b=1, f=2, size=16, seed=1, channels=3) -> dict[str, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    return {m: torch.randn(b, f, channels, size, size, generator=g) for m in modalities}


def two_person_scene(frames=4, size=32, camera="static", amount=0.0, motion="walk") -> SceneSpec:
    return SceneSpec(
        entities=(EntitySpec(hue=0.0, x=-0.5, z=2.6, vx=0.02), EntitySpec(hue=0.5, x=0.6, z=3.2, vx=-0.02)),
        props=(PropSpec(holder=0),),
        motion=motion, camera=camera, camera_amount=amount, frames=frames, height=size, width=size, seed=3,
    )


@pytest.fixture(scope="session")
def small_clip():
    return render_clip(two_person_scene(), clip_id="small")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Three 16x16 clips of 6 frames on disk, with a manifest."""
    from structvid.dataset import generate_dataset

    root = tmp_path_factory.mktemp("data")
    generate_dataset(root, clips=3, seed=5, frames=6, height=16, width=16, max_entities=2)
    return root
